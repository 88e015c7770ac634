"""Single-sequence fast-weight memory and the quadratic attention oracles.

These are plain numpy reference implementations, one step at a time. The
batched, differentiable recurrence lives in :mod:`fastweights.layer`.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .features import EPS_GUARD
from .tensor import Tensor

RULES = ("sum", "delta")
NORMALIZATIONS = ("attention", "sum", "none")


@dataclass(frozen=True)
class FastWeightState:
    W: np.ndarray
    z: np.ndarray
    step_index: int = 0

    @classmethod
    def empty(cls, d_value: int, d_dot: int, dtype=np.float64) -> FastWeightState:
        return cls(np.zeros((d_value, d_dot), dtype), np.zeros(d_dot, dtype), 0)

    @property
    def d_value(self) -> int:
        return self.W.shape[0]

    @property
    def d_dot(self) -> int:
        return self.W.shape[1]


@dataclass(frozen=True)
class UpdateRuleConfig:
    rule: str = "sum"
    normalization: str = "attention"

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown update rule {self.rule!r}; expected one of {RULES}")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}; expected one of {NORMALIZATIONS}")


def _check_dims(s: FastWeightState, phik, v) -> tuple[np.ndarray, np.ndarray]:
    phik = np.asarray(phik, dtype=s.W.dtype)
    v = np.asarray(v, dtype=s.W.dtype)
    if phik.shape != (s.d_dot,) or v.shape != (s.d_value,):
        raise ValueError(
            f"state is {s.d_value}x{s.d_dot} but got key {phik.shape} and value {v.shape}"
        )
    return phik, v


def sum_update_step(s: FastWeightState, phik, v) -> FastWeightState:
    phik, v = _check_dims(s, phik, v)
    return FastWeightState(s.W + np.outer(v, phik), s.z + phik, s.step_index + 1)


def attention_readout(s: FastWeightState, phiq, eps: float = EPS_GUARD) -> np.ndarray:
    phiq = np.asarray(phiq, dtype=s.W.dtype)
    if s.step_index == 0:
        return np.zeros(s.d_value, s.W.dtype)
    return (s.W @ phiq) / (s.z @ phiq + eps)


def retrieve(s: FastWeightState, phik, normalization: str = "none", eps: float = EPS_GUARD) -> np.ndarray:
    """The value currently bound to ``phik`` (v-bar); zero for an empty memory."""
    phik = np.asarray(phik, dtype=s.W.dtype)
    if s.step_index == 0:
        return np.zeros(s.d_value, s.W.dtype)
    if normalization == "attention":
        return (s.W @ phik) / (s.z @ phik + eps)
    return s.W @ phik


def delta_rule_step(
    s: FastWeightState,
    phik,
    v,
    beta: float,
    normalization: str = "sum",
    eps: float = EPS_GUARD,
) -> FastWeightState:
    """``W <- W + beta (v - v_bar) (x) phik``; phik must already be sum-normalised if that mode is used."""
    phik, v = _check_dims(s, phik, v)
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"write strength beta={beta} outside [0, 1]")
    vbar = retrieve(s, phik, normalization, eps)
    W = s.W + beta * np.outer(v - vbar, phik)
    z = s.z + phik if normalization == "attention" else s.z
    return FastWeightState(W, z, s.step_index + 1)


def delta_rule_step_write_remove(
    s: FastWeightState, phik, v, beta: float, normalization: str = "sum", eps: float = EPS_GUARD
) -> FastWeightState:
    """Same update written as separate write and remove terms with ``v_new``."""
    phik, v = _check_dims(s, phik, v)
    vbar = retrieve(s, phik, normalization, eps)
    v_new = beta * v + (1.0 - beta) * vbar
    W = s.W + np.outer(v_new, phik) - np.outer(vbar, phik)
    z = s.z + phik if normalization == "attention" else s.z
    return replace(s, W=W, z=z, step_index=s.step_index + 1)


def delta_readout(s: FastWeightState, phiq, normalization: str = "sum", eps: float = EPS_GUARD) -> np.ndarray:
    if normalization == "attention":
        return attention_readout(s, phiq, eps)
    phiq = np.asarray(phiq, dtype=s.W.dtype)
    if s.step_index == 0:
        return np.zeros(s.d_value, s.W.dtype)
    return s.W @ phiq


def softmax_attention_oracle(K, V, q) -> np.ndarray:
    """``V softmax(K^T q)`` with keys/values stored as columns."""
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if K.ndim != 2 or K.shape[1] == 0:
        raise ValueError("softmax attention needs at least one stored key")
    logits = K.T @ np.asarray(q, dtype=np.float64)
    w = np.exp(logits - logits.max())
    return V @ (w / w.sum())


def _features(phi, x: np.ndarray) -> np.ndarray:
    out = phi(x)
    return np.asarray(out.data if isinstance(out, Tensor) else out)


def linearized_attention_oracle(K, V, q, phi, normalize: bool = True, eps: float = EPS_GUARD) -> np.ndarray:
    """Quadratic-form linear attention over stored columns.

    ``phi`` maps a ``(n, d_key)`` array to ``(n, d_dot)`` features (a
    :class:`~fastweights.features.FeatureMap` works). With ``normalize=False``
    the denominator is dropped, giving the softmax-free form.
    """
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if K.ndim != 2 or K.shape[1] == 0:
        raise ValueError("linear attention needs at least one stored key")
    fk = _features(phi, K.T)
    fq = _features(phi, np.asarray(q, dtype=np.float64)[None])[0]
    scores = fk @ fq
    out = V @ scores
    if normalize:
        out = out / (scores.sum() + eps)
    return out
