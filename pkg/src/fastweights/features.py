"""Feature maps that linearise the softmax kernel.

Each map takes keys or queries of shape ``(..., d_key)`` and returns
nonnegative features ``(..., d_dot)`` (except ``identity``, which is the
softmax-free baseline and may be negative).
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .tensor import Tensor, as_tensor, concat, elu1, exp, matmul, relu, roll, tsum

EPS_GUARD = 1e-6

KINDS = ("identity", "elu1", "favor", "dpfp")
REDRAW_POLICIES = ("per-minibatch", "fixed")


def phi_identity(x) -> Tensor:
    return as_tensor(x)


def phi_elu1(x) -> Tensor:
    return elu1(as_tensor(x))


def phi_favor(x, R) -> Tensor:
    """Positive random features ``h(x)/sqrt(m) [exp(Rx); exp(-Rx)]``.

    ``h(x) = exp(-|x|^2 / 2) / sqrt(2)`` is folded into the exponent so large
    projections do not overflow before the Gaussian factor is applied.
    """
    x = as_tensor(x)
    R = as_tensor(R, dtype=x.dtype)
    m = R.shape[0]
    if m == 0:
        raise ValueError("FAVOR+ needs at least one random feature")
    proj = matmul(x, R.T)
    half_sq = tsum(x * x, axis=-1, keepdims=True) * 0.5
    both = concat([proj, -proj], axis=-1) - half_sq
    return exp(both) * (1.0 / math.sqrt(2.0 * m))


def phi_dpfp(x, nu: int = 1) -> Tensor:
    """Deterministic parameter-free projection to ``2 * d_key * nu`` features.

    With ``u = [relu(x); relu(-x)]``, block ``j`` (1-based) is ``u * roll(u, j)``.
    """
    x = as_tensor(x)
    d_key = x.shape[-1]
    if not 1 <= nu <= 2 * d_key - 1:
        raise ValueError(f"nu={nu} outside [1, {2 * d_key - 1}] for d_key={d_key}")
    u = concat([relu(x), relu(-x)], axis=-1)
    rolled = concat([roll(u, j, axis=-1) for j in range(1, nu + 1)], axis=-1)
    repeated = concat([u] * nu, axis=-1) if nu > 1 else u
    return repeated * rolled


def sum_normalize(y, eps: float = EPS_GUARD) -> Tensor:
    y = as_tensor(y)
    return y / (tsum(y, axis=-1, keepdims=True) + eps)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    kind: str
    d_key: int
    nu: int = 1
    m: int = 0
    R: np.ndarray | None = None
    redraw_policy: str = "fixed"
    sum_normalize: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown feature map {self.kind!r}; expected one of {KINDS}")
        if self.redraw_policy not in REDRAW_POLICIES:
            raise ValueError(f"unknown redraw policy {self.redraw_policy!r}")
        if self.kind == "dpfp" and not 1 <= self.nu <= 2 * self.d_key - 1:
            raise ValueError(f"nu={self.nu} outside [1, {2 * self.d_key - 1}]")
        if self.kind == "favor":
            if self.m <= 0:
                raise ValueError("favor needs m >= 1 random features")
            if self.R is None or self.R.shape != (self.m, self.d_key):
                raise ValueError(f"favor needs R of shape ({self.m}, {self.d_key})")

    @property
    def d_dot(self) -> int:
        if self.kind == "favor":
            return 2 * self.m
        if self.kind == "dpfp":
            return 2 * self.d_key * self.nu
        return self.d_key

    def __call__(self, x) -> Tensor:
        if self.kind == "identity":
            out = phi_identity(x)
        elif self.kind == "elu1":
            out = phi_elu1(x)
        elif self.kind == "favor":
            out = phi_favor(x, self.R)
        else:
            out = phi_dpfp(x, self.nu)
        return sum_normalize(out) if self.sum_normalize else out


def make_feature_map(
    kind: str,
    d_key: int,
    *,
    nu: int = 1,
    m: int = 0,
    sum_normalize: bool = False,
    rng: Rng | None = None,
    redraw_policy: str = "fixed",
) -> FeatureMap:
    """Build a feature map; FAVOR+ draws its evaluation matrix from a dedicated substream."""
    R = None
    if kind == "favor":
        if m <= 0:
            raise ValueError("favor needs m >= 1 random features")
        R = (rng or Rng(0)).stream("favor-eval").standard_normal((m, d_key))
    return FeatureMap(kind, d_key, nu=nu, m=m, R=R, redraw_policy=redraw_policy, sum_normalize=sum_normalize)


def redraw_features(fm: FeatureMap, rng: Rng, step: int) -> FeatureMap:
    """Fresh random features for training step ``step``; unchanged under the fixed policy."""
    if fm.kind != "favor":
        raise ValueError(f"redraw_features called on a {fm.kind!r} map")
    if fm.redraw_policy == "fixed":
        return fm
    R = rng.stream("favor-train", step).standard_normal((fm.m, fm.d_key))
    return dataclasses.replace(fm, R=R)
