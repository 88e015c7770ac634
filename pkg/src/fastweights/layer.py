"""Batched fast-weight recurrence with a memory-bounded backward pass.

The forward pass keeps only per-step vectors (features, values, write
strengths, retrieved values, denominators) plus a checkpoint of the fast
weights every ``ceil(sqrt(L))`` steps. The backward pass rebuilds each
segment's fast weights by replaying it forward from its checkpoint, so the
number of live ``d_value x d_dot`` matrices stays within ``2 ceil(sqrt(L)) + 4``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .features import EPS_GUARD
from .kernels import get_backend
from .memory import NORMALIZATIONS, RULES
from .tensor import Tensor, _active_tape, _make, as_tensor


def segment_length(L: int) -> int:
    """ceil(sqrt(L)), the checkpoint spacing."""
    return math.isqrt(L - 1) + 1 if L > 1 else 1


def live_matrix_bound(L: int) -> int:
    return 2 * segment_length(L) + 4


@dataclass
class StepRecord:
    phik: np.ndarray
    v: np.ndarray
    beta: np.ndarray
    phiq: np.ndarray
    vbar: np.ndarray
    kden: np.ndarray
    qden: np.ndarray
    checkpoints: object
    rule: str
    normalization: str
    final: bool
    eps: float
    segment: int
    backend: str
    unbatched: bool
    forward_peak: int
    backward_peak: int | None = None
    consumed: bool = field(default=False, repr=False)

    @property
    def length(self) -> int:
        return self.phik.shape[1]


def _prep(a, dtype, name) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(a, dtype=dtype))
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"non-finite {name}")
    return a


def forward_sequence(
    phik,
    v,
    phiq,
    beta=None,
    *,
    rule: str = "sum",
    normalization: str = "attention",
    final: bool = False,
    eps: float = EPS_GUARD,
    backend: str | None = None,
    keep_record: bool = True,
):
    """Run the fast-weight memory over a sequence.

    Shapes: ``phik (B, L, d_dot)``, ``v (B, L, d_value)``, ``beta (B, L)``
    and ``phiq (B, L, d_dot)`` for a readout after every write, or
    ``(B, Q, d_dot)`` with ``final=True`` for Q queries after the last write.
    The batch axis may be dropped. Features must already be sum-normalised
    when ``normalization="sum"``.

    Returns ``(y, record)``; ``record`` is None when ``keep_record`` is false.
    """
    if rule not in RULES:
        raise ValueError(f"unknown rule {rule!r}")
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {normalization!r}")
    phik_arr = np.asarray(phik)
    dtype = phik_arr.dtype if phik_arr.dtype in (np.float32, np.float64) else np.float64
    unbatched = phik_arr.ndim == 2
    phik = _prep(phik_arr, dtype, "key features")
    v = _prep(v, dtype, "values")
    phiq = _prep(phiq, dtype, "query features")
    if unbatched:
        phik, v, phiq = phik[None], v[None], phiq[None]
    if phik.ndim != 3 or v.ndim != 3 or phiq.ndim != 3:
        raise ValueError("expected (B, L, d) arrays")
    B, L, D = phik.shape
    if L == 0:
        raise ValueError("empty sequence")
    if v.shape[:2] != (B, L) or phiq.shape[0] != B or phiq.shape[2] != D:
        raise ValueError(f"inconsistent shapes: keys {phik.shape}, values {v.shape}, queries {phiq.shape}")
    if not final and phiq.shape[1] != L:
        raise ValueError("per-step readout needs one query per step")
    if beta is None:
        if rule == "delta":
            raise ValueError("the delta rule needs write strengths")
        beta = np.zeros((B, L), dtype)
    else:
        beta = _prep(beta, dtype, "write strengths")
        if unbatched:
            beta = beta[None]
    if beta.shape != (B, L):
        raise ValueError(f"write strengths have shape {beta.shape}, expected {(B, L)}")
    if rule == "delta" and (beta.min() < 0 or beta.max() > 1):
        raise ValueError("write strengths must lie in [0, 1]")

    kernel = get_backend(backend)
    seg = segment_length(L)
    attn = normalization == "attention"
    y, vbar, kden, qden, ckpts, peak = kernel.forward(
        phik, v, beta, phiq, rule == "delta", attn, final, float(eps), seg, keep_record
    )
    out = y[0] if unbatched else y
    if not keep_record:
        return out, None
    record = StepRecord(
        phik=phik, v=v, beta=beta, phiq=phiq, vbar=vbar, kden=kden, qden=qden,
        checkpoints=ckpts, rule=rule, normalization=normalization, final=final,
        eps=float(eps), segment=seg, backend=kernel.BACKEND, unbatched=unbatched,
        forward_peak=peak,
    )
    return out, record


def backward_sequence(record: StepRecord, gy) -> dict[str, np.ndarray]:
    """Gradients of a scalar objective w.r.t. every recurrence input, given d/dy.

    Consumes the record (its checkpoints are released as segments are replayed).
    """
    if record.consumed:
        raise RuntimeError("step record already consumed")
    gy = np.ascontiguousarray(np.asarray(gy, dtype=record.phik.dtype))
    if record.unbatched:
        gy = gy[None]
    expected = (record.phiq.shape[0], record.phiq.shape[1], record.v.shape[2])
    if gy.shape != expected:
        raise ValueError(f"output gradient has shape {gy.shape}, expected {expected}")
    kernel = get_backend(record.backend)
    gphik, gv, gbeta, gphiq, peak = kernel.backward(
        gy, record.phik, record.v, record.beta, record.phiq, record.vbar, record.kden,
        record.qden, record.checkpoints, record.rule == "delta",
        record.normalization == "attention", record.final, record.eps, record.segment,
    )
    record.consumed = True
    record.checkpoints = None
    record.backward_peak = peak
    grads = {"phik": gphik, "v": gv, "beta": gbeta, "phiq": gphiq}
    if record.unbatched:
        grads = {k: g[0] for k, g in grads.items()}
    return grads


def fast_weight(
    phik,
    v,
    phiq,
    beta=None,
    *,
    rule: str = "sum",
    normalization: str = "attention",
    final: bool = False,
    eps: float = EPS_GUARD,
    backend: str | None = None,
) -> Tensor:
    """Differentiable fast-weight layer on Tensors (see :func:`forward_sequence`)."""
    phik = as_tensor(phik)
    v, phiq = as_tensor(v, phik.dtype), as_tensor(phiq, phik.dtype)
    parents = [phik, v, phiq]
    if beta is not None:
        beta = as_tensor(beta, phik.dtype)
        parents.append(beta)
    tape = _active_tape()
    needs_grad = tape is not None and any(p.requires_grad for p in parents)
    y, record = forward_sequence(
        phik.data, v.data, phiq.data, None if beta is None else beta.data,
        rule=rule, normalization=normalization, final=final, eps=eps,
        backend=backend, keep_record=needs_grad,
    )

    def bw(g):
        grads = backward_sequence(record, g)
        out = [grads["phik"], grads["v"], grads["phiq"]]
        if beta is not None:
            out.append(grads["beta"])
        return tuple(out)

    return _make(y, parents, bw, "fast_weight")
