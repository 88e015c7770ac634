"""Pure-numpy fast-weight recurrence; the fallback for the Cython kernel.

Array conventions (batch-major, C-contiguous):

    phik  (B, L, D)   key features
    v     (B, L, E)   values
    beta  (B, L)      write strengths (ignored by the sum rule)
    phiq  (B, L, D)   per-step queries, or (B, Q, D) when ``final`` is set

``attn`` selects attention normalisation; sum normalisation is applied to
the features before they reach this module, so it runs with ``attn=False``.
"""
from __future__ import annotations

import numpy as np

BACKEND = "python"


class _MatrixCounter:
    """Counts live (E, D) fast-weight buffers per sequence."""

    def __init__(self):
        self.live = 0
        self.peak = 0

    def alloc(self, n: int = 1) -> None:
        self.live += n
        self.peak = max(self.peak, self.live)

    def free(self, n: int = 1) -> None:
        self.live -= n


def _rank1_add(W, a, b, counter, scale=1.0):
    # the outer product is a transient matrix-sized temporary
    counter.alloc()
    W += scale * (a[:, :, None] * b[:, None, :])
    counter.free()


def forward(phik, v, beta, phiq, delta, attn, final, eps, segment, keep):
    B, L, D = phik.shape
    E = v.shape[2]
    dtype = phik.dtype
    counter = _MatrixCounter()
    W = np.zeros((B, E, D), dtype)
    counter.alloc()
    z = np.zeros((B, D), dtype)
    vbar = np.zeros((B, L, E), dtype)
    kden = np.ones((B, L), dtype)
    qden = np.ones(phiq.shape[:2], dtype)
    y = np.zeros((B, phiq.shape[1], E), dtype)
    checkpoints = []

    for i in range(L):
        if keep and i % segment == 0:
            checkpoints.append(W.copy())
            counter.alloc()
        k = phik[:, i]
        if delta:
            p = np.einsum("bed,bd->be", W, k)
            if attn:
                kden[:, i] = np.einsum("bd,bd->b", z, k) + eps
                p = p / kden[:, i, None]
            vbar[:, i] = p
            u = beta[:, i, None] * (v[:, i] - p)
        else:
            u = v[:, i]
        _rank1_add(W, u, k, counter)
        if attn:
            z += k
        if not final:
            q = phiq[:, i]
            r = np.einsum("bed,bd->be", W, q)
            if attn:
                qden[:, i] = np.einsum("bd,bd->b", z, q) + eps
                r = r / qden[:, i, None]
            y[:, i] = r

    if final:
        r = np.einsum("bed,bqd->bqe", W, phiq)
        if attn:
            qden[:] = np.einsum("bd,bqd->bq", z, phiq) + eps
            r = r / qden[:, :, None]
        y[:] = r
    counter.free()
    return y, vbar, kden, qden, checkpoints, counter.peak


def backward(gy, phik, v, beta, phiq, vbar, kden, qden, checkpoints, delta, attn, final, eps, segment):
    B, L, D = phik.shape
    E = v.shape[2]
    dtype = phik.dtype
    counter = _MatrixCounter()
    counter.alloc(len(checkpoints))
    checkpoints = list(checkpoints)

    gphik = np.zeros_like(phik)
    gv = np.zeros_like(v)
    gbeta = np.zeros_like(beta)
    gphiq = np.zeros_like(phiq)
    gW = np.zeros((B, E, D), dtype)
    counter.alloc()
    gz = np.zeros((B, D), dtype)
    if attn:
        # z after each step; vectors only, O(L * D)
        zs = np.cumsum(phik, axis=1)
    if delta:
        u_all = beta[:, :, None] * (v - vbar)
    else:
        u_all = v

    nseg = len(checkpoints)
    for s in reversed(range(nseg)):
        start = s * segment
        end = min(L, start + segment)
        buf = [checkpoints.pop()]
        for j in range(start, end):
            Wj = buf[-1].copy()
            counter.alloc()
            _rank1_add(Wj, u_all[:, j], phik[:, j], counter)
            buf.append(Wj)

        if final and s == nseg - 1:
            W_L = buf[-1]
            g = gy
            gr = g / qden[:, :, None] if attn else g
            counter.alloc()
            gW += np.einsum("bqe,bqd->bed", gr, phiq)
            counter.free()
            gphiq += np.einsum("bed,bqe->bqd", W_L, gr)
            if attn:
                yv = np.einsum("bed,bqd->bqe", W_L, phiq) / qden[:, :, None]
                gc = -np.einsum("bqe,bqe->bq", g, yv) / qden
                gphiq += gc[:, :, None] * zs[:, L - 1][:, None, :]
                gz += np.einsum("bq,bqd->bd", gc, phiq)

        for i in reversed(range(start, end)):
            W_i = buf[i - start + 1]
            W_prev = buf[i - start]
            k = phik[:, i]
            if not final:
                q = phiq[:, i]
                g = gy[:, i]
                gr = g / qden[:, i, None] if attn else g
                _rank1_add(gW, gr, q, counter)
                gphiq[:, i] += np.einsum("bed,be->bd", W_i, gr)
                if attn:
                    yv = np.einsum("bed,bd->be", W_i, q) / qden[:, i, None]
                    gc = -np.einsum("be,be->b", g, yv) / qden[:, i]
                    gphiq[:, i] += gc[:, None] * zs[:, i]
                    gz += gc[:, None] * q

            u = u_all[:, i]
            gu = np.einsum("bed,bd->be", gW, k)
            gphik[:, i] += np.einsum("bed,be->bd", gW, u)
            if delta:
                diff = v[:, i] - vbar[:, i]
                b_i = beta[:, i, None]
                gbeta[:, i] = np.einsum("be,be->b", gu, diff)
                gv[:, i] = b_i[:, 0, None] * gu
                gvbar = -b_i * gu
                if attn:
                    a = kden[:, i]
                    gp = gvbar / a[:, None]
                    ga = -np.einsum("be,be->b", gvbar, vbar[:, i]) / a
                else:
                    gp = gvbar
                _rank1_add(gW, gp, k, counter)
                gphik[:, i] += np.einsum("bed,be->bd", W_prev, gp)
            else:
                gv[:, i] = gu
            if attn:
                # z_i = z_{i-1} + phik_i
                gphik[:, i] += gz
                if delta:
                    z_prev = zs[:, i - 1] if i > 0 else np.zeros((B, D), dtype)
                    gphik[:, i] += ga[:, None] * z_prev
                    gz += ga[:, None] * k
        counter.free(len(buf))
        del buf

    counter.free()
    return gphik, gv, gbeta, gphiq, counter.peak
