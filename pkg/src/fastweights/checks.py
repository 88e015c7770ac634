"""Gradient-check and equivalence drivers shared by the CLI and the test suite."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .features import make_feature_map
from .layer import fast_weight, forward_sequence
from .memory import (
    NORMALIZATIONS,
    RULES,
    FastWeightState,
    linearized_attention_oracle,
    retrieve,
    sum_update_step,
)
from .rng import Rng
from .tensor import Tensor, finite_diff_check, matmul, sigmoid, tsum

GRAD_PHIS = ("elu1", "favor", "dpfp")
GRAD_TOL = 1e-4
EQUIV_TOL = {np.float64: 1e-10, np.float32: 1e-4}


@dataclass
class GradcheckResult:
    rule: str
    phi: str
    normalization: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < GRAD_TOL


def gradcheck_cell(
    rule: str,
    phi: str,
    normalization: str,
    *,
    seed: int = 0,
    length: int = 8,
    dim: int = 4,
    nu: int = 1,
    m: int = 4,
    eps: float = 1e-6,
) -> GradcheckResult:
    """Finite-difference check of a full fast-weight layer (projections, phi, beta, memory)."""
    rng = Rng(seed)
    g = rng.stream(f"gradcheck:{rule}:{phi}:{normalization}")
    fm = make_feature_map(phi, dim, nu=nu, m=m, sum_normalize=normalization == "sum", rng=rng)
    x = Tensor(g.standard_normal((length, dim)))
    weights = [Tensor(g.standard_normal((dim, dim)) / np.sqrt(dim)) for _ in range(3)]
    w_beta = Tensor(g.standard_normal((1, dim)))
    readout = g.standard_normal((length, dim))

    def f(x, W_k, W_v, W_q, W_beta):
        k, v, q = matmul(x, W_k.T), matmul(x, W_v.T), matmul(x, W_q.T)
        beta = sigmoid(matmul(x, W_beta.T)).reshape(length) if rule == "delta" else None
        y = fast_weight(fm(k), v, fm(q), beta, rule=rule, normalization=normalization)
        return tsum(y * Tensor(readout))

    err = finite_diff_check(f, [x, *weights, w_beta], eps=eps)
    return GradcheckResult(rule, phi, normalization, err)


def gradcheck_grid(seed: int = 0, rules=RULES, phis=GRAD_PHIS, normalizations=NORMALIZATIONS, **kw):
    return [
        gradcheck_cell(r, p, n, seed=seed, **kw)
        for r, p, n in itertools.product(rules, phis, normalizations)
    ]


@dataclass
class EquivResult:
    suite: str
    phi: str
    length: int
    max_abs_diff: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_abs_diff < self.tol


def _random_case(g: np.random.Generator, length: int | None, max_len: int, max_dim: int, dtype):
    L = length or int(g.integers(1, max_len + 1))
    d_key = int(g.integers(1, max_dim + 1))
    d_value = int(g.integers(1, max_dim + 1))
    K = g.standard_normal((d_key, L)) / np.sqrt(d_key)
    V = g.standard_normal((d_value, L))
    Q = g.standard_normal((d_key, L)) / np.sqrt(d_key)
    return K.astype(dtype), V.astype(dtype), Q.astype(dtype)


def recurrence_vs_quadratic(phi: str, K, V, Q, rng: Rng, normalize: bool = True, backend=None) -> float:
    """Max |fast-weight readout - quadratic oracle| over every step of one sequence."""
    d_key, L = K.shape
    fm = make_feature_map(phi, d_key, nu=1, m=max(1, d_key), rng=rng)
    phik, phiq = fm(K.T).data, fm(Q.T).data
    norm = "attention" if normalize else "none"
    y, _ = forward_sequence(phik, V.T, phiq, rule="sum", normalization=norm, keep_record=False, backend=backend)
    K64, V64, Q64 = (np.asarray(a, dtype=np.float64) for a in (K, V, Q))
    oracle = np.stack([
        linearized_attention_oracle(K64[:, : i + 1], V64[:, : i + 1], Q64[:, i], fm, normalize=normalize)
        for i in range(L)
    ])
    return float(np.abs(y - oracle).max())


def softmax_free_identity(K, V, Q, backend=None) -> float:
    """Identity phi, no normalisation, against ``V_i (K_i^T q_i)`` computed directly."""
    L = K.shape[1]
    y, _ = forward_sequence(K.T, V.T, Q.T, rule="sum", normalization="none", keep_record=False, backend=backend)
    K64, V64, Q64 = (np.asarray(a, dtype=np.float64) for a in (K, V, Q))
    direct = np.stack([V64[:, : i + 1] @ (K64[:, : i + 1].T @ Q64[:, i]) for i in range(L)])
    return float(np.abs(y - direct).max())


def equivalence_suite(
    *,
    seed: int = 0,
    cases: int = 100,
    lengths: list[int] | None = None,
    max_len: int = 64,
    max_dim: int = 32,
    dtype=np.float64,
    phis=GRAD_PHIS,
    backend=None,
) -> list[EquivResult]:
    """Recurrence-vs-quadratic for each phi plus the softmax-free identity.

    Without ``lengths``, ``cases`` random sequences (L <= max_len) per suite;
    with ``lengths``, ``cases`` sequences at each listed length.
    """
    tol = EQUIV_TOL[np.dtype(dtype).type]
    rng = Rng(seed)
    results = []
    suites = [("linear-attention", p) for p in phis] + [("softmax-free", "identity")]
    for suite, phi in suites:
        for length in lengths or [None]:
            g = rng.stream(f"equiv:{suite}:{phi}", length or 0)
            worst, shown = 0.0, length or 0
            for _ in range(cases):
                K, V, Q = _random_case(g, length, max_len, max_dim, dtype)
                if suite == "softmax-free":
                    diff = softmax_free_identity(K, V, Q, backend)
                else:
                    diff = recurrence_vs_quadratic(phi, K, V, Q, rng, backend=backend)
                worst = max(worst, diff)
                shown = max(shown, K.shape[1])
            results.append(EquivResult(suite, phi, shown, worst, tol))
    return results


def orthonormal_keys(d_dot: int, n: int, seed: int = 0) -> np.ndarray:
    """``n <= d_dot`` orthonormal columns from a seeded Gaussian draw."""
    if not 1 <= n <= d_dot:
        raise ValueError(f"need 1 <= n <= d_dot, got n={n}, d_dot={d_dot}")
    g = Rng(seed).stream("orthonormal-keys", d_dot)
    q, r = np.linalg.qr(g.standard_normal((d_dot, d_dot)))
    q = q * np.sign(np.diag(r))
    return q[:, :n]


def capacity_witness(d_dot: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """``d_dot + 1`` keys: a full orthonormal basis plus one key halfway between the first two.

    Values are one-hot, so every stored value has unit norm.
    """
    if d_dot < 2:
        raise ValueError("need d_dot >= 2 to interpolate two basis keys")
    basis = orthonormal_keys(d_dot, d_dot, seed)
    extra = (basis[:, 0] + basis[:, 1]) / np.sqrt(2.0)
    K = np.column_stack([basis, extra])
    return K, np.eye(d_dot + 1)


def sum_rule_retrieval_errors(K: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Write every column pair with the sum rule, read each key back unnormalised; error per key."""
    s = FastWeightState.empty(V.shape[0], K.shape[0])
    for j in range(K.shape[1]):
        s = sum_update_step(s, K[:, j], V[:, j])
    reads = np.stack([retrieve(s, K[:, j]) for j in range(K.shape[1])], axis=1)
    return np.abs(reads - V).max(axis=0)
