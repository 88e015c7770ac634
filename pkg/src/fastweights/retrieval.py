"""Synthetic associative retrieval tasks and the end-to-end retrieval model.

A sequence of L (key symbol, value symbol) pairs is written into memory,
then one key symbol is presented as a query and the model must return the
one-hot vector of the value bound to it. Setting 1 samples pairs without
replacement (L = S); setting 2 samples with replacement (L = 2S) and the
target is the most recent binding.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import FeatureMap, make_feature_map
from .layer import fast_weight
from .rng import Rng
from .tensor import Tensor, concat, matmul, sigmoid, softmax, take, tsum

N_EVAL_SEQUENCES = 20


@dataclass(frozen=True)
class RetrievalTaskConfig:
    S: int
    setting: int = 1
    d_emb: int = 32
    d_key: int = 16

    def __post_init__(self):
        if self.S < 1:
            raise ValueError("S must be >= 1")
        if self.setting not in (1, 2):
            raise ValueError(f"setting must be 1 or 2, got {self.setting}")

    @property
    def L(self) -> int:
        return self.S if self.setting == 1 else 2 * self.S


@dataclass
class EpisodeBatch:
    keys: np.ndarray  # (B, L) key symbols
    values: np.ndarray  # (B, L) value symbols
    queries: np.ndarray  # (B, Q) key symbols
    targets: np.ndarray  # (B, Q) value symbols

    def __len__(self) -> int:
        return len(self.keys)


def gen_setting1(S: int, rng: np.random.Generator) -> EpisodeBatch:
    keys = rng.permutation(S)
    values = rng.permutation(S)
    j = rng.integers(S)
    return EpisodeBatch(keys[None], values[None], keys[None, [j]], values[None, [j]])


def latest_binding(keys: np.ndarray, values: np.ndarray, query: int) -> int:
    idx = np.flatnonzero(keys == query)
    if idx.size == 0:
        raise KeyError(f"key {query} does not occur in the sequence")
    return int(values[idx[-1]])


def gen_setting2(S: int, rng: np.random.Generator) -> EpisodeBatch:
    keys = rng.integers(0, S, size=2 * S)
    values = rng.integers(0, S, size=2 * S)
    query = int(rng.choice(np.unique(keys)))
    target = latest_binding(keys, values, query)
    return EpisodeBatch(keys[None], values[None], np.array([[query]]), np.array([[target]]))


def generate(config: RetrievalTaskConfig, rng: np.random.Generator) -> EpisodeBatch:
    gen = gen_setting1 if config.setting == 1 else gen_setting2
    return gen(config.S, rng)


def sample_batch(config: RetrievalTaskConfig, rng: np.random.Generator, batch_size: int) -> EpisodeBatch:
    eps = [generate(config, rng) for _ in range(batch_size)]
    return EpisodeBatch(
        np.concatenate([e.keys for e in eps]),
        np.concatenate([e.values for e in eps]),
        np.concatenate([e.queries for e in eps]),
        np.concatenate([e.targets for e in eps]),
    )


def all_queries(keys: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Every distinct key in a sequence with its most recent value."""
    queries = np.unique(keys)
    return queries, np.array([latest_binding(keys, values, q) for q in queries])


# -- model --------------------------------------------------------------------

VARIANT_KINDS = ("fast", "softmax")


@dataclass
class RetrievalModel:
    """Embedding + key/query projections in front of a fast-weight memory or softmax attention."""

    task: RetrievalTaskConfig
    kind: str
    params: dict[str, Tensor]
    feature_map: FeatureMap | None = None
    rule: str = "sum"
    normalization: str = "none"
    backend: str | None = field(default=None, repr=False)

    def parameters(self) -> dict[str, Tensor]:
        return self.params


def build_model(
    task: RetrievalTaskConfig,
    *,
    kind: str = "fast",
    phi: str = "dpfp",
    nu: int = 1,
    m: int = 0,
    rule: str = "sum",
    normalization: str = "none",
    rng: Rng | None = None,
    dtype=np.float64,
    backend: str | None = None,
) -> RetrievalModel:
    if kind not in VARIANT_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    rng = rng or Rng(0)
    g = rng.stream("init")
    S, d_emb, d_key = task.S, task.d_emb, task.d_key
    d_in = d_emb + S

    def normal(shape, fan_in):
        return Tensor(g.standard_normal(shape) / np.sqrt(fan_in), requires_grad=True, dtype=dtype)

    params = {
        "embedding": normal((S, d_emb), d_emb),
        "W_K": normal((d_key, d_in), d_in),
        "W_Q": normal((d_key, d_emb), d_emb),
    }
    fm = None
    if kind == "fast":
        if rule == "delta":
            params["W_beta"] = Tensor(np.zeros((1, d_in)), requires_grad=True, dtype=dtype)
        fm = make_feature_map(
            phi, d_key, nu=nu, m=m, sum_normalize=normalization == "sum", rng=rng,
            redraw_policy="fixed",
        )
    return RetrievalModel(task, kind, params, fm, rule, normalization, backend)


def model_forward(model: RetrievalModel, episode: EpisodeBatch, feature_map: FeatureMap | None = None) -> Tensor:
    """Write every pair of each sequence, then read with each query. Returns (B, Q, S)."""
    p = model.params
    S = model.task.S
    dtype = p["W_K"].dtype
    one_hot = np.eye(S, dtype=dtype)[episode.values]
    x = concat([take(p["embedding"], episode.keys), Tensor(one_hot)], axis=-1)
    k = matmul(x, p["W_K"].T)
    q = matmul(take(p["embedding"], episode.queries), p["W_Q"].T)

    if model.kind == "softmax":
        logits = matmul(q, k.T)  # (B, Q, L)
        return matmul(softmax(logits, axis=-1), Tensor(one_hot))

    fm = feature_map or model.feature_map
    phik, phiq = fm(k), fm(q)
    beta = None
    if model.rule == "delta":
        beta = sigmoid(matmul(x, p["W_beta"].T)).reshape(episode.keys.shape)
    return fast_weight(
        phik, Tensor(one_hot), phiq, beta, rule=model.rule,
        normalization=model.normalization, final=True, backend=model.backend,
    )


def retrieval_loss(v_hat, v_star) -> Tensor:
    """Sum of squared errors / 2 over the value dimension; mean over any leading axes."""
    v_hat = v_hat if isinstance(v_hat, Tensor) else Tensor(v_hat)
    v_star = np.asarray(v_star, dtype=v_hat.dtype)
    if v_hat.shape[-1] != v_star.shape[-1]:
        raise ValueError(f"dimension mismatch: {v_hat.shape} vs {v_star.shape}")
    diff = v_hat - Tensor(v_star)
    per_item = tsum(diff * diff, axis=-1) * 0.5
    return per_item.mean() if per_item.ndim else per_item


def batch_loss(model: RetrievalModel, episode: EpisodeBatch, feature_map: FeatureMap | None = None) -> Tensor:
    v_hat = model_forward(model, episode, feature_map)
    targets = np.eye(model.task.S, dtype=v_hat.dtype)[episode.targets]
    return retrieval_loss(v_hat, targets)


def evaluate(model: RetrievalModel, config: RetrievalTaskConfig, rng: Rng) -> tuple[float, float]:
    """Mean loss and argmax accuracy over 20 fixed sequences, querying every key that occurs."""
    total, correct, count = 0.0, 0, 0
    eye = np.eye(config.S)
    for j in range(N_EVAL_SEQUENCES):
        ep = generate(config, rng.stream("eval", j))
        queries, targets = all_queries(ep.keys[0], ep.values[0])
        batch = EpisodeBatch(ep.keys, ep.values, queries[None], targets[None])
        v_hat = model_forward(model, batch).data[0]
        err = 0.5 * ((v_hat - eye[targets]) ** 2).sum(axis=-1)
        total += float(err.sum())
        correct += int((v_hat.argmax(axis=-1) == targets).sum())
        count += len(queries)
    return total / count, correct / count
