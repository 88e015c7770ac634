"""Adam training loop with the evaluation-based stopping rule, and the capacity sweep."""
from __future__ import annotations

import dataclasses
import math
import os
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .features import make_feature_map, redraw_features
from .retrieval import RetrievalModel, RetrievalTaskConfig, batch_loss, build_model, evaluate, sample_batch
from .rng import Rng
from .tensor import Tape, backward

WORKERS_ENV = "FASTWEIGHTS_WORKERS"

STATUSES = ("converged", "stalled", "capped", "failed")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_threshold: float = 1e-3
    patience: int = 1000
    eval_every: int = 50
    max_steps: int = 50_000

    def __post_init__(self):
        if self.patience <= 0 or self.eval_every <= 0 or self.batch_size <= 0:
            raise ValueError("patience, eval_every and batch_size must be positive")
        if self.loss_threshold <= 0:
            raise ValueError("loss_threshold must be positive")
        if self.max_steps < 0:
            raise ValueError("max_steps must be non-negative")


# -- Adam -----------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params) -> AdamState:
        return cls(
            {k: np.zeros_like(_data(p)) for k, p in params.items()},
            {k: np.zeros_like(_data(p)) for k, p in params.items()},
        )


def _data(p):
    return p.data if hasattr(p, "data") else p


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    for k, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k!r}")
    state.t += 1
    bc1 = 1.0 - config.beta1 ** state.t
    bc2 = 1.0 - config.beta2 ** state.t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(_data(p))
        m, v = state.m[k], state.v[k]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        _data(p)[...] -= config.lr * (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)


# -- training loop ----------------------------------------------------------------

@dataclass
class RunRecord:
    evals: list[tuple[int, float, float, float]] = field(default_factory=list)
    status: str = "capped"
    steps_run: int = 0
    best_eval_loss: float = math.inf
    best_accuracy: float = 0.0
    wall_seconds: float = 0.0
    message: str = ""
    config: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def train_until(
    model: RetrievalModel,
    task: RetrievalTaskConfig,
    config: TrainConfig,
    rng: Rng,
) -> RunRecord:
    """Train until eval loss < threshold, no new best eval loss for ``patience`` steps, or the step cap."""
    t0 = time.perf_counter()
    params = model.params
    state = AdamState.zeros(params)
    record = RunRecord(config={"train": dataclasses.asdict(config), "task": dataclasses.asdict(task),
                               "master_seed": rng.master_seed})
    fm = model.feature_map
    train_fm = None
    if fm is not None and fm.kind == "favor":
        train_fm = dataclasses.replace(fm, redraw_policy="per-minibatch")

    best_step = 0
    train_loss = math.nan
    step = 0
    try:
        for step in range(0, config.max_steps + 1):
            if step > 0:
                batch = sample_batch(task, rng.stream("train-batch", step), config.batch_size)
                step_fm = redraw_features(train_fm, rng, step) if train_fm is not None else None
                with Tape() as tape:
                    loss = batch_loss(model, batch, step_fm)
                backward(tape, loss)
                adam_step(params, {k: p.grad for k, p in params.items()}, state, config)
                train_loss = loss.item()
            record.steps_run = step
            if step % config.eval_every:
                continue
            eval_loss, acc = evaluate(model, task, rng)
            record.evals.append((step, train_loss, eval_loss, acc))
            if not math.isfinite(eval_loss):
                raise FloatingPointError("evaluation loss is not finite")
            if eval_loss < record.best_eval_loss:
                record.best_eval_loss, record.best_accuracy = eval_loss, acc
                best_step = step
            if eval_loss < config.loss_threshold:
                record.status = "converged"
                break
            if step - best_step >= config.patience:
                record.status = "stalled"
                break
        else:
            record.status = "capped"
    except FloatingPointError as exc:
        record.status = "failed"
        record.message = str(exc)
    record.wall_seconds = time.perf_counter() - t0
    return record


# -- variants and sweeps ------------------------------------------------------------

@dataclass(frozen=True)
class Variant:
    """A named model configuration for sweeps (``identity``, ``elu1``, ``favor<m>``, ``dpfp<nu>``, ``softmax``)."""

    name: str
    kind: str = "fast"
    phi: str = "identity"
    nu: int = 1
    m: int = 0
    rule: str = "sum"
    normalization: str = "none"

    def d_dot(self, d_key: int) -> int:
        if self.kind == "softmax":
            return 0
        if self.phi == "favor":
            return 2 * self.m
        if self.phi == "dpfp":
            return 2 * d_key * self.nu
        return d_key

    @property
    def nu_or_m(self) -> int:
        return {"dpfp": self.nu, "favor": self.m}.get(self.phi, 0) if self.kind == "fast" else 0

    def check(self, d_key: int) -> None:
        """Raise ValueError if this variant cannot be built at ``d_key``."""
        if self.kind == "fast":
            make_feature_map(self.phi, d_key, nu=self.nu, m=self.m, rng=Rng(0))

    def build(self, task: RetrievalTaskConfig, rng: Rng, dtype=np.float64, backend=None) -> RetrievalModel:
        return build_model(
            task, kind=self.kind, phi=self.phi, nu=self.nu, m=self.m, rule=self.rule,
            normalization=self.normalization, rng=rng, dtype=dtype, backend=backend,
        )


def default_normalization(rule: str, phi: str) -> str:
    """Sum normalisation for the delta rule; the plain sum rule reads unnormalised."""
    return "sum" if rule == "delta" else "none"


def parse_variant(name: str, rule: str = "sum", normalization: str | None = None) -> Variant:
    name = name.strip()
    if name == "softmax":
        return Variant("softmax", kind="softmax", phi="none", rule="none", normalization="none")
    if name in ("identity", "elu1", "linear"):
        phi, nu, m = ("elu1" if name == "linear" else name), 1, 0
    elif (match := re.fullmatch(r"dpfp(\d+)", name)):
        phi, nu, m = "dpfp", int(match.group(1)), 0
    elif (match := re.fullmatch(r"favor(\d+)", name)):
        phi, nu, m = "favor", 1, int(match.group(1))
    else:
        raise ValueError(f"unknown variant {name!r}")
    norm = normalization or default_normalization(rule, phi)
    return Variant(name, phi=phi, nu=nu, m=m, rule=rule, normalization=norm)


SWEEP_COLUMNS = (
    "variant", "rule", "phi", "nu_or_m", "d_key", "d_dot", "S", "L", "steps_run",
    "best_eval_loss", "accuracy", "status", "seed", "wall_seconds",
)


def cell_rng(seed: int, variant: Variant, S: int) -> Rng:
    return Rng(seed).child(f"cell:{variant.name}:{variant.rule}:{variant.normalization}", S)


def run_cell(variant: Variant, task: RetrievalTaskConfig, config: TrainConfig, seed: int,
             dtype=np.float64, backend=None) -> dict:
    """Train one (variant, S) cell and return its CSV row."""
    t0 = time.perf_counter()
    rng = cell_rng(seed, variant, task.S)
    try:
        model = variant.build(task, rng, dtype=dtype, backend=backend)
        rec = train_until(model, task, config, rng)
    except Exception as exc:  # a broken cell must not stop the sweep
        rec = RunRecord(status="failed", message=f"{type(exc).__name__}: {exc}")
    return {
        "variant": variant.name,
        "rule": variant.rule,
        "phi": variant.phi,
        "nu_or_m": variant.nu_or_m,
        "d_key": task.d_key,
        "d_dot": variant.d_dot(task.d_key),
        "S": task.S,
        "L": task.L,
        "steps_run": rec.steps_run,
        "best_eval_loss": rec.best_eval_loss,
        "accuracy": rec.best_accuracy,
        "status": rec.status,
        "seed": seed,
        "wall_seconds": round(time.perf_counter() - t0, 3),
    }


def _run_cell_args(args):
    return run_cell(*args)


def worker_count(workers: int | None = None) -> int:
    if workers is not None:
        return max(1, workers)
    env = os.environ.get(WORKERS_ENV)
    return max(1, int(env)) if env else 1


def capacity_sweep(
    variants: list[Variant],
    S_list: list[int],
    config: TrainConfig,
    *,
    setting: int = 1,
    d_key: int = 16,
    d_emb: int = 32,
    seed: int = 0,
    workers: int | None = None,
    dtype=np.float64,
    backend=None,
) -> list[dict]:
    """One training run per (variant, S); rows come back in grid order regardless of worker count."""
    if not variants or not S_list:
        raise ValueError("need at least one variant and one S")
    jobs = [
        (v, RetrievalTaskConfig(S, setting, d_emb, d_key), config, seed, dtype, backend)
        for v in variants for S in S_list
    ]
    n = worker_count(workers)
    if n == 1:
        return [run_cell(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(_run_cell_args, jobs))
