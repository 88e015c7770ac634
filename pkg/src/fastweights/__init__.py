"""Fast-weight memories: linear attention as outer-product storage, with sum and delta updates."""

__version__ = "0.1.0"

from .features import EPS_GUARD, FeatureMap, make_feature_map, redraw_features, sum_normalize  # noqa: E402
from .kernels import default_backend_name, get_backend  # noqa: E402
from .layer import backward_sequence, fast_weight, forward_sequence, live_matrix_bound  # noqa: E402
from .memory import (  # noqa: E402
    FastWeightState,
    UpdateRuleConfig,
    attention_readout,
    delta_readout,
    delta_rule_step,
    linearized_attention_oracle,
    retrieve,
    softmax_attention_oracle,
    sum_update_step,
)
from .retrieval import RetrievalTaskConfig, build_model, evaluate, generate, retrieval_loss, sample_batch  # noqa: E402
from .rng import Rng  # noqa: E402
from .tensor import Tape, Tensor, backward, finite_diff_check  # noqa: E402
from .train import TrainConfig, capacity_sweep, parse_variant, run_cell, train_until  # noqa: E402

__all__ = [
    "EPS_GUARD", "FastWeightState", "FeatureMap", "Rng", "RetrievalTaskConfig", "Tape", "Tensor",
    "TrainConfig", "UpdateRuleConfig", "attention_readout", "backward", "backward_sequence",
    "build_model", "capacity_sweep", "default_backend_name", "delta_readout", "delta_rule_step",
    "evaluate", "fast_weight", "finite_diff_check", "forward_sequence", "generate", "get_backend",
    "linearized_attention_oracle", "live_matrix_bound", "make_feature_map", "parse_variant",
    "redraw_features", "retrieval_loss", "retrieve", "run_cell", "sample_batch",
    "softmax_attention_oracle", "sum_normalize", "sum_update_step", "train_until",
]
