"""Sparse conditional activation of transformer hidden dimensions.

Hidden-dimension slices (sub-dimensions) are routed per token: a shared
block is always active, a specialized block is chosen by top-k gating, and
the sparse output is rescaled and redistributed by a grouped fusion map.
Includes a dense baseline, byte-level training, and an activation-sparsity
analysis suite.
"""

from .autodiff import Tensor, no_grad
from .config import (
    AnalysisConfig,
    ConfigError,
    ModelConfig,
    RunConfig,
    TrainConfig,
    load_config,
    parse_config,
    render_config,
)
from .gradcheck import grad_check
from .layers import count_params
from .model import MoHDModel, VanillaModel, build_model
from .routing import (
    GateDecision,
    RouterParams,
    SubDimLayout,
    balance_loss,
    gather_sparse,
    scale_factor,
    score,
    select_mixed,
)
from .training import eval_ppl, total_loss, train

__all__ = [
    "Tensor",
    "no_grad",
    "grad_check",
    "ModelConfig",
    "TrainConfig",
    "AnalysisConfig",
    "RunConfig",
    "ConfigError",
    "load_config",
    "parse_config",
    "render_config",
    "SubDimLayout",
    "RouterParams",
    "GateDecision",
    "score",
    "select_mixed",
    "scale_factor",
    "gather_sparse",
    "balance_loss",
    "MoHDModel",
    "VanillaModel",
    "build_model",
    "count_params",
    "train",
    "eval_ppl",
    "total_loss",
]
