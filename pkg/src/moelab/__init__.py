"""Desk-scale laboratory for token-adaptive mixture-of-experts routing
with null experts: a tiny tensor/autodiff engine, the routing mechanism
and its load-balancing losses, analysis metrics, and a CLI training
harness for synthetic tasks."""

from .autodiff import NEG_INF, Tape, Tensor, backward, softmax, topk_mask
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    MoeLabError,
    NumericError,
    ParameterError,
    RunError,
)
from .layer import (
    ExpertParams,
    FfnExpert,
    LoraDeltaExpert,
    MoeLayer,
    expand_router,
    layer_forward,
    layer_forward_full,
    make_moe_block,
)
from .losses import (
    AnnealSchedule,
    LoadStats,
    alpha_at,
    collect_load_stats,
    load_loss_null,
    load_loss_vanilla,
)
from .metrics import (
    FlopsAccount,
    RoutingReport,
    average_load,
    bypass_rate,
    flops_reduction,
    sharpness_counts,
)
from .routing import (
    Normalization,
    NullKind,
    RouterConfig,
    RouterVariant,
    RoutingDecision,
    route_batch,
    route_token,
    route_token_top_p,
)

__version__ = "0.1.0"

__all__ = [
    "NEG_INF",
    "Tape",
    "Tensor",
    "backward",
    "softmax",
    "topk_mask",
    "MoeLabError",
    "DimensionError",
    "ParameterError",
    "ContractError",
    "NumericError",
    "ConfigError",
    "RunError",
    "FormatError",
    "RouterConfig",
    "RoutingDecision",
    "NullKind",
    "Normalization",
    "RouterVariant",
    "route_token",
    "route_token_top_p",
    "route_batch",
    "ExpertParams",
    "FfnExpert",
    "LoraDeltaExpert",
    "MoeLayer",
    "layer_forward",
    "layer_forward_full",
    "expand_router",
    "make_moe_block",
    "LoadStats",
    "AnnealSchedule",
    "collect_load_stats",
    "load_loss_vanilla",
    "load_loss_null",
    "alpha_at",
    "FlopsAccount",
    "RoutingReport",
    "average_load",
    "flops_reduction",
    "sharpness_counts",
    "bypass_rate",
    "__version__",
]
