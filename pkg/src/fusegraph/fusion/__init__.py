"""Graph rewrites that collapse attention and layer-norm subgraphs into fused nodes."""

from .params import AttentionParams, RelPosParams
from .passes import (
    DEFAULT_RULES,
    RULES,
    FusionReport,
    PipelineReport,
    apply_rule,
    fuse_attention,
    fuse_layer_norm,
    fuse_relpos_attention,
    fusion_pipeline,
)

__all__ = [
    "AttentionParams",
    "DEFAULT_RULES",
    "FusionReport",
    "PipelineReport",
    "RULES",
    "RelPosParams",
    "apply_rule",
    "fuse_attention",
    "fuse_layer_norm",
    "fuse_relpos_attention",
    "fusion_pipeline",
]
