"""Linear attention with elementwise, randomized and learnable (SARA) feature maps."""

from .attention import (
    AttentionLayerParams,
    AttentionOutput,
    DegenerateRow,
    NotADistribution,
    exact_softmax_attention,
    kernel_attention_linear,
    kernel_attention_quadratic,
    score_stats,
)
from .feature_maps import FeatureMapSpec, SaraParams, apply_feature_map, sara_from_theorem
from .numerics import SeededRng, gaussian_matrix, normalize_rows_to_radius

__all__ = [
    "AttentionLayerParams",
    "AttentionOutput",
    "DegenerateRow",
    "FeatureMapSpec",
    "NotADistribution",
    "SaraParams",
    "SeededRng",
    "apply_feature_map",
    "exact_softmax_attention",
    "gaussian_matrix",
    "kernel_attention_linear",
    "kernel_attention_quadratic",
    "normalize_rows_to_radius",
    "sara_from_theorem",
    "score_stats",
]
