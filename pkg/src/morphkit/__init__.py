"""morphkit: zero-shot diffusion image morphing and morphing-oriented metrics.

The pipeline inverts two images with a deterministic DDIM schedule while
caching multi-scale denoiser features, spherically interpolates the terminal
latents, and denoises each morph frame with blended cached features injected
as residuals and an anchor-augmented two-branch cross-attention. The metric
suite scores sequences for global trend consistency and local smoothness and
also provides Frechet, path-distance, and perceptual-path-length measures
over pluggable providers.
"""

__version__ = "0.1.0"

from .core_math import InterpWeights, clamp01, interp_weights, slerp_scalar_sim, slerp_vec
from .engine import MorphConfig, MorphEngine, MorphSequence, aci_residuals, ddim_transport
from .feature_cache import BlendedCache, FeatureCache, Stage, StageId, blend_cache, load_cache
from .metrics import (
    MetricReport,
    SimilarityMatrix,
    evaluate_sequence,
    fid_global,
    fid_local,
    frechet_distance,
    gcs,
    glcs,
    lcs,
    lpips_path,
    ppl,
)
from .prompting import (
    PromptTriplet,
    VlmClient,
    build_vlm_request,
    parse_vlm_response,
    sap_attention,
)
from .schedule import NoiseSchedule, build_schedule, idm_map

__all__ = [
    "BlendedCache",
    "FeatureCache",
    "InterpWeights",
    "MetricReport",
    "MorphConfig",
    "MorphEngine",
    "MorphSequence",
    "NoiseSchedule",
    "PromptTriplet",
    "SimilarityMatrix",
    "Stage",
    "StageId",
    "VlmClient",
    "aci_residuals",
    "blend_cache",
    "build_schedule",
    "build_vlm_request",
    "clamp01",
    "ddim_transport",
    "evaluate_sequence",
    "fid_global",
    "fid_local",
    "frechet_distance",
    "gcs",
    "glcs",
    "idm_map",
    "interp_weights",
    "lcs",
    "load_cache",
    "lpips_path",
    "parse_vlm_response",
    "ppl",
    "sap_attention",
    "slerp_scalar_sim",
    "slerp_vec",
]
