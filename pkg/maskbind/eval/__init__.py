"""Mask, attribution and distribution metrics plus the binding-mode ablation harness."""

from maskbind.eval.ablation import (
    ClaimResult,
    EvalConfig,
    check_directional_claims,
    check_modes,
    evaluate_ground_truth,
    evaluate_mode,
    run_ablation,
    speaker_listener,
)
from maskbind.eval.metrics import (
    EvalReport,
    FeatureExtractor,
    attribution_score,
    frechet_feature_distance,
    frechet_from_moments,
    heldout_mask_iou,
    locate_entity,
    mask_iou,
    swap_error,
)

__all__ = [
    "EvalConfig", "ClaimResult", "EvalReport", "FeatureExtractor", "mask_iou",
    "heldout_mask_iou", "locate_entity", "attribution_score", "swap_error",
    "frechet_from_moments", "frechet_feature_distance", "evaluate_mode",
    "evaluate_ground_truth", "run_ablation", "check_directional_claims", "check_modes",
    "speaker_listener",
]
