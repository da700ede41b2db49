"""
metrics.py - mask IoU, audio attribution, swap error and feature-space Frechet distance
---------------------------------------------------------------------------------------
These are synthetic analogues of lip-sync confidence and distribution-distance metrics:

  mask_iou             IoU of (pred > threshold) vs the token-grid target over valid frames
  attribution_score    Pearson correlation between the per-frame mean intensity inside an
                       entity's region and a driving audio signal
  frechet distance     between Gaussians fit to mean-pooled features of a small seeded,
                       randomly initialised conv net
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from einops import rearrange
from scipy import linalg
from torch import nn

from maskbind.backbone.model import DiffusionTransformer
from maskbind.codec import CodecConfig
from maskbind.errors import ConfigError, ShapeError
from maskbind.features import FeatureConfig
from maskbind.layout import MaskPredictionHook
from maskbind.schema import EVAL_REPORT_SCHEMA, EvalReportDict, validate_json
from maskbind.synthgen.scene import SceneConfig, SceneSample
from maskbind.trainer import collate, make_noised

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, torch.Tensor]

MIN_REGION_FRAMES = 4
MIN_FRECHET_SAMPLES = 16


def _np(x: ArrayLike) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------


def mask_iou(pred: ArrayLike, gt: ArrayLike, valid: Optional[ArrayLike] = None,
             threshold: float = 0.5) -> float:
    """IoU over (T', H', W'); `valid` is a (T',) frame selector. Empty union counts as 1."""
    pred_b = _np(pred) > threshold
    gt_b = _np(gt).astype(bool)
    if pred_b.shape != gt_b.shape:
        raise ShapeError(f"prediction {pred_b.shape} vs target {gt_b.shape}")
    if valid is not None:
        keep = _np(valid).astype(bool)
        pred_b, gt_b = pred_b[..., keep, :, :], gt_b[..., keep, :, :]
    union = np.logical_or(pred_b, gt_b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred_b, gt_b).sum() / union)


@torch.no_grad()
def heldout_mask_iou(model: DiffusionTransformer, samples: Sequence[SceneSample],
                     codec: CodecConfig, feat_cfg: FeatureConfig,
                     scene_cfg: Optional[SceneConfig] = None, t: float = 0.5, seed: int = 0,
                     batch_size: int = 8) -> List[Optional[float]]:
    """Per-entity mean token-grid IoU of the aggregate mask on noised ground-truth latents.

    Audio is not bound here, so the heads see no mask information from the targets.
    """
    if not samples:
        return []
    model.eval()
    param = next(model.parameters())
    gen = torch.Generator().manual_seed(seed)
    n = samples[0].n_entities
    per_entity: List[List[float]] = [[] for _ in range(n)]
    for start in range(0, len(samples), batch_size):
        batch = collate(samples[start:start + batch_size], codec, feat_cfg, scene_cfg)
        batch = batch.to(param.device, param.dtype)
        eps = torch.randn(batch.z0.shape, generator=gen).to(param.device, param.dtype)
        tt = torch.full((batch.batch_size,), t, dtype=param.dtype, device=param.device)
        noised = make_noised(batch.z0, eps, tt)
        hook = MaskPredictionHook(model.mask_heads)
        model(noised.z_t, tt, batch.conds.refs, batch.conds.text, [hook])
        agg = hook.aggregate()
        for b in range(batch.batch_size):
            for e in range(n):
                per_entity[e].append(mask_iou(agg[b, e], batch.gt_binary[b, e],
                                              batch.latent_valid[b]))
    return [float(np.mean(v)) if v else None for v in per_entity]


# ---------------------------------------------------------------------------
# Attribution
# ---------------------------------------------------------------------------


def locate_entity(video: ArrayLike, color: Sequence[float], min_cos: float = 0.97,
                  min_brightness: float = 0.15) -> np.ndarray:
    """(T, H, W, 3) video -> (T, H, W) pixels whose colour direction matches `color`.

    Palette colours are distinct within a scene and brightness only scales a colour, so
    the direction of an entity's pixels stays fixed while it pulses.
    """
    v = _np(video).astype(np.float64)
    if v.ndim != 4 or v.shape[-1] != 3:
        raise ShapeError(f"expected (T, H, W, 3) video, got {v.shape}")
    target = np.asarray(color, dtype=np.float64)
    target = target / np.linalg.norm(target)
    norm = np.linalg.norm(v, axis=-1)
    cos = (v @ target) / np.maximum(norm, 1e-12)
    return (v.max(axis=-1) > min_brightness) & (cos > min_cos)


def attribution_score(video: ArrayLike, region: ArrayLike, audio: ArrayLike
                      ) -> Tuple[Optional[float], bool]:
    """Pearson correlation of in-region mean intensity vs audio. Returns (score, defined)."""
    v = _np(video).astype(np.float64)
    r = _np(region).astype(bool)
    a = _np(audio).astype(np.float64)
    if r.shape != v.shape[:-1] or a.shape[0] != v.shape[0]:
        raise ShapeError(f"video {v.shape}, region {r.shape} and audio {a.shape} disagree")
    frames = np.flatnonzero(r.reshape(r.shape[0], -1).any(axis=1))
    if frames.size < MIN_REGION_FRAMES:
        return None, False
    intensity = np.array([v[t][r[t]].mean() for t in frames])
    x = intensity - intensity.mean()
    y = a[frames] - a[frames].mean()
    denom = np.sqrt((x * x).sum() * (y * y).sum())
    if denom < 1e-12:
        return None, False
    return float(np.clip((x * y).sum() / denom, -1.0, 1.0)), True


def swap_error(driven: Sequence[Optional[float]], other: Sequence[Optional[float]]
               ) -> Optional[float]:
    """Fraction of samples where the non-driven entity's score beats the driven one's."""
    pairs = [(d, o) for d, o in zip(driven, other) if d is not None and o is not None]
    if not pairs:
        return None
    return float(np.mean([o > d for d, o in pairs]))


# ---------------------------------------------------------------------------
# Frechet distance
# ---------------------------------------------------------------------------


class FeatureExtractor(nn.Module):
    """Fixed, seeded two-layer conv net; per-video features are mean-pooled over space+time."""

    def __init__(self, seed: int = 0, width: int = 16):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = nn.Sequential(
                nn.Conv2d(3, width, kernel_size=4, stride=2, padding=1),
                nn.ReLU(),
                nn.Conv2d(width, 2 * width, kernel_size=4, stride=2, padding=1),
                nn.ReLU(),
            )
        self.requires_grad_(False)

    @property
    def dim(self) -> int:
        return int(self.net[2].out_channels)

    @torch.no_grad()
    def features(self, videos: ArrayLike) -> np.ndarray:
        """(n, T, H, W, 3) -> (n, dim) float64."""
        x = torch.as_tensor(_np(videos), dtype=torch.float32)
        if x.ndim != 5:
            raise ShapeError(f"expected (n, T, H, W, 3) videos, got {tuple(x.shape)}")
        n, frames = x.shape[:2]
        out = self.net(rearrange(x, "n t h w c -> (n t) c h w"))
        pooled = rearrange(out.mean(dim=(-2, -1)), "(n t) d -> n t d", n=n, t=frames)
        return pooled.mean(dim=1).double().numpy()


def _is_singular(sigma: np.ndarray) -> bool:
    return bool(np.linalg.eigvalsh((sigma + sigma.T) / 2).min() <= 1e-10)


def frechet_from_moments(mu1: np.ndarray, sigma1: np.ndarray, mu2: np.ndarray,
                         sigma2: np.ndarray, ridge: float = 1e-6) -> float:
    """||mu1 - mu2||^2 + tr(S1 + S2 - 2 sqrt(S1 S2)); singular covariances get a ridge."""
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    sigma1, sigma2 = np.atleast_2d(sigma1), np.atleast_2d(sigma2)
    if mu1.shape != mu2.shape or sigma1.shape != sigma2.shape:
        raise ShapeError("moment shapes differ")
    if _is_singular(sigma1) or _is_singular(sigma2):
        logger.info("singular covariance; adding a %.0e ridge", ridge)
        eye = np.eye(sigma1.shape[0])
        sigma1, sigma2 = sigma1 + ridge * eye, sigma2 + ridge * eye

    covmean = linalg.sqrtm(sigma1 @ sigma2)
    if not np.isfinite(covmean).all():
        eye = np.eye(sigma1.shape[0])
        covmean = linalg.sqrtm((sigma1 + ridge * eye) @ (sigma2 + ridge * eye))
    covmean = np.real(covmean)

    diff = mu1 - mu2
    value = diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * np.trace(covmean)
    return float(max(value, 0.0))


def frechet_feature_distance(set_a: ArrayLike, set_b: ArrayLike,
                             extractor: Optional[FeatureExtractor] = None,
                             seed: int = 0) -> float:
    """Frechet distance between two video sets, each (n >= 16, T, H, W, 3)."""
    extractor = extractor or FeatureExtractor(seed)
    if len(set_a) < MIN_FRECHET_SAMPLES or len(set_b) < MIN_FRECHET_SAMPLES:
        raise ConfigError(f"need >= {MIN_FRECHET_SAMPLES} videos per set, got "
                          f"{len(set_a)} and {len(set_b)}", "eval.n_samples")
    fa, fb = extractor.features(set_a), extractor.features(set_b)
    return frechet_from_moments(fa.mean(0), np.cov(fa, rowvar=False),
                                fb.mean(0), np.cov(fb, rowvar=False))


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    mode: str
    n_samples: int
    seeds: List[int]
    mask_iou: List[Optional[float]]
    attribution: List[Optional[float]]
    swap_error: Optional[float]
    distribution_distance: Optional[float]
    attribution_ratio: List[Optional[float]] = field(default_factory=list)
    heldout_mask_iou: List[Optional[float]] = field(default_factory=list)

    def to_dict(self) -> EvalReportDict:
        data: EvalReportDict = asdict(self)  # type: ignore[assignment]
        validate_json(data, EVAL_REPORT_SCHEMA, f"eval report ({self.mode})")
        return data

    @classmethod
    def from_dict(cls, data: EvalReportDict) -> "EvalReport":
        validate_json(data, EVAL_REPORT_SCHEMA, f"eval report ({data.get('mode')})")
        return cls(**data)

    @property
    def driven_attribution(self) -> Optional[float]:
        return self.attribution[0] if self.attribution else None

    @property
    def other_attribution(self) -> Optional[float]:
        return self.attribution[1] if len(self.attribution) > 1 else None


__all__ = [
    "mask_iou", "heldout_mask_iou", "locate_entity", "attribution_score", "swap_error",
    "FeatureExtractor", "frechet_from_moments", "frechet_feature_distance", "EvalReport",
]
