"""
ablation.py - generate test scenes under each binding mode and score them

Test protocol: entity 0 receives its own audio, every other slot receives mute
features, so exactly one entity should move with the sound. Generated videos carry no
ground-truth masks; regions are found by palette colour (`locate_entity`).

  evaluate_mode          one EvalReport for one binding mode
  evaluate_ground_truth  the same metrics on the synthetic ground truth (the ceiling)
  run_ablation           one report per mode, same seeds, input order
  check_directional_claims
                         pass/fail of the expected ordering between modes
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from maskbind import codec as codec_mod
from maskbind.backbone.model import DiffusionTransformer
from maskbind.backbone.state import Conditions
from maskbind.baselines.rectangles import scene_rectangles
from maskbind.codec import CodecConfig
from maskbind.errors import ConfigError
from maskbind.eval.metrics import (
    MIN_FRECHET_SAMPLES,
    EvalReport,
    FeatureExtractor,
    attribution_score,
    frechet_feature_distance,
    heldout_mask_iou,
    locate_entity,
    mask_iou,
    swap_error,
)
from maskbind.features import FeatureConfig, projection_matrix
from maskbind.layout import downsample_gt_mask
from maskbind.sampler import SAMPLE_MODES, SampleConfig, sample
from maskbind.synthgen.scene import SceneConfig, SceneSample
from maskbind.trainer import collate

logger = logging.getLogger(__name__)


@dataclass
class EvalConfig:
    n_samples: int = 16
    batch_size: int = 8
    heldout_t: float = 0.5
    feature_seed: int = 0
    modes: Tuple[str, ...] = SAMPLE_MODES

    def validate(self) -> "EvalConfig":
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1", "eval.n_samples")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "eval.batch_size")
        if not 0.0 <= self.heldout_t <= 1.0:
            raise ConfigError("heldout_t must be in [0, 1]", "eval.heldout_t")
        check_modes(self.modes)
        return self


@dataclass
class ClaimResult:
    name: str
    passed: Optional[bool]          # None when a required mode or value is missing
    detail: str


def check_modes(modes: Sequence[str]) -> Tuple[str, ...]:
    if not modes:
        raise ConfigError("at least one mode is required", "eval.modes")
    bad = [m for m in modes if m not in SAMPLE_MODES]
    if bad:
        raise ConfigError(f"unsupported modes {bad}; choose from {SAMPLE_MODES}", "eval.modes")
    if len(set(modes)) != len(modes):
        raise ConfigError(f"duplicate modes in {list(modes)}", "eval.modes")
    return tuple(modes)


def speaker_listener(conds: Conditions) -> Conditions:
    """Keep slot 0's audio, mute every other slot."""
    if conds.audio is None:
        return conds
    b, n = conds.audio.features.shape[:2]
    which = torch.ones(b, n, dtype=torch.bool, device=conds.audio.features.device)
    which[:, 0] = False
    return Conditions(conds.refs, conds.audio.muted(which), conds.text)


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    kept = [v for v in values if v is not None]
    return float(np.mean(kept)) if kept else None


def _ratio(driven: Optional[float], other: Optional[float]) -> Optional[float]:
    if driven is None or other is None:
        return None
    return float(driven / max(abs(other), 1e-3))


class _Scores:
    """Per-sample accumulator shared by the generated and ground-truth evaluations."""

    def __init__(self, n_entities: int):
        self.iou: List[List[float]] = [[] for _ in range(n_entities)]
        self.attr: List[List[Optional[float]]] = [[] for _ in range(n_entities)]
        self.ratio: List[Optional[float]] = []
        self.undefined = 0

    def add(self, video: np.ndarray, regions: Sequence[np.ndarray], driving: np.ndarray,
            ious: Sequence[float]) -> None:
        scores = []
        for e, region in enumerate(regions):
            score, defined = attribution_score(video, region, driving)
            self.undefined += int(not defined)
            self.attr[e].append(score)
            scores.append(score)
        for e, value in enumerate(ious):
            self.iou[e].append(value)
        self.ratio.append(_ratio(scores[0], scores[1]) if len(scores) > 1 else None)

    def report(self, mode: str, seeds: List[int], distance: Optional[float],
               heldout: Optional[List[Optional[float]]]) -> EvalReport:
        if self.undefined:
            logger.info("%s: %d attribution scores undefined (excluded)", mode, self.undefined)
        driven = self.attr[0]
        other = self.attr[1] if len(self.attr) > 1 else []
        return EvalReport(
            mode=mode,
            n_samples=len(seeds),
            seeds=seeds,
            mask_iou=[_mean(v) for v in self.iou],
            attribution=[_mean(v) for v in self.attr],
            swap_error=swap_error(driven, other) if other else None,
            distribution_distance=distance,
            attribution_ratio=self.ratio,
            heldout_mask_iou=list(heldout or []),
        )


def _distance(generated: List[np.ndarray], reference: List[np.ndarray],
              extractor: FeatureExtractor, mode: str) -> Optional[float]:
    if len(generated) < MIN_FRECHET_SAMPLES or len(reference) < MIN_FRECHET_SAMPLES:
        logger.warning("%s: %d videos is below the %d needed for the Frechet distance",
                       mode, len(generated), MIN_FRECHET_SAMPLES)
        return None
    return frechet_feature_distance(np.stack(generated), np.stack(reference), extractor)


def evaluate_ground_truth(samples: Sequence[SceneSample], codec: CodecConfig,
                          eval_cfg: Optional[EvalConfig] = None) -> EvalReport:
    """Metrics of the synthetic ground truth itself, scored against entity 0's audio."""
    eval_cfg = eval_cfg or EvalConfig()
    scores = _Scores(samples[0].n_entities)
    for s in samples:
        _, binary = downsample_gt_mask(torch.from_numpy(s.gt_masks), codec)
        ious = [mask_iou(binary[e].float(), binary[e]) for e in range(s.n_entities)]
        scores.add(s.frames, list(s.gt_masks), s.audio_signals[0], ious)
    return scores.report("ground_truth", [s.seed for s in samples], None, None)


def evaluate_mode(model: DiffusionTransformer, samples: Sequence[SceneSample], mode: str,
                  codec: CodecConfig, feat_cfg: FeatureConfig, sample_cfg: SampleConfig,
                  eval_cfg: Optional[EvalConfig] = None,
                  scene_cfg: Optional[SceneConfig] = None,
                  heldout: Optional[List[Optional[float]]] = None,
                  extractor: Optional[FeatureExtractor] = None) -> EvalReport:
    """Sample every scene under `mode` and score the decoded videos.

    Batch j is sampled with seed sample_cfg.seed + j, identical for every mode.
    """
    eval_cfg = (eval_cfg or EvalConfig()).validate()
    check_modes([mode])
    if not samples:
        raise ConfigError("no test scenes to evaluate", "eval.n_samples")
    param = next(model.parameters())
    proj = projection_matrix(feat_cfg)
    extractor = extractor or FeatureExtractor(eval_cfg.feature_seed)
    scores = _Scores(samples[0].n_entities)
    generated: List[np.ndarray] = []

    for j, start in enumerate(range(0, len(samples), eval_cfg.batch_size)):
        chunk = list(samples[start:start + eval_cfg.batch_size])
        batch = collate(chunk, codec, feat_cfg, scene_cfg, projection=proj)
        batch = batch.to(param.device, param.dtype)
        conds = speaker_listener(batch.conds)
        grid = tuple(batch.z0.shape[1:4])
        fixed = scene_rectangles(chunk, codec) if mode == "fixed_mask" else None
        cfg = replace(sample_cfg, mode=mode, seed=sample_cfg.seed + j)
        result = sample(model, conds, grid, cfg, fixed_masks=fixed)  # type: ignore[arg-type]
        videos = codec_mod.decode(result.latent.cpu(), codec).clamp(0.0, 1.0).numpy()
        final = result.predicted[-1].cpu()

        for b, s in enumerate(chunk):
            regions = [locate_entity(videos[b], spec.base_color) for spec in s.entities]
            ious = []
            for e, region in enumerate(regions):
                _, target = downsample_gt_mask(torch.from_numpy(region), codec)
                ious.append(mask_iou(final[b, e], target))
            scores.add(videos[b], regions, s.audio_signals[0], ious)
            generated.append(videos[b])

    reference = [s.frames for s in samples]
    distance = _distance(generated, reference, extractor, mode)
    report = scores.report(mode, [s.seed for s in samples], distance, heldout)
    logger.info("%s: attribution %s, swap error %s", mode, report.attribution, report.swap_error)
    return report


def run_ablation(model: DiffusionTransformer, samples: Sequence[SceneSample],
                 modes: Sequence[str], codec: CodecConfig, feat_cfg: FeatureConfig,
                 sample_cfg: SampleConfig, eval_cfg: Optional[EvalConfig] = None,
                 scene_cfg: Optional[SceneConfig] = None,
                 done: Optional[Mapping[str, EvalReport]] = None,
                 on_report: Optional[Callable[[EvalReport], None]] = None) -> List[EvalReport]:
    """One report per mode on the same scenes and seeds, in the order given.

    Modes already present in `done` are reused as is. `on_report` is called after each
    newly evaluated mode, so a caller can persist progress.
    """
    modes = check_modes(modes)
    eval_cfg = eval_cfg or EvalConfig()
    done = dict(done or {})
    missing = [m for m in modes if m not in done]
    if missing:
        heldout = heldout_mask_iou(model, samples, codec, feat_cfg, scene_cfg,
                                   t=eval_cfg.heldout_t, seed=sample_cfg.seed,
                                   batch_size=eval_cfg.batch_size)
        extractor = FeatureExtractor(eval_cfg.feature_seed)
    for m in missing:
        done[m] = evaluate_mode(model, samples, m, codec, feat_cfg, sample_cfg, eval_cfg,
                                scene_cfg, heldout, extractor)
        if on_report is not None:
            on_report(done[m])
    return [done[m] for m in modes]


def _less(a: Optional[float], b: Optional[float], strict: bool = True) -> Optional[bool]:
    if a is None or b is None:
        return None
    return a < b if strict else a <= b


def check_directional_claims(reports: Sequence[EvalReport]) -> List[ClaimResult]:
    """Expected ordering: predicted_mask beats global on attribution and swap error, beats
    id_embedding on swap error, and is no farther from the data than fixed_mask."""
    by_mode: Dict[str, EvalReport] = {r.mode: r for r in reports}
    ours = by_mode.get("predicted_mask")
    claims: List[ClaimResult] = []

    def claim(name: str, other_mode: str, value, strict: bool = True, higher: bool = False):
        other = by_mode.get(other_mode)
        if ours is None or other is None:
            claims.append(ClaimResult(name, None, f"needs predicted_mask and {other_mode}"))
            return
        a, b = value(ours), value(other)
        passed = _less(b, a, strict) if higher else _less(a, b, strict)
        claims.append(ClaimResult(name, passed, f"predicted_mask={a} {other_mode}={b}"))

    claim("attribution > global", "global", lambda r: r.driven_attribution, higher=True)
    claim("swap_error < global", "global", lambda r: r.swap_error)
    claim("swap_error < id_embedding", "id_embedding", lambda r: r.swap_error)
    claim("distance <= fixed_mask", "fixed_mask", lambda r: r.distribution_distance,
          strict=False)
    return claims


__all__ = [
    "EvalConfig", "ClaimResult", "check_modes", "speaker_listener", "evaluate_mode",
    "evaluate_ground_truth", "run_ablation", "check_directional_claims",
]
