"""
trainer.py - flow-matching + focal-loss training
------------------------------------------------
One step:
  t ~ U[0, 1] per item, eps ~ N(0, I), z_t = (1 - t) z_0 + t eps, target u = eps - z_0
  with probability p_drop the item's text AND audio are dropped together (refs kept)
  forward with the mask heads active and audio bound through ground-truth soft masks
  total = lambda_fm * fm + lambda_focal * focal

Artifacts (when an output directory is given):
  metrics.jsonl        one validated JSON object per step
  checkpoint.itah      tensor-container checkpoint (every checkpoint_every steps and at the end)
  trainer_state.pt     optimizer + RNG state, used to resume
  manifest.json        config hash, code version, seeds
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from maskbind import codec as codec_mod
from maskbind.audiocond import AudioBindingHook
from maskbind.backbone.model import DiffusionTransformer, load_checkpoint, save_checkpoint
from maskbind.backbone.state import AudioConditions, Conditions, ReferenceSet
from maskbind.codec import CodecConfig
from maskbind.errors import ConfigError, NumericError, ShapeError
from maskbind.features import (
    FeatureConfig,
    TextTokens,
    extract_audio_features,
    mute_track,
    pad_token_batch,
    projection_matrix,
    rephrase_and_merge,
)
from maskbind.io.manifest import manifest_matches, write_manifest
from maskbind.layout import MaskPredictionHook, downsample_gt_mask, latent_frame_valid
from maskbind.schema import METRICS_LINE_SCHEMA, MetricsLine, validate_json
from maskbind.synthgen import captions
from maskbind.synthgen.dataset import SceneDataset
from maskbind.synthgen.scene import SceneConfig, SceneSample, render_reference

logger = logging.getLogger(__name__)

TRAIN_AUDIO_MODES = ("ground_truth", "id_embedding")
FOCAL_TARGETS = ("aggregate", "heads", "both")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-4
    weight_decay: float = 0.0
    seed: int = 0
    lambda_fm: float = 1.0
    lambda_focal: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    p_drop: float = 0.1
    crop_ratio: Tuple[float, float] = (0.7, 0.3)   # (partial, full)
    grad_clip: float = 1.0
    audio_mode: str = "ground_truth"
    focal_targets: str = "both"
    two_phase: bool = False
    phase1_steps: int = 0
    log_every: int = 50
    checkpoint_every: int = 500

    def validate(self) -> "TrainConfig":
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1", "train.steps")
        if self.lambda_fm < 0 or self.lambda_focal < 0:
            raise ConfigError("loss weights must be >= 0", "train.lambda_focal")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ConfigError(f"p_drop must be in [0, 1], got {self.p_drop}", "train.p_drop")
        if not 0.0 <= self.focal_alpha <= 1.0 or self.focal_gamma < 0:
            raise ConfigError("need 0 <= focal_alpha <= 1 and focal_gamma >= 0",
                              "train.focal_alpha")
        check_ratio(self.crop_ratio)
        if self.audio_mode not in TRAIN_AUDIO_MODES:
            raise ConfigError(f"audio_mode must be one of {TRAIN_AUDIO_MODES}",
                              "train.audio_mode")
        if self.focal_targets not in FOCAL_TARGETS:
            raise ConfigError(f"focal_targets must be one of {FOCAL_TARGETS}",
                              "train.focal_targets")
        if self.two_phase and not 0 < self.phase1_steps <= self.steps:
            raise ConfigError("two_phase needs 0 < phase1_steps <= steps", "train.phase1_steps")
        return self

    @property
    def effective_lambda_focal(self) -> float:
        # id_embedding training has no mask supervision
        return 0.0 if self.audio_mode == "id_embedding" else self.lambda_focal

    def phase(self, step: int) -> int:
        return 1 if self.two_phase and step < self.phase1_steps else 2


def check_ratio(ratio: Sequence[float]) -> Tuple[float, float]:
    if len(ratio) != 2 or min(ratio) < 0 or abs(sum(ratio) - 1.0) > 1e-9:
        raise ConfigError(f"crop ratio must be two non-negative numbers summing to 1, got "
                          f"{tuple(ratio)}", "train.crop_ratio")
    return float(ratio[0]), float(ratio[1])


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass
class NoisedSample:
    z0: torch.Tensor
    eps: torch.Tensor
    t: torch.Tensor          # (B,)
    z_t: torch.Tensor
    target: torch.Tensor


def make_noised(z0: torch.Tensor, eps: torch.Tensor, t: torch.Tensor) -> NoisedSample:
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 {tuple(z0.shape)} and eps {tuple(eps.shape)} differ")
    tb = t.to(z0.dtype).reshape(-1, *([1] * (z0.ndim - 1)))
    z_t = (1 - tb) * z0 + tb * eps
    return NoisedSample(z0=z0, eps=eps, t=t, z_t=z_t, target=eps - z0)


def fm_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return F.mse_loss(pred, target)


def focal_loss(pred: torch.Tensor, target: torch.Tensor, valid: Optional[torch.Tensor] = None,
               alpha: float = 0.25, gamma: float = 2.0) -> Tuple[torch.Tensor, bool]:
    """Mean focal loss over elements whose frame is valid. Returns (loss, supervised)."""
    if pred.shape != target.shape:
        raise ShapeError(f"mask {tuple(pred.shape)} vs target {tuple(target.shape)}")
    positive = target.bool()
    p = pred.clamp(1e-6, 1 - 1e-6)
    p_t = torch.where(positive, p, 1 - p)
    alpha_t = torch.where(positive, torch.full_like(p, alpha), torch.full_like(p, 1 - alpha))
    loss = -alpha_t * (1 - p_t) ** gamma * torch.log(p_t)

    if valid is None:
        return loss.mean(), True
    keep = valid.bool().expand_as(loss)
    if not keep.any():
        return pred.sum() * 0.0, False
    return loss[keep].mean(), True


# ---------------------------------------------------------------------------
# Augmentation and batching
# ---------------------------------------------------------------------------


def augment_reference(sample: SceneSample, ratio: Sequence[float],
                      rng: np.random.Generator) -> List[str]:
    """Crop mode per entity: partial with prob ratio[0] (top/bottom half at 1:1), else full.

    Only the reference changes; the mask target stays the complete entity region.
    """
    partial, _ = check_ratio(ratio)
    crops = []
    for _ in range(sample.n_entities):
        if rng.random() < partial:
            crops.append("partial_top" if rng.random() < 0.5 else "partial_bottom")
        else:
            crops.append("full")
    return crops


@dataclass
class TrainBatch:
    z0: torch.Tensor                 # (B, T', H', W', C)
    conds: Conditions
    gt_soft: torch.Tensor            # (B, N, T', H', W')
    gt_binary: torch.Tensor          # (B, N, T', H', W') bool
    latent_valid: torch.Tensor       # (B, T') bool
    seeds: List[int] = field(default_factory=list)
    text_truncated: bool = False

    @property
    def batch_size(self) -> int:
        return int(self.z0.shape[0])

    def to(self, device: Optional[torch.device] = None,
           dtype: Optional[torch.dtype] = None) -> "TrainBatch":
        def cast(x: torch.Tensor) -> torch.Tensor:
            return x.to(device=device, dtype=dtype) if x.is_floating_point() else x.to(device)

        refs = self.conds.refs
        if refs is not None:
            refs = ReferenceSet(cast(refs.latents), refs.entity_ids.to(device), refs.specs)
        audio = self.conds.audio
        if audio is not None:
            audio = AudioConditions(cast(audio.features), cast(audio.mute_features))
        text = self.conds.text.to(device) if self.conds.text is not None else None
        return TrainBatch(cast(self.z0), Conditions(refs, audio, text), cast(self.gt_soft),
                          self.gt_binary.to(device), self.latent_valid.to(device),
                          list(self.seeds), self.text_truncated)


def collate(samples: Sequence[SceneSample], codec: CodecConfig, feat_cfg: FeatureConfig,
            scene_cfg: Optional[SceneConfig] = None,
            crops: Optional[Sequence[Sequence[str]]] = None,
            projection: Optional[torch.Tensor] = None) -> TrainBatch:
    """Encode a list of scenes into latents, conditions and token-grid mask targets."""
    if not samples:
        raise ShapeError("cannot collate an empty batch")
    n = samples[0].n_entities
    if any(s.n_entities != n for s in samples):
        raise ShapeError("all scenes in a batch must have the same number of entities")
    scene_cfg = scene_cfg or SceneConfig()
    proj = projection if projection is not None else projection_matrix(feat_cfg)

    z0, ref_lat, feats, texts, soft, valid = [], [], [], [], [], []
    truncated = False
    for i, sample in enumerate(samples):
        z0.append(codec_mod.encode(torch.from_numpy(sample.frames), codec).float())
        if crops is None:
            images = torch.from_numpy(sample.reference_images)
        else:
            images = torch.from_numpy(np.stack([
                render_reference(spec, crop, scene_cfg)
                for spec, crop in zip(sample.entities, crops[i])
            ]))
        ref_lat.append(codec_mod.encode_reference(images, codec)[:, 0].float())
        feats.append(extract_audio_features(torch.from_numpy(sample.audio_signals), codec.ct,
                                            feat_cfg, proj))
        text = rephrase_and_merge(TextTokens.from_ids(sample.caption_tokens.tolist()),
                                  sample.entities, feat_cfg, scene_cfg)
        truncated = truncated or text.truncated
        texts.append(text)
        s, _ = downsample_gt_mask(torch.from_numpy(sample.gt_masks), codec)
        soft.append(s)
        valid.append(latent_frame_valid(torch.from_numpy(sample.frame_valid), codec.ct))

    feats_t = torch.stack(feats)
    mute = mute_track(feats_t.shape[-2], codec.ct, feat_cfg, proj)
    entity_ids = torch.as_tensor([spec.entity_id for spec in samples[0].entities],
                                 dtype=torch.long)
    if entity_ids.numel() != n:
        entity_ids = torch.arange(n)
    soft_t = torch.stack(soft)
    return TrainBatch(
        z0=torch.stack(z0),
        conds=Conditions(
            refs=ReferenceSet(torch.stack(ref_lat), entity_ids, tuple(samples[0].entities)),
            audio=AudioConditions(feats_t, mute.expand_as(feats_t).clone()),
            text=pad_token_batch(texts, feat_cfg.max_text_len),
        ),
        gt_soft=soft_t,
        gt_binary=soft_t > 0.5,
        latent_valid=torch.stack(valid),
        seeds=[s.seed for s in samples],
        text_truncated=truncated,
    )


# ---------------------------------------------------------------------------
# Step
# ---------------------------------------------------------------------------


@dataclass
class LossBreakdown:
    fm: torch.Tensor
    focal: torch.Tensor
    total: torch.Tensor
    supervised: bool
    dropped: torch.Tensor       # (B,) bool


def drop_conditions(conds: Conditions, drop: torch.Tensor) -> Conditions:
    """Drop text and audio of the selected items together; references are kept."""
    text = conds.text
    if text is not None:
        text = torch.where(drop[:, None].to(text.device),
                           torch.full_like(text, captions.PAD_ID), text)
    audio = conds.audio.muted(drop.to(conds.audio.features.device)) if conds.audio else None
    return Conditions(conds.refs, audio, text)


def compute_losses(model: DiffusionTransformer, batch: TrainBatch, t: torch.Tensor,
                   eps: torch.Tensor, drop: torch.Tensor, cfg: TrainConfig,
                   phase: int = 2) -> LossBreakdown:
    """Deterministic given (t, eps, drop); used by train_step and the gradient checks."""
    noised = make_noised(batch.z0, eps, t)
    conds = drop_conditions(batch.conds, drop)
    id_mode = cfg.audio_mode == "id_embedding"
    lambda_focal = cfg.effective_lambda_focal

    hooks = []
    mask_hook = None
    if not id_mode:
        mask_hook = MaskPredictionHook(model.mask_heads)
        hooks.append(mask_hook)
    if phase == 2 and conds.audio is not None:
        if id_mode:
            ids = conds.refs.entity_ids.to(model.id_audio.device)
            hooks.append(AudioBindingHook(model.audio_injectors, conds.audio, masks=None,
                                          id_vectors=model.id_audio[ids]))
        else:
            hooks.append(AudioBindingHook(model.audio_injectors, conds.audio,
                                          masks=batch.gt_soft))

    pred = model.predict_velocity(noised.z_t, t, conds, hooks, id_embedding=id_mode)
    fm = fm_loss(pred, noised.target)

    focal = torch.zeros((), dtype=fm.dtype, device=fm.device)
    supervised = False
    if mask_hook is not None and mask_hook.per_layer:
        valid = batch.latent_valid[:, None, :, None, None]
        outputs = []
        if cfg.focal_targets in ("aggregate", "both"):
            outputs.append(mask_hook.aggregate())
        if cfg.focal_targets in ("heads", "both"):
            outputs.extend(mask_hook.per_layer[l] for l in mask_hook.layers)
        terms = [focal_loss(m, batch.gt_binary, valid, cfg.focal_alpha, cfg.focal_gamma)
                 for m in outputs]
        focal = torch.stack([loss for loss, _ in terms]).mean()
        supervised = any(flag for _, flag in terms)

    total = cfg.lambda_fm * fm + lambda_focal * focal
    return LossBreakdown(fm=fm, focal=focal, total=total, supervised=supervised, dropped=drop)


def train_step(model: DiffusionTransformer, optimizer: torch.optim.Optimizer,
               batch: TrainBatch, cfg: TrainConfig, generator: torch.Generator,
               step: int = 0) -> MetricsLine:
    """One optimizer step. Randomness (t, eps, drop) comes from `generator` only."""
    model.train()
    b = batch.batch_size
    dtype, device = batch.z0.dtype, batch.z0.device
    t = torch.rand(b, generator=generator).to(device=device, dtype=dtype)
    eps = torch.randn(batch.z0.shape, generator=generator).to(device=device, dtype=dtype)
    drop = torch.rand(b, generator=generator) < cfg.p_drop
    phase = cfg.phase(step)

    optimizer.zero_grad(set_to_none=True)
    losses = compute_losses(model, batch, t, eps, drop.to(device), cfg, phase)
    if not torch.isfinite(losses.total):
        raise NumericError("non-finite training loss", step=step, diagnostics={
            "fm_loss": float(losses.fm.detach()),
            "focal_loss": float(losses.focal.detach()),
            "t": t.tolist(),
            "seeds": batch.seeds,
            "dropped": drop.tolist(),
        })
    losses.total.backward()
    max_norm = cfg.grad_clip if cfg.grad_clip > 0 else float("inf")
    grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), max_norm)
    optimizer.step()

    record: MetricsLine = {
        "step": step,
        "phase": phase,
        "fm_loss": float(losses.fm.detach()),
        "focal_loss": float(losses.focal.detach()),
        "total_loss": float(losses.total.detach()),
        "grad_norm": float(grad_norm),
        "dropped": float(drop.float().mean()),
        "supervised": bool(losses.supervised),
    }
    return record


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------


class Trainer:
    CHECKPOINT = "checkpoint.itah"
    STATE = "trainer_state.pt"
    METRICS = "metrics.jsonl"

    def __init__(self, model: DiffusionTransformer, cfg: TrainConfig, dataset: SceneDataset,
                 codec: CodecConfig, feat_cfg: FeatureConfig,
                 scene_cfg: Optional[SceneConfig] = None, out_dir: Optional[Path] = None,
                 config_hash: str = "0" * 64, device: Optional[torch.device] = None):
        self.model = model
        self.cfg = cfg.validate()
        self.dataset = dataset
        self.codec = codec
        self.feat_cfg = feat_cfg
        self.scene_cfg = scene_cfg or dataset.cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.config_hash = config_hash
        self.device = device or torch.device("cpu")
        self.projection = projection_matrix(feat_cfg)

        self.model.to(self.device)
        self.optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr,
                                           weight_decay=cfg.weight_decay)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.history: List[MetricsLine] = []

    # --- persistence -----------------------------------------------------

    def _save(self) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_hash = save_checkpoint(self.model, self.out_dir / self.CHECKPOINT,
                                    extra={"step": self.step, "config_hash": self.config_hash})
        torch.save({
            "optimizer": self.optimizer.state_dict(),
            "step": self.step,
            "torch_rng": self.generator.get_state(),
            "np_rng": self.rng.bit_generator.state,
        }, self.out_dir / self.STATE)
        write_manifest(self.out_dir / "manifest.json", command="train",
                       config_hash=self.config_hash, seeds=[self.cfg.seed],
                       files=[self.CHECKPOINT, self.STATE, self.METRICS],
                       checkpoint_hash=ckpt_hash, extra={"step": self.step})

    def try_resume(self) -> bool:
        """Load model, optimizer and RNG state when the run directory has the same hash."""
        if self.out_dir is None:
            return False
        ckpt, state_path = self.out_dir / self.CHECKPOINT, self.out_dir / self.STATE
        if not (ckpt.is_file() and state_path.is_file()):
            return False
        if not manifest_matches(self.out_dir / "manifest.json", self.config_hash):
            logger.warning("config hash differs from %s; starting from scratch", self.out_dir)
            return False
        loaded, _ = load_checkpoint(ckpt)
        self.model.load_state_dict(loaded.state_dict())
        state = torch.load(state_path, map_location="cpu", weights_only=False)
        self.optimizer.load_state_dict(state["optimizer"])
        self.generator.set_state(state["torch_rng"])
        self.rng.bit_generator.state = state["np_rng"]
        self.step = int(state["step"])
        self._truncate_metrics()
        logger.info("resumed from %s at step %d", self.out_dir, self.step)
        return True

    def _truncate_metrics(self) -> None:
        path = self.out_dir / self.METRICS
        if not path.is_file():
            return
        kept = [line for line in path.read_text(encoding="utf-8").splitlines()
                if line.strip() and json.loads(line)["step"] < self.step]
        path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")

    def _append_metrics(self, record: MetricsLine) -> None:
        validate_json(record, METRICS_LINE_SCHEMA, "metrics line")
        if self.out_dir is None:
            return
        with (self.out_dir / self.METRICS).open("a", encoding="utf-8") as f:
            f.write(json.dumps(record) + "\n")

    def _dump_diagnostics(self, err: NumericError) -> None:
        if self.out_dir is None:
            return
        path = self.out_dir / "numeric_error.json"
        with path.open("w", encoding="utf-8") as f:
            json.dump({"step": err.step, "message": str(err), **err.diagnostics}, f, indent=2)
        logger.error("wrote diagnostics to %s", path)

    # --- loop ------------------------------------------------------------

    def next_batch(self) -> TrainBatch:
        n = len(self.dataset)
        idx = self.rng.choice(n, size=self.cfg.batch_size, replace=n < self.cfg.batch_size)
        samples = [self.dataset[int(i)] for i in idx]
        crops = [augment_reference(s, self.cfg.crop_ratio, self.rng) for s in samples]
        batch = collate(samples, self.codec, self.feat_cfg, self.scene_cfg, crops,
                        self.projection)
        if batch.text_truncated:
            logger.debug("batch at step %d had truncated captions", self.step)
        return batch.to(self.device)

    def run(self, progress: bool = True, resume: bool = True) -> List[MetricsLine]:
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            if not (resume and self.try_resume()):
                (self.out_dir / self.METRICS).write_text("", encoding="utf-8")
        if self.step >= self.cfg.steps:
            logger.info("nothing to do: already at step %d of %d", self.step, self.cfg.steps)
            return self.history

        bar = tqdm(range(self.step, self.cfg.steps), desc="train", disable=not progress,
                   initial=self.step, total=self.cfg.steps)
        for step in bar:
            self.step = step
            if self.cfg.two_phase and step == self.cfg.phase1_steps:
                logger.info("phase 2 from step %d: audio binding enabled", step)
            try:
                record = train_step(self.model, self.optimizer, self.next_batch(), self.cfg,
                                    self.generator, step)
            except NumericError as err:
                self._dump_diagnostics(err)
                raise
            self.history.append(record)
            self._append_metrics(record)
            bar.set_postfix(fm=f"{record['fm_loss']:.4f}", focal=f"{record['focal_loss']:.4f}")
            if self.cfg.log_every and step % self.cfg.log_every == 0:
                logger.info("step %d phase %d fm %.5f focal %.5f total %.5f |g| %.3f", step,
                            record["phase"], record["fm_loss"], record["focal_loss"],
                            record["total_loss"], record["grad_norm"])
            self.step = step + 1
            if self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                self._save()

        self._save()
        return self.history


__all__ = [
    "TRAIN_AUDIO_MODES", "FOCAL_TARGETS", "TrainConfig", "check_ratio", "NoisedSample",
    "make_noised", "fm_loss", "focal_loss", "augment_reference", "TrainBatch", "collate",
    "LossBreakdown", "drop_conditions", "compute_losses", "train_step", "Trainer",
]
