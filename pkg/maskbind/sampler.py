"""
sampler.py - Euler flow-matching sampler with mask caching and mask-gated audio binding
---------------------------------------------------------------------------------------
Per denoising step i = 0..S-1 (cache step k = S - i, counting down):
  1. positive branch: mask heads run on every configured layer; from step `skip` on the
     audio injectors bind each entity's audio through the cached masks of step k+1
  2. the aggregate of this step's heads is written to the cache under step k
  3. negative branch: text dropped, mute audio, references kept
  4. v = lerp(v_uncond, v_cond, s);  z <- z + (t_next - t_cur) * v

Binding modes: predicted_mask (cache), global (all-ones), id_embedding (all-ones plus
per-slot id vectors), fixed_mask (user rectangles).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
from tqdm import tqdm

from maskbind.audiocond import AudioBindingHook
from maskbind.backbone.model import DiffusionTransformer
from maskbind.backbone.state import Conditions
from maskbind.errors import ConfigError, NumericError, ShapeError
from maskbind.layout import MaskCache, MaskPredictionHook

logger = logging.getLogger(__name__)

SAMPLE_MODES = ("predicted_mask", "global", "id_embedding", "fixed_mask")


@dataclass
class SampleConfig:
    steps: int = 50
    skip: Optional[int] = None        # None -> round(steps / 5)
    cfg_scale: float = 6.5
    seed: int = 0
    mode: str = "predicted_mask"
    same_step_bind: bool = False

    @property
    def resolved_skip(self) -> int:
        return int(round(self.steps / 5)) if self.skip is None else int(self.skip)

    def validate(self) -> "SampleConfig":
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}", "sample.steps")
        if not 0 <= self.resolved_skip <= self.steps:
            raise ConfigError(f"skip must be in 0..{self.steps}, got {self.resolved_skip}",
                              "sample.skip")
        if self.cfg_scale < 0:
            raise ConfigError("cfg_scale must be >= 0", "sample.cfg_scale")
        if self.mode not in SAMPLE_MODES:
            raise ConfigError(f"mode must be one of {SAMPLE_MODES}, got {self.mode!r}",
                              "sample.mode")
        return self


@dataclass
class SampleResult:
    latent: torch.Tensor                               # (B, T', H', W', C)
    predicted: List[torch.Tensor] = field(default_factory=list)   # per step (B, N, T', H', W')
    consumed: List[torch.Tensor] = field(default_factory=list)
    audio_calls: List[int] = field(default_factory=list)          # positive branch, per step
    cache_steps: List[int] = field(default_factory=list)
    seed: int = 0

    def mask_trace(self) -> torch.Tensor:
        """(S, B, N, T', H', W') aggregate masks produced at each step."""
        return torch.stack(self.predicted)

    def consumed_trace(self) -> torch.Tensor:
        return torch.stack(self.consumed)


def time_grid(steps: int) -> torch.Tensor:
    """Uniform float64 grid from 1 to 0 inclusive with `steps` intervals."""
    if steps < 1:
        raise ConfigError(f"need at least one step, got {steps}", "sample.steps")
    return torch.arange(steps, -1, -1, dtype=torch.float64) / steps


def euler_step(z: torch.Tensor, v: torch.Tensor, t_cur: float, t_next: float) -> torch.Tensor:
    if not t_next < t_cur:
        raise ConfigError(f"Euler step must go backwards in time, got {t_cur} -> {t_next}")
    return z + (float(t_next) - float(t_cur)) * v


def cfg_velocity(v_cond: torch.Tensor, v_uncond: torch.Tensor, scale: float) -> torch.Tensor:
    """v_uncond + s (v_cond - v_uncond), exact at s = 0 and s = 1."""
    if v_cond.shape != v_uncond.shape:
        raise ShapeError(f"v_cond {tuple(v_cond.shape)} vs v_uncond {tuple(v_uncond.shape)}")
    return torch.lerp(v_uncond, v_cond, float(scale))


def initial_noise(shape: Sequence[int], seed: int) -> torch.Tensor:
    return torch.randn(tuple(shape), generator=torch.Generator().manual_seed(seed))


def _binding_hook(model: DiffusionTransformer, conds: Conditions, masks: Optional[torch.Tensor],
                  id_mode: bool) -> AudioBindingHook:
    id_vectors = None
    if id_mode:
        id_vectors = model.id_audio[conds.refs.entity_ids.to(model.id_audio.device)]
    return AudioBindingHook(model.audio_injectors, conds.audio, masks=masks,
                            id_vectors=id_vectors)


@torch.no_grad()
def sample(model: DiffusionTransformer, conds: Conditions, grid: Tuple[int, int, int],
           cfg: SampleConfig, fixed_masks: Optional[torch.Tensor] = None,
           prefix: Optional[torch.Tensor] = None, progress: bool = False) -> SampleResult:
    """Run S Euler steps from seeded noise. `prefix` (B, T_tail, H', W', C) pins the first
    latent frames to a known clip (noised to the current t before every step)."""
    cfg.validate()
    if conds.refs is None or conds.audio is None:
        raise ShapeError("sampling needs references and audio tracks")
    model.eval()
    param = next(model.parameters())
    device, dtype = param.device, param.dtype
    b, n = conds.audio.features.shape[:2]
    if conds.refs.latents.shape[:2] != (b, n):
        raise ShapeError(f"references {tuple(conds.refs.latents.shape[:2])} vs audio {(b, n)}")
    if conds.audio.features.shape[2] != grid[0]:
        raise ShapeError(f"audio has {conds.audio.features.shape[2]} latent frames, "
                         f"video grid has {grid[0]}")

    mode = cfg.mode
    id_mode = mode == "id_embedding"
    mask_shape = (b, n, *grid)
    if mode == "fixed_mask":
        if fixed_masks is None or tuple(fixed_masks.shape) != mask_shape:
            raise ConfigError(f"fixed_mask mode needs masks of shape {mask_shape}", "sample.mode")
        fixed_masks = fixed_masks.to(device=device, dtype=dtype)

    steps, skip = cfg.steps, cfg.resolved_skip
    times = time_grid(steps)
    z = initial_noise((b, *grid, model.cfg.latent_channels), cfg.seed).to(device, dtype)
    prefix_noise = None
    if prefix is not None:
        prefix = prefix.to(device, dtype)
        prefix_noise = z[:, :prefix.shape[1]].clone()

    negative = conds.negative()
    cache = MaskCache(mask_shape, device=device, dtype=dtype)
    ones = torch.ones(mask_shape, device=device, dtype=dtype)
    result = SampleResult(latent=z, seed=cfg.seed)

    for i in tqdm(range(steps), desc="sample", disable=not progress):
        k = steps - i
        t_cur, t_next = float(times[i]), float(times[i + 1])
        if prefix is not None:
            z[:, :prefix.shape[1]] = (1 - t_cur) * prefix + t_cur * prefix_noise
        inject = i >= skip

        # positive branch
        mask_hook = MaskPredictionHook(model.mask_heads)
        if mode == "predicted_mask" and cfg.same_step_bind and inject:
            model(z, t_cur, conds.refs, conds.text, [mask_hook])
            binding = mask_hook.aggregate()
            audio_hook = _binding_hook(model, conds, binding, id_mode)
            v_cond = model(z, t_cur, conds.refs, conds.text, [audio_hook])
        else:
            if mode == "predicted_mask":
                binding = cache.read()
            elif mode == "fixed_mask":
                binding = fixed_masks
            else:
                binding = ones
            hooks = [mask_hook]
            audio_hook = None
            if inject:
                audio_hook = _binding_hook(model, conds, None if mode in ("global", "id_embedding")
                                           else binding, id_mode)
                hooks.append(audio_hook)
            v_cond = model.predict_velocity(z, t_cur, conds, hooks, id_embedding=id_mode)

        aggregate = mask_hook.aggregate()
        result.predicted.append(aggregate)
        result.consumed.append(binding)
        result.audio_calls.append(audio_hook.calls if inject and audio_hook is not None else 0)
        result.cache_steps.append(k)
        cache.update(aggregate, k)

        # negative branch: mute blends with mute, so the mask does not matter
        if cfg.cfg_scale == 1.0:
            v = v_cond
        else:
            neg_hooks = [_binding_hook(model, negative, None, id_mode)] if inject else []
            v_uncond = model.predict_velocity(z, t_cur, negative, neg_hooks,
                                              id_embedding=id_mode)
            v = cfg_velocity(v_cond, v_uncond, cfg.cfg_scale)

        z = euler_step(z, v, t_cur, t_next)
        if not torch.isfinite(z).all():
            raise NumericError("non-finite latent during sampling", step=i,
                               diagnostics={"t": t_cur, "seed": cfg.seed, "mode": mode})

    if prefix is not None:
        z[:, :prefix.shape[1]] = prefix
    result.latent = z
    logger.debug("sampled %s with %d steps (skip %d, mode %s)", tuple(z.shape), steps, skip, mode)
    return result


def long_video_extend(model: DiffusionTransformer, prev_latent: torch.Tensor,
                      conds: Conditions, grid: Tuple[int, int, int], cfg: SampleConfig,
                      tail: int, fixed_masks: Optional[torch.Tensor] = None) -> SampleResult:
    """Next segment whose first `tail` latent frames are the last `tail` of `prev_latent`."""
    if tail < 1:
        raise ConfigError(f"tail must be at least one latent frame, got {tail}", "sample.tail")
    if tail > grid[0] or tail > prev_latent.shape[1]:
        raise ConfigError(f"tail {tail} longer than the segment ({grid[0]} latent frames)",
                          "sample.tail")
    return sample(model, conds, grid, cfg, fixed_masks=fixed_masks,
                  prefix=prev_latent[:, prev_latent.shape[1] - tail:])


def chain_segments(model: DiffusionTransformer, segment_conds: Sequence[Conditions],
                   grid: Tuple[int, int, int], cfg: SampleConfig, tail: int,
                   fixed_masks: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Sample len(segment_conds) segments; segment j uses seed cfg.seed + j.

    The result concatenates the segments along time, dropping each continuation's
    overlapping tail frames.
    """
    if not segment_conds:
        raise ConfigError("need at least one segment", "sample.segments")
    first = sample(model, segment_conds[0], grid, cfg, fixed_masks)
    pieces = [first.latent]
    prev = first.latent
    for j, conds in enumerate(segment_conds[1:], start=1):
        seg_cfg = SampleConfig(cfg.steps, cfg.skip, cfg.cfg_scale, cfg.seed + j, cfg.mode,
                               cfg.same_step_bind)
        nxt = long_video_extend(model, prev, conds, grid, seg_cfg, tail, fixed_masks).latent
        pieces.append(nxt[:, tail:])
        prev = nxt
    return torch.cat(pieces, dim=1)


__all__ = [
    "SAMPLE_MODES", "SampleConfig", "SampleResult", "time_grid", "euler_step", "cfg_velocity",
    "initial_noise", "sample", "long_video_extend", "chain_segments",
]
