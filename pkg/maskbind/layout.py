"""
layout.py - per-layer mask predictor heads and the cross-step mask cache

A mask head lets every video token attend to the tokens of ONE reference and maps the
attended feature to an occupancy probability. Heads sit on the configured layers only
(one head per layer, shared by all entities); their outputs are averaged into the
aggregate mask, which the sampler caches for the next denoising step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
from einops import reduce
from torch import nn

from maskbind.backbone.blocks import attention
from maskbind.backbone.rope import DEFAULT_THETA, rope_3d
from maskbind.backbone.state import TokenState
from maskbind.codec import CodecConfig
from maskbind.errors import ConfigError, MaskSessionError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class MaskVolume:
    entity_id: int
    values: torch.Tensor     # (T', H', W') in [0, 1]

    def __post_init__(self) -> None:
        if self.values.ndim != 3:
            raise ShapeError(f"mask volume must be (T', H', W'), got {tuple(self.values.shape)}")
        if self.values.numel() and (self.values.min() < 0 or self.values.max() > 1):
            raise ShapeError("mask values must lie in [0, 1]")


def default_mask_layers(n_blocks: int) -> Tuple[int, ...]:
    """Last ceil(L/2) blocks, 1-indexed."""
    n = math.ceil(n_blocks / 2)
    return tuple(range(n_blocks - n + 1, n_blocks + 1))


class MaskPredictor(nn.Module):
    """Projection -> LayerNorm -> RoPE -> single-reference attention -> MLP -> sigmoid."""

    def __init__(self, width: int, head_dim: int, rope_split: Sequence[int], hidden: int = 64,
                 rope_theta: float = DEFAULT_THETA):
        super().__init__()
        self.head_dim = head_dim
        self.rope_split = tuple(rope_split)
        self.rope_theta = rope_theta
        # one projection for both streams; q is read from video rows, k/v from reference rows
        self.proj = nn.Linear(width, 3 * head_dim)
        self.q_norm = nn.LayerNorm(head_dim)
        self.k_norm = nn.LayerNorm(head_dim)
        self.mlp = nn.Sequential(
            nn.Linear(head_dim, hidden),
            nn.GELU(approximate="tanh"),
            nn.Linear(hidden, 1),
        )

    def forward(self, h_v: torch.Tensor, h_r: torch.Tensor, video_coords: torch.Tensor,
                ref_coords: torch.Tensor) -> torch.Tensor:
        """(B, S_v, D), (B, S_r, D) -> (B, S_v) probabilities."""
        q, _, _ = self.proj(h_v).chunk(3, dim=-1)
        _, k, v = self.proj(h_r).chunk(3, dim=-1)
        q = rope_3d(self.q_norm(q), video_coords, self.rope_split, self.rope_theta)
        k = rope_3d(self.k_norm(k), ref_coords, self.rope_split, self.rope_theta)
        attended = attention(q[:, None], k[:, None], v[:, None])[:, 0]
        return torch.sigmoid(self.mlp(attended).squeeze(-1))


def mask_head_forward(head: MaskPredictor, h_v: torch.Tensor, h_r: torch.Tensor,
                      video_coords: torch.Tensor, ref_coords: torch.Tensor,
                      grid: Tuple[int, int, int]) -> torch.Tensor:
    """Layer-specific mask for one reference: (B, T', H', W')."""
    if h_v.shape[-2] != video_coords.shape[0]:
        raise ShapeError(f"{h_v.shape[-2]} video tokens vs {video_coords.shape[0]} coordinates")
    probs = head(h_v, h_r, video_coords.to(h_v.device), ref_coords.to(h_v.device))
    return probs.reshape(h_v.shape[0], *grid)


def aggregate_masks(per_layer: Sequence[Union[torch.Tensor, MaskVolume]]) -> torch.Tensor:
    """Arithmetic mean over the layer set."""
    if not per_layer:
        raise ConfigError("no mask heads produced output; mask_head_layers is empty",
                          "model.mask_head_layers")
    values = [m.values if isinstance(m, MaskVolume) else m for m in per_layer]
    shape = values[0].shape
    if any(v.shape != shape for v in values):
        raise ShapeError(f"per-layer masks differ in shape: {[tuple(v.shape) for v in values]}")
    return torch.stack(values).mean(dim=0)


class MaskCache:
    """Previous-step aggregate masks for one sampling session.

    Steps are counted down (S, S-1, ..., 1) and every update must use a smaller step
    than the one before. Reads during step k return what was stored at step k+1.
    """

    def __init__(self, shape: Sequence[int], device: Optional[torch.device] = None,
                 dtype: torch.dtype = torch.float32):
        self._values = torch.zeros(tuple(shape), device=device, dtype=dtype)
        self.last_step: Optional[int] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self._values.shape)

    def read(self) -> torch.Tensor:
        return self._values

    def update(self, masks: torch.Tensor, step: int) -> "MaskCache":
        if masks.shape != self._values.shape:
            raise ShapeError(
                f"cache holds {tuple(self._values.shape)}, got {tuple(masks.shape)}")
        if self.last_step is not None and step >= self.last_step:
            raise MaskSessionError(
                f"cache update at step {step} after step {self.last_step}; "
                "steps must strictly decrease")
        self._values = masks.detach().clone()
        self.last_step = step
        return self


def cache_update(cache: MaskCache, masks: torch.Tensor, step: int) -> MaskCache:
    return cache.update(masks, step)


def downsample_gt_mask(gt: torch.Tensor, codec: CodecConfig
                       ) -> Tuple[torch.Tensor, torch.Tensor]:
    """(..., T, H, W) binary -> (soft area fractions, fractions > 0.5) on the latent grid."""
    if gt.ndim < 3:
        raise ShapeError(f"expected (..., T, H, W) mask, got {tuple(gt.shape)}")
    codec.latent_grid(*gt.shape[-3:])
    soft = reduce(gt.to(torch.float32), "... (t ct) (h ch) (w cw) -> ... t h w", "mean",
                  ct=codec.ct, ch=codec.ch, cw=codec.cw)
    return soft, soft > 0.5


def latent_frame_valid(frame_valid: torch.Tensor, ct: int) -> torch.Tensor:
    """(..., T) -> (..., T'); a latent frame is valid iff all its pixel frames are."""
    if frame_valid.shape[-1] % ct:
        raise ShapeError(f"{frame_valid.shape[-1]} frames not divisible by ct={ct}")
    return reduce(frame_valid.to(torch.uint8), "... (t ct) -> ... t", "min", ct=ct).bool()


class MaskPredictionHook:
    """Runs the mask head of each configured layer for every reference slot."""

    def __init__(self, heads: nn.ModuleDict):
        self.heads = heads
        self.per_layer: Dict[int, torch.Tensor] = {}

    def __call__(self, layer: int, state: TokenState) -> TokenState:
        key = str(layer)
        if key not in self.heads or state.refs is None:
            return state
        head = self.heads[key]
        masks = [
            mask_head_forward(head, state.video, state.refs[:, n], state.video_coords,
                              state.ref_coords[n], state.grid)
            for n in range(state.n_refs)
        ]
        self.per_layer[layer] = torch.stack(masks, dim=1)    # (B, N, T', H', W')
        return state

    @property
    def layers(self) -> List[int]:
        return sorted(self.per_layer)

    def aggregate(self) -> torch.Tensor:
        return aggregate_masks([self.per_layer[l] for l in self.layers])


def to_mask_volumes(masks: torch.Tensor, entity_ids: Sequence[int]) -> List[MaskVolume]:
    """(N, T', H', W') -> one MaskVolume per entity."""
    return [MaskVolume(int(eid), masks[n].detach()) for n, eid in enumerate(entity_ids)]


__all__ = [
    "MaskVolume", "default_mask_layers", "MaskPredictor", "mask_head_forward",
    "aggregate_masks", "MaskCache", "cache_update", "downsample_gt_mask",
    "latent_frame_valid", "MaskPredictionHook", "to_mask_volumes",
]
