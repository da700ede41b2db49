"""
state.py - token state flowing through the blocks, conditioning containers, hook protocol

Coordinates (t, h, w) per stream:
  video      (t', h', w') on the latent grid
  reference  (-(entity_id + 1), h, w) on the reference grid
  text       (-(max_entities + 1 + j), 0, 0) for text position j
so no two tokens of different streams share a coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Protocol, Sequence, Tuple

import torch

from maskbind.errors import ShapeError
from maskbind.synthgen.scene import EntitySpec


@dataclass
class ReferenceSet:
    """N reference latents per batch item plus the entity each slot belongs to."""

    latents: torch.Tensor                  # (B, N, H_r', W_r', C)
    entity_ids: torch.Tensor               # (N,) int64, slot -> entity id
    specs: Tuple[EntitySpec, ...] = ()

    def __post_init__(self) -> None:
        if self.latents.ndim != 5:
            raise ShapeError(
                f"reference latents must be (B, N, H', W', C), got {tuple(self.latents.shape)}")
        if self.entity_ids.shape != (self.latents.shape[1],):
            raise ShapeError(
                f"entity_ids {tuple(self.entity_ids.shape)} does not match "
                f"N={self.latents.shape[1]} references")

    @property
    def n_entities(self) -> int:
        return int(self.latents.shape[1])

    def permuted(self, order: Sequence[int]) -> "ReferenceSet":
        idx = torch.as_tensor(list(order), dtype=torch.long)
        specs = tuple(self.specs[i] for i in order) if self.specs else ()
        return ReferenceSet(self.latents[:, idx], self.entity_ids[idx], specs)


@dataclass
class AudioConditions:
    """Per-entity audio feature tokens and their mute counterparts, slot-aligned with refs."""

    features: torch.Tensor        # (B, N, T', D_a)
    mute_features: torch.Tensor   # (B, N, T', D_a)

    def __post_init__(self) -> None:
        if self.features.shape != self.mute_features.shape or self.features.ndim != 4:
            raise ShapeError(
                f"audio features {tuple(self.features.shape)} and mute "
                f"{tuple(self.mute_features.shape)} must share shape (B, N, T', D_a)")

    def muted(self, which: Optional[torch.Tensor] = None) -> "AudioConditions":
        """Replace tracks by their mute features; `which` is a (B,) or (B, N) bool selector."""
        if which is None:
            return AudioConditions(self.mute_features, self.mute_features)
        sel = which
        while sel.ndim < self.features.ndim:
            sel = sel[..., None]
        return AudioConditions(torch.where(sel, self.mute_features, self.features),
                               self.mute_features)


@dataclass
class Conditions:
    refs: Optional[ReferenceSet]
    audio: Optional[AudioConditions]
    text: Optional[torch.Tensor]            # (B, S_t) token ids, PAD = 0

    def negative(self) -> "Conditions":
        """CFG negative branch: text dropped, mute audio, references kept."""
        return Conditions(self.refs, self.audio.muted() if self.audio is not None else None,
                          None)


@dataclass
class TokenState:
    video: torch.Tensor                       # (B, S_v, D)
    refs: Optional[torch.Tensor]              # (B, N, S_r, D)
    text: Optional[torch.Tensor]              # (B, S_t, D)
    text_valid: Optional[torch.Tensor]        # (B, S_t) bool
    video_coords: torch.Tensor                # (S_v, 3)
    ref_coords: Optional[torch.Tensor]        # (N, S_r, 3)
    text_coords: Optional[torch.Tensor]       # (S_t, 3)
    grid: Tuple[int, int, int]                # (T', H', W')
    t_emb: torch.Tensor                       # (B, D)
    t_mod: torch.Tensor                       # (B, 6 * D)
    entity_ids: Optional[torch.Tensor] = None  # (N,)

    @property
    def n_refs(self) -> int:
        return 0 if self.refs is None else int(self.refs.shape[1])

    def with_video(self, video: torch.Tensor) -> "TokenState":
        return replace(self, video=video)


class BlockHook(Protocol):
    """Called after every block with the 1-indexed layer; returns the (possibly new) state."""

    def __call__(self, layer: int, state: TokenState) -> TokenState:
        ...


def video_coords(grid: Tuple[int, int, int]) -> torch.Tensor:
    t, h, w = grid
    tt, hh, ww = torch.meshgrid(torch.arange(t), torch.arange(h), torch.arange(w),
                                indexing="ij")
    return torch.stack([tt, hh, ww], dim=-1).reshape(-1, 3)


def reference_coords(entity_ids: torch.Tensor, ref_grid: Tuple[int, int]) -> torch.Tensor:
    h, w = ref_grid
    hh, ww = torch.meshgrid(torch.arange(h), torch.arange(w), indexing="ij")
    spatial = torch.stack([hh, ww], dim=-1).reshape(-1, 2)
    out: List[torch.Tensor] = []
    for eid in entity_ids.tolist():
        time = torch.full((spatial.shape[0], 1), -(int(eid) + 1), dtype=torch.long)
        out.append(torch.cat([time, spatial], dim=-1))
    return torch.stack(out)


def text_coords(length: int, max_entities: int) -> torch.Tensor:
    coords = torch.zeros(length, 3, dtype=torch.long)
    coords[:, 0] = -(max_entities + 1 + torch.arange(length))
    return coords


__all__ = [
    "ReferenceSet", "AudioConditions", "Conditions", "TokenState", "BlockHook",
    "video_coords", "reference_coords", "text_coords",
]
