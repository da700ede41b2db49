"""
audiocond.py - windowed audio cross-attention and mask-gated audio binding

Per block, every video token queries the audio rows of one entity (and, with the same
key/value projection, that entity's mute rows). The two results are blended by the
entity's soft mask and added to the video stream:

  h <- h + gate * (m * p + (1 - m) * p_mute)        for entities in ascending id order

Masks are used as-is; there is no thresholding anywhere in this path.
"""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import torch
from einops import rearrange
from torch import nn

from maskbind.backbone.state import AudioConditions, TokenState
from maskbind.errors import ConfigError, ShapeError


class AudioCrossAttention(nn.Module):
    """Proj_q on video tokens, one Proj_kv for real and mute features, output proj, gate."""

    def __init__(self, width: int, audio_dim: int, heads: int, window: Optional[int] = 2):
        super().__init__()
        if width % heads:
            raise ConfigError(f"width {width} not divisible by heads {heads}", "model.heads")
        self.heads = heads
        self.window = window
        self.norm = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.to_q = nn.Linear(width, width)
        self.to_kv = nn.Linear(audio_dim, 2 * width)
        self.out = nn.Linear(width, width)
        self.gate = nn.Parameter(torch.zeros(width))

    def window_mask(self, frame_index: torch.Tensor, n_rows: int) -> Optional[torch.Tensor]:
        """(S_v,) latent frame per token -> (S_v, T') bool, True where |s - t'| <= w."""
        if self.window is None or self.window < 0:
            return None
        rows = torch.arange(n_rows, device=frame_index.device)
        return (rows[None, :] - frame_index[:, None]).abs() <= self.window

    def attend(self, q: torch.Tensor, feats: torch.Tensor,
               mask: Optional[torch.Tensor]) -> torch.Tensor:
        k, v = rearrange(self.to_kv(feats), "b s (two h d) -> two b h s d", two=2, h=self.heads)
        attn_mask = None if mask is None else mask[None, None]
        out = torch.nn.functional.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        return self.out(rearrange(out, "b h s d -> b s (h d)"))


def audio_cross_attn(injector: AudioCrossAttention, h_v: torch.Tensor, features: torch.Tensor,
                     mute_features: torch.Tensor, frame_index: torch.Tensor
                     ) -> Tuple[torch.Tensor, torch.Tensor]:
    """(B, S_v, D) video, (B, T', D_a) real and mute rows -> (p, p_mute), each (B, S_v, D)."""
    if features.shape != mute_features.shape:
        raise ShapeError("real and mute audio features differ in shape")
    n_rows = features.shape[-2]
    if frame_index.numel() and int(frame_index.max()) >= n_rows:
        raise ShapeError(
            f"audio track has {n_rows} latent frames but video spans "
            f"{int(frame_index.max()) + 1}")
    q = rearrange(injector.to_q(injector.norm(h_v)), "b s (h d) -> b h s d", h=injector.heads)
    mask = injector.window_mask(frame_index.to(h_v.device), n_rows)
    return injector.attend(q, features, mask), injector.attend(q, mute_features, mask)


def bind_audio(h_v: torch.Tensor, gate: torch.Tensor,
               per_entity: Sequence[Tuple[torch.Tensor, torch.Tensor, torch.Tensor]]
               ) -> torch.Tensor:
    """Sequential update over entities; each item is (p, p_mute, m) with m of shape (B, S_v)."""
    for p, p_mute, m in per_entity:
        m = m[..., None].to(p.dtype)
        h_v = h_v + gate * (m * p + (1 - m) * p_mute)
    return h_v


def global_audio_bind(h_v: torch.Tensor, gate: torch.Tensor,
                      per_entity: Sequence[Tuple[torch.Tensor, torch.Tensor]]) -> torch.Tensor:
    """Binding with m == 1 everywhere for every entity."""
    items = [(p, p_mute, torch.ones(p.shape[:-1], dtype=p.dtype, device=p.device))
             for p, p_mute in per_entity]
    return bind_audio(h_v, gate, items)


class AudioBindingHook:
    """Injects audio at every block. `masks` is (B, N, T', H', W') or None for global binding.

    `calls` counts injector invocations (one per block per entity).
    """

    def __init__(self, injectors: nn.ModuleList, audio: AudioConditions,
                 masks: Optional[torch.Tensor] = None,
                 id_vectors: Optional[torch.Tensor] = None):
        self.injectors = injectors
        features, mute = audio.features, audio.mute_features
        if id_vectors is not None:
            # (N, D_a) per-slot vectors paired with the reference of the same slot
            features = features + id_vectors[None, :, None, :]
            mute = mute + id_vectors[None, :, None, :]
        self.features = features
        self.mute = mute
        self.masks = masks
        self.calls = 0

    def __call__(self, layer: int, state: TokenState) -> TokenState:
        injector = self.injectors[layer - 1]
        b, n = self.features.shape[:2]
        if self.masks is not None and self.masks.shape[:2] != (b, n):
            raise ShapeError(
                f"masks for {tuple(self.masks.shape[:2])} (B, N) but audio has {(b, n)}")
        frame_index = state.video_coords[:, 0]
        order: Sequence[int] = range(n)
        if state.entity_ids is not None and state.entity_ids.shape[0] == n:
            order = state.entity_ids.argsort().tolist()
        items: List[Tuple[torch.Tensor, torch.Tensor, torch.Tensor]] = []
        for slot in order:
            p, p_mute = audio_cross_attn(injector, state.video, self.features[:, slot],
                                         self.mute[:, slot], frame_index)
            self.calls += 1
            if self.masks is None:
                m = torch.ones(p.shape[:-1], dtype=p.dtype, device=p.device)
            else:
                m = self.masks[:, slot].reshape(b, -1)
            items.append((p, p_mute, m))
        return state.with_video(bind_audio(state.video, injector.gate, items))


__all__ = [
    "AudioCrossAttention", "audio_cross_attn", "bind_audio",
    "global_audio_bind", "AudioBindingHook",
]
