"""
blocks.py - dual-stream transformer block with shared video/reference weights

Video and reference tokens go through one set of weights (reference injection adds
no parameters); text tokens have their own stream weights. All streams meet in one
joint self-attention. Modulation is AdaLN-single: a shared timestep projection plus a
per-block learned (6, D) table giving shift/scale/gate for attention and FFN.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from maskbind.backbone.rope import DEFAULT_THETA, rope_3d
from maskbind.backbone.state import TokenState


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale) + shift


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
              key_valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) v over (B, heads, S, d); key_valid is (B, S_k) bool."""
    mask = None
    if key_valid is not None:
        mask = key_valid[:, None, None, :]
    return F.scaled_dot_product_attention(q, k, v, attn_mask=mask)


class FeedForward(nn.Sequential):
    def __init__(self, width: int, mult: int = 4):
        super().__init__(
            nn.Linear(width, width * mult),
            nn.GELU(approximate="tanh"),
            nn.Linear(width * mult, width),
        )


class StreamWeights(nn.Module):
    """Per-stream projections of one block: norms, fused qkv, output proj, FFN, mod table."""

    def __init__(self, width: int, ffn_mult: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.ffn = FeedForward(width, ffn_mult)
        self.scale_shift_table = nn.Parameter(torch.zeros(6, width))

    def modulation(self, t_mod: torch.Tensor) -> Tuple[torch.Tensor, ...]:
        b, width = t_mod.shape[0], self.scale_shift_table.shape[1]
        mod = t_mod.view(b, 6, width) + self.scale_shift_table[None]
        return tuple(m[:, None, :] for m in mod.unbind(dim=1))


class DualStreamBlock(nn.Module):
    def __init__(self, width: int, heads: int, head_dim: int, ffn_mult: int = 4,
                 rope_split: Sequence[int] = (8, 12, 12), rope_theta: float = DEFAULT_THETA):
        super().__init__()
        self.width = width
        self.heads = heads
        self.head_dim = head_dim
        self.rope_split = tuple(rope_split)
        self.rope_theta = rope_theta
        self.visual = StreamWeights(width, ffn_mult)
        self.text = StreamWeights(width, ffn_mult)

    def _qkv(self, stream: StreamWeights, x: torch.Tensor, shift: torch.Tensor,
             scale: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        qkv = stream.qkv(modulate(stream.norm1(x), shift, scale))
        q, k, v = rearrange(qkv, "b s (three h d) -> three b h s d", three=3, h=self.heads)
        return q, k, v

    def _residual(self, stream: StreamWeights, x: torch.Tensor, attn_out: torch.Tensor,
                  mod: Tuple[torch.Tensor, ...]) -> torch.Tensor:
        _, _, gate_msa, shift_mlp, scale_mlp, gate_mlp = mod
        x = x + gate_msa * stream.proj(attn_out)
        x = x + gate_mlp * stream.ffn(modulate(stream.norm2(x), shift_mlp, scale_mlp))
        return x

    def forward(self, state: TokenState) -> TokenState:
        b, s_v, _ = state.video.shape
        mod_v = self.visual.modulation(state.t_mod)

        # video and all references share the visual stream
        parts = [state.video]
        coords = [state.video_coords]
        if state.refs is not None:
            n, s_r = state.refs.shape[1], state.refs.shape[2]
            parts.append(state.refs.reshape(b, n * s_r, self.width))
            coords.append(state.ref_coords.reshape(-1, 3))
        visual = torch.cat(parts, dim=1)
        q, k, v = self._qkv(self.visual, visual, mod_v[0], mod_v[1])
        s_visual = visual.shape[1]

        key_valid = torch.ones(b, s_visual, dtype=torch.bool, device=visual.device)
        mod_t = None
        if state.text is not None:
            mod_t = self.text.modulation(state.t_mod)
            tq, tk, tv = self._qkv(self.text, state.text, mod_t[0], mod_t[1])
            q, k, v = (torch.cat(pair, dim=2) for pair in ((q, tq), (k, tk), (v, tv)))
            coords.append(state.text_coords)
            key_valid = torch.cat([key_valid, state.text_valid], dim=1)

        all_coords = torch.cat(coords, dim=0).to(q.device)
        q = rope_3d(q, all_coords, self.rope_split, self.rope_theta)
        k = rope_3d(k, all_coords, self.rope_split, self.rope_theta)
        out = rearrange(attention(q, k, v, key_valid), "b h s d -> b s (h d)")

        visual = self._residual(self.visual, visual, out[:, :s_visual], mod_v)
        video = visual[:, :s_v]
        refs = None
        if state.refs is not None:
            refs = visual[:, s_v:].reshape(state.refs.shape)
        text = None
        if state.text is not None:
            text = self._residual(self.text, state.text, out[:, s_visual:], mod_t)

        return TokenState(
            video=video, refs=refs, text=text, text_valid=state.text_valid,
            video_coords=state.video_coords, ref_coords=state.ref_coords,
            text_coords=state.text_coords, grid=state.grid, t_emb=state.t_emb,
            t_mod=state.t_mod, entity_ids=state.entity_ids,
        )


__all__ = ["modulate", "attention", "FeedForward", "StreamWeights", "DualStreamBlock"]
