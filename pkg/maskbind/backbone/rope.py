"""
rope.py - 3D axial rotary position encoding over (t, h, w) token coordinates

The head dimension d is split into (d_t, d_h, d_w); each chunk is rotated by its own
axis coordinate. Coordinates may be negative (reference and text tokens use reserved
negative time coordinates), which rotary encoding handles like any other integer.
"""

from __future__ import annotations

from typing import Sequence, Tuple

import torch

from maskbind.errors import ConfigError, ShapeError

DEFAULT_THETA = 10000.0


def check_split(split: Sequence[int], head_dim: int) -> Tuple[int, int, int]:
    split = tuple(int(s) for s in split)
    if len(split) != 3:
        raise ConfigError(f"rope split needs three entries, got {split}", "model.rope_split")
    if any(s < 0 or s % 2 for s in split):
        raise ConfigError(f"rope split entries must be even and >= 0, got {split}",
                          "model.rope_split")
    if sum(split) != head_dim:
        raise ConfigError(f"rope split {split} must sum to head_dim {head_dim}",
                          "model.rope_split")
    return split  # type: ignore[return-value]


def _rotate_half(x: torch.Tensor) -> torch.Tensor:
    x1, x2 = x.chunk(2, dim=-1)
    return torch.cat((-x2, x1), dim=-1)


def axis_angles(coord: torch.Tensor, dim: int, theta: float = DEFAULT_THETA) -> torch.Tensor:
    """(S,) or (..., S) coordinates -> (..., S, dim) angles in float64."""
    inv_freq = theta ** (-torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    ang = coord.to(torch.float64)[..., None] * inv_freq
    return torch.cat((ang, ang), dim=-1)


def rope_3d(x: torch.Tensor, coords: torch.Tensor, split: Sequence[int],
            theta: float = DEFAULT_THETA) -> torch.Tensor:
    """Rotate the last dim of `x` (..., S, d) by `coords` (..., S, 3).

    `coords` must broadcast against x's leading dims, e.g. (S, 3) for x of shape
    (B, heads, S, d).
    """
    split = check_split(split, x.shape[-1])
    if coords.shape[-1] != 3 or coords.shape[-2] != x.shape[-2]:
        raise ShapeError(
            f"coords {tuple(coords.shape)} do not match tokens {tuple(x.shape[:-1])}")

    out = []
    start = 0
    for axis, dim in enumerate(split):
        chunk = x[..., start:start + dim]
        start += dim
        if dim == 0:
            continue
        ang = axis_angles(coords[..., axis], dim, theta)
        cos = ang.cos().to(x.dtype)
        sin = ang.sin().to(x.dtype)
        out.append(chunk * cos + _rotate_half(chunk) * sin)
    return torch.cat(out, dim=-1)


__all__ = ["DEFAULT_THETA", "check_split", "axis_angles", "rope_3d"]
