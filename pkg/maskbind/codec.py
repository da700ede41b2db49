"""
codec.py - invertible space-time patchify codec (stand-in for a learned video VAE)

encode: rearrange (ct, ch, cw) pixel patches into channels, then (x - 0.5) * 2.
decode: exact inverse. Clamping to [0, 1] happens only at export time.

Arithmetic runs in float64, where the affine map is exact for every float32 pixel
value, so decode(encode(v)) == v bit-for-bit. Callers cast latents to the model dtype.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import torch
from einops import rearrange, repeat

from maskbind.errors import ConfigError, ShapeError


@dataclass(frozen=True)
class CodecConfig:
    ct: int = 2
    ch: int = 4
    cw: int = 4
    channels: Optional[int] = None   # None -> 3 * ct * ch * cw (lossless patchify)

    def __post_init__(self) -> None:
        if min(self.ct, self.ch, self.cw) < 1:
            raise ConfigError("compression ratios must be >= 1", "codec.ct")
        if self.channels is not None and self.channels != self.latent_channels:
            raise ConfigError(
                f"pure patchify needs channels = 3*ct*ch*cw = {self.latent_channels}, "
                f"got {self.channels}", "codec.channels")

    @property
    def latent_channels(self) -> int:
        return 3 * self.ct * self.ch * self.cw

    @property
    def ratios(self) -> Tuple[int, int, int]:
        return self.ct, self.ch, self.cw

    def latent_grid(self, frames: int, height: int, width: int) -> Tuple[int, int, int]:
        if frames % self.ct or height % self.ch or width % self.cw:
            raise ShapeError(
                f"video dims (T={frames}, H={height}, W={width}) not divisible by "
                f"ratios {self.ratios}")
        return frames // self.ct, height // self.ch, width // self.cw


# (4, 8, 8) spatio-temporal ratios of the large-scale base model.
LARGE_PROFILE = CodecConfig(ct=4, ch=8, cw=8)


def encode(frames: torch.Tensor, cfg: CodecConfig) -> torch.Tensor:
    """(..., T, H, W, 3) pixels -> (..., T', H', W', C) latent tokens."""
    if frames.ndim < 4 or frames.shape[-1] != 3:
        raise ShapeError(f"expected (..., T, H, W, 3) frames, got {tuple(frames.shape)}")
    cfg.latent_grid(*frames.shape[-4:-1])
    tokens = rearrange(
        frames.to(torch.float64), "... (t ct) (h ch) (w cw) c -> ... t h w (ct ch cw c)",
        ct=cfg.ct, ch=cfg.ch, cw=cfg.cw,
    )
    return (tokens - 0.5) * 2.0


def encode_reference(image: torch.Tensor, cfg: CodecConfig) -> torch.Tensor:
    """(..., H_r, W_r, 3) still image -> (..., 1, H'_r, W'_r, C).

    The image is repeated ct times so it fills exactly one temporal patch.
    """
    if image.ndim < 3 or image.shape[-1] != 3:
        raise ShapeError(f"expected (..., H, W, 3) image, got {tuple(image.shape)}")
    clip = repeat(image, "... h w c -> ... t h w c", t=cfg.ct)
    return encode(clip, cfg)


def decode(latent: torch.Tensor, cfg: CodecConfig) -> torch.Tensor:
    """(..., T', H', W', C) -> (..., T, H, W, 3); exact inverse of `encode`."""
    if latent.ndim < 4 or latent.shape[-1] != cfg.latent_channels:
        raise ShapeError(
            f"latent channel count {latent.shape[-1] if latent.ndim else None} does not "
            f"match codec channels {cfg.latent_channels}")
    pixels = latent.to(torch.float64) / 2.0 + 0.5
    return rearrange(
        pixels, "... t h w (ct ch cw c) -> ... (t ct) (h ch) (w cw) c",
        ct=cfg.ct, ch=cfg.ch, cw=cfg.cw, c=3,
    )


__all__ = ["CodecConfig", "LARGE_PROFILE", "encode", "encode_reference", "decode"]
