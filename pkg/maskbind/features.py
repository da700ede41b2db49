"""
features.py - audio feature tokens, mute tracks and caption embeddings
-----------------------------------------------------------------------
Stand-in for a pretrained speech encoder: per latent frame t' the raw vector is

  [windowed mean, windowed std, first difference, K DFT magnitudes]

where mean/std use the 3*ct samples around the frame (one stride either side, zero
padded at the edges), the difference is mean(own stride) - mean(previous stride),
and the DFT runs over a 2K-sample window centred on the stride (bins 1..K).
The raw vector is projected to D_a by a fixed orthonormal matrix seeded by config.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from maskbind.errors import ConfigError, ShapeError
from maskbind.synthgen import captions
from maskbind.synthgen.scene import EntitySpec, SceneConfig, size_word

logger = logging.getLogger(__name__)

SignalLike = Union[np.ndarray, torch.Tensor, Sequence[float]]


@dataclass(frozen=True)
class FeatureConfig:
    audio_dim: int = 32
    dft_bins: int = 8
    seed: int = 0
    text_dim: int = 64
    max_text_len: int = 32

    @property
    def raw_dim(self) -> int:
        return 3 + self.dft_bins

    def validate(self) -> None:
        if self.dft_bins < 1:
            raise ConfigError("dft_bins must be >= 1", "features.dft_bins")
        if self.audio_dim < self.raw_dim:
            raise ConfigError(
                f"audio_dim must be >= 3 + dft_bins = {self.raw_dim} for an orthonormal "
                "projection", "features.audio_dim")
        if self.max_text_len < 1:
            raise ConfigError("max_text_len must be >= 1", "features.max_text_len")


# ---------------------------------------------------------------------------
# Data classes
# ---------------------------------------------------------------------------


@dataclass
class AudioTrack:
    entity_id: int
    features: torch.Tensor        # (T', D_a)
    mute_features: torch.Tensor   # (T', D_a)

    def __post_init__(self) -> None:
        if self.features.shape != self.mute_features.shape:
            raise ShapeError(
                f"features {tuple(self.features.shape)} and mute features "
                f"{tuple(self.mute_features.shape)} differ in shape")


@dataclass
class TextTokens:
    token_ids: torch.Tensor                    # (L,) int64
    embeddings: Optional[torch.Tensor] = None  # (L, D_txt)
    truncated: bool = False

    def __len__(self) -> int:
        return int(self.token_ids.shape[0])

    @staticmethod
    def from_ids(ids: Sequence[int]) -> "TextTokens":
        return TextTokens(token_ids=torch.as_tensor(list(ids), dtype=torch.long))


# ---------------------------------------------------------------------------
# Audio features
# ---------------------------------------------------------------------------


def projection_matrix(cfg: FeatureConfig) -> torch.Tensor:
    """(D_a, 3 + K) matrix with orthonormal columns, fixed by cfg.seed."""
    cfg.validate()
    gen = torch.Generator().manual_seed(cfg.seed)
    a = torch.randn(cfg.audio_dim, cfg.raw_dim, generator=gen, dtype=torch.float64)
    q, _ = torch.linalg.qr(a)
    return q


def raw_audio_features(signal: SignalLike, ct: int, cfg: FeatureConfig) -> torch.Tensor:
    """(..., T) signal -> (..., T', 3 + K) unprojected features, float64."""
    x = torch.as_tensor(np.asarray(signal) if not isinstance(signal, torch.Tensor) else signal)
    x = x.to(torch.float64)
    n = x.shape[-1]
    if ct < 1 or n % ct:
        raise ShapeError(f"signal length {n} not divisible by temporal ratio ct={ct}")
    frames = n // ct
    k = cfg.dft_bins

    # stride +-1 stride window for mean / std / diff
    padded = F.pad(x, (ct, ct))
    win = padded.unfold(-1, 3 * ct, ct)[..., :frames, :]
    mean = win.mean(-1)
    std = win.std(-1, unbiased=False)
    diff = win[..., ct:2 * ct].mean(-1) - win[..., :ct].mean(-1)

    # 2K window centred on the stride
    first_start = ct // 2 - k
    pad_left = max(0, -first_start)
    last_end = (frames - 1) * ct + ct // 2 + k
    pad_right = max(0, last_end - n)
    padded = F.pad(x, (pad_left, pad_right))
    offset = first_start + pad_left
    dft_win = padded[..., offset:].unfold(-1, 2 * k, ct)[..., :frames, :]
    mags = torch.fft.rfft(dft_win, n=2 * k, dim=-1).abs()[..., 1:k + 1] / k

    return torch.cat([mean[..., None], std[..., None], diff[..., None], mags], dim=-1)


def extract_audio_features(signal: SignalLike, ct: int, cfg: FeatureConfig,
                           projection: Optional[torch.Tensor] = None) -> torch.Tensor:
    """(..., T) signal -> (..., T', D_a) float32 feature tokens."""
    raw = raw_audio_features(signal, ct, cfg)
    proj = projection if projection is not None else projection_matrix(cfg)
    return (raw @ proj.T).to(torch.float32)


def mute_track(frames: int, ct: int, cfg: FeatureConfig,
               projection: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Features of an all-zero signal with `frames` latent frames: (T', D_a)."""
    if frames <= 0:
        raise ShapeError(f"mute track needs T' > 0, got {frames}")
    return extract_audio_features(torch.zeros(frames * ct, dtype=torch.float64), ct, cfg,
                                  projection)


def make_track(entity_id: int, signal: SignalLike, ct: int, cfg: FeatureConfig,
               projection: Optional[torch.Tensor] = None) -> AudioTrack:
    proj = projection if projection is not None else projection_matrix(cfg)
    feats = extract_audio_features(signal, ct, cfg, proj)
    return AudioTrack(entity_id=entity_id, features=feats,
                      mute_features=mute_track(feats.shape[-2], ct, cfg, proj))


# ---------------------------------------------------------------------------
# Text
# ---------------------------------------------------------------------------


class TextEmbedder(nn.Module):
    """Frozen, seeded embedding table standing in for a pretrained text encoder."""

    def __init__(self, cfg: FeatureConfig, vocab_size: int = captions.VOCAB_SIZE):
        super().__init__()
        gen = torch.Generator().manual_seed(cfg.seed + 1)
        table = torch.randn(vocab_size, cfg.text_dim, generator=gen) / cfg.text_dim ** 0.5
        table[captions.PAD_ID] = 0.0
        self.register_buffer("table", table)

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        if token_ids.numel() and (token_ids.min() < 0 or token_ids.max() >= self.table.shape[0]):
            raise ShapeError("token id outside the vocabulary")
        return self.table[token_ids]


def embed_text(text: TextTokens, embedder: TextEmbedder) -> TextTokens:
    return TextTokens(token_ids=text.token_ids, embeddings=embedder(text.token_ids),
                      truncated=text.truncated)


def rephrase_and_merge(caption: TextTokens, refs: Sequence[EntitySpec],
                       cfg: FeatureConfig, scene_cfg: Optional[SceneConfig] = None
                       ) -> TextTokens:
    """[caption | sep | attributes(entity) for entities in entity_id order].

    Overflow is truncated to cfg.max_text_len with a warning.
    """
    scene_cfg = scene_cfg or SceneConfig()
    ids: List[int] = [int(i) for i in caption.token_ids.tolist()]
    ids.append(captions.SEP_ID)
    for spec in sorted(refs, key=lambda s: s.entity_id):
        ids += captions.attribute_clause(spec.color_name, spec.shape_kind,
                                         size_word(spec, scene_cfg))

    truncated = len(ids) > cfg.max_text_len
    if truncated:
        logger.warning("merged caption has %d tokens; truncating to %d",
                       len(ids), cfg.max_text_len)
        ids = ids[:cfg.max_text_len]
    return TextTokens(token_ids=torch.as_tensor(ids, dtype=torch.long), truncated=truncated)


def pad_token_batch(texts: Sequence[TextTokens], max_len: int) -> torch.Tensor:
    """(B, max_len) ids padded with PAD_ID."""
    out = torch.full((len(texts), max_len), captions.PAD_ID, dtype=torch.long)
    for b, text in enumerate(texts):
        ids = text.token_ids[:max_len]
        out[b, :ids.shape[0]] = ids
    return out


__all__ = [
    "FeatureConfig", "AudioTrack", "TextTokens", "projection_matrix", "raw_audio_features",
    "extract_audio_features", "mute_track", "make_track", "TextEmbedder", "embed_text",
    "rephrase_and_merge", "pad_token_batch",
]
