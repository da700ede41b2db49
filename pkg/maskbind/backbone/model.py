"""
model.py - DiffusionTransformer: embed -> L dual-stream blocks (+ hooks) -> velocity head

The model owns the mask heads (layout) and the per-block audio injectors (audiocond),
but never calls them itself: the trainer and sampler hand in hooks that decide what
runs after each block.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from maskbind import __version__
from maskbind.audiocond import AudioCrossAttention
from maskbind.backbone.blocks import DualStreamBlock, modulate
from maskbind.backbone.rope import DEFAULT_THETA, check_split
from maskbind.backbone.state import (
    BlockHook,
    Conditions,
    ReferenceSet,
    TokenState,
    reference_coords,
    text_coords,
    video_coords,
)
from maskbind.errors import ConfigError, ContainerError, ShapeError
from maskbind.features import FeatureConfig, TextEmbedder
from maskbind.io import container
from maskbind.layout import MaskPredictor, default_mask_layers
from maskbind.synthgen import captions

logger = logging.getLogger(__name__)

CONFIG_RECORD = "__model_config__"


@dataclass
class ModelConfig:
    n_blocks: int = 6
    width: int = 192
    heads: int = 6
    head_dim: int = 32
    rope_split: Tuple[int, int, int] = (8, 12, 12)
    rope_theta: float = DEFAULT_THETA
    ffn_mult: int = 4
    time_freq_dim: int = 256
    mask_head_layers: Optional[Tuple[int, ...]] = None    # None -> last ceil(L/2)
    mask_hidden: int = 64
    audio_window: int = 2                                 # < 0 -> full sequence
    max_entities: int = 3
    latent_channels: int = 96
    audio_dim: int = 32
    text_dim: int = 64
    text_seed: int = 0
    vocab_size: int = captions.VOCAB_SIZE

    def __post_init__(self) -> None:
        self.rope_split = tuple(self.rope_split)  # type: ignore[assignment]
        if self.mask_head_layers is None:
            self.mask_head_layers = default_mask_layers(self.n_blocks)
        self.mask_head_layers = tuple(sorted(set(int(l) for l in self.mask_head_layers)))

    def validate(self) -> "ModelConfig":
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be >= 1", "model.n_blocks")
        if self.width != self.heads * self.head_dim:
            raise ConfigError(
                f"width {self.width} != heads {self.heads} * head_dim {self.head_dim}",
                "model.width")
        check_split(self.rope_split, self.head_dim)
        if not self.mask_head_layers:
            raise ConfigError("mask_head_layers must not be empty", "model.mask_head_layers")
        bad = [l for l in self.mask_head_layers if not 1 <= l <= self.n_blocks]
        if bad:
            raise ConfigError(f"layers {bad} outside 1..{self.n_blocks}",
                              "model.mask_head_layers")
        if self.max_entities < 1:
            raise ConfigError("max_entities must be >= 1", "model.max_entities")
        return self

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    @staticmethod
    def from_dict(data: Dict[str, object]) -> "ModelConfig":
        data = dict(data)
        for key in ("rope_split", "mask_head_layers"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])  # type: ignore[arg-type]
        return ModelConfig(**data)  # type: ignore[arg-type]


class TimestepEmbedder(nn.Module):
    """Sinusoidal features of 1000*t followed by a two-layer MLP."""

    def __init__(self, width: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, width), nn.SiLU(), nn.Linear(width, width))

    def sinusoid(self, t: torch.Tensor) -> torch.Tensor:
        half = self.freq_dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=torch.float64, device=t.device) / half)
        args = (t.to(torch.float64) * 1000.0)[:, None] * freqs[None]
        emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
        return emb.to(self.mlp[0].weight.dtype)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(self.sinusoid(t))


class DiffusionTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg.validate()
        width = cfg.width

        self.patch_in = nn.Linear(cfg.latent_channels, width)        # video and references
        self.t_embedder = TimestepEmbedder(width, cfg.time_freq_dim)
        self.t_block = nn.Sequential(nn.SiLU(), nn.Linear(width, 6 * width))
        self.text_embedder = TextEmbedder(
            FeatureConfig(text_dim=cfg.text_dim, seed=cfg.text_seed), cfg.vocab_size)
        self.text_in = nn.Linear(cfg.text_dim, width)

        self.blocks = nn.ModuleList([
            DualStreamBlock(width, cfg.heads, cfg.head_dim, cfg.ffn_mult, cfg.rope_split,
                            cfg.rope_theta)
            for _ in range(cfg.n_blocks)
        ])
        self.norm_out = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.final_table = nn.Parameter(torch.randn(2, width) / width ** 0.5)
        self.head = nn.Linear(width, cfg.latent_channels)

        self.mask_heads = nn.ModuleDict({
            str(l): MaskPredictor(width, cfg.head_dim, cfg.rope_split, cfg.mask_hidden,
                                  cfg.rope_theta)
            for l in cfg.mask_head_layers
        })
        window = cfg.audio_window if cfg.audio_window >= 0 else None
        self.audio_injectors = nn.ModuleList([
            AudioCrossAttention(width, cfg.audio_dim, cfg.heads, window)
            for _ in range(cfg.n_blocks)
        ])
        # per-slot vectors for the id_embedding binding variant
        self.id_ref = nn.Parameter(torch.zeros(cfg.max_entities, width))
        self.id_audio = nn.Parameter(torch.zeros(cfg.max_entities, cfg.audio_dim))

        self.initialize_weights()

    def initialize_weights(self) -> None:
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.orthogonal_(module.weight)
                nn.init.zeros_(module.bias)
        # gated residual paths and the output head start at zero -> identity at init
        width = self.cfg.width
        last = self.t_block[1]
        with torch.no_grad():
            for chunk in (2, 5):
                last.weight[chunk * width:(chunk + 1) * width].zero_()
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    # ------------------------------------------------------------------
    # Embedding
    # ------------------------------------------------------------------

    def _timesteps(self, t: Union[float, torch.Tensor], batch: int,
                   device: torch.device) -> torch.Tensor:
        t = torch.as_tensor(t, device=device)
        if t.ndim == 0:
            t = t.expand(batch)
        if t.shape != (batch,):
            raise ShapeError(f"timestep must be scalar or ({batch},), got {tuple(t.shape)}")
        return t

    def embed_inputs(self, z_t: torch.Tensor, t: Union[float, torch.Tensor],
                     refs: Optional[ReferenceSet] = None, text: Optional[torch.Tensor] = None,
                     id_embedding: bool = False) -> TokenState:
        cfg = self.cfg
        if z_t.ndim != 5 or z_t.shape[-1] != cfg.latent_channels:
            raise ShapeError(
                f"latent must be (B, T', H', W', {cfg.latent_channels}), got {tuple(z_t.shape)}")
        b = z_t.shape[0]
        grid = tuple(int(s) for s in z_t.shape[1:4])
        device = z_t.device

        video = self.patch_in(z_t.reshape(b, -1, cfg.latent_channels))
        t_emb = self.t_embedder(self._timesteps(t, b, device))
        t_mod = self.t_block(t_emb)

        ref_tokens = ref_xyz = entity_ids = None
        if refs is not None and refs.n_entities:
            if refs.latents.shape[0] != b or refs.latents.shape[-1] != cfg.latent_channels:
                raise ShapeError(
                    f"reference latents {tuple(refs.latents.shape)} do not match batch {b} / "
                    f"channels {cfg.latent_channels}")
            entity_ids = refs.entity_ids.to(device)
            if int(entity_ids.max()) >= cfg.max_entities or int(entity_ids.min()) < 0:
                raise ShapeError(f"entity ids {entity_ids.tolist()} outside "
                                 f"0..{cfg.max_entities - 1}")
            n, h_r, w_r = refs.latents.shape[1:4]
            ref_tokens = self.patch_in(refs.latents.reshape(b, n, h_r * w_r, -1))
            if id_embedding:
                ref_tokens = ref_tokens + self.id_ref[entity_ids][None, :, None, :]
            ref_xyz = reference_coords(entity_ids.cpu(), (h_r, w_r)).to(device)

        text_tokens = text_valid = text_xyz = None
        if text is not None and text.shape[-1] > 0:
            if text.ndim != 2 or text.shape[0] != b:
                raise ShapeError(f"text ids must be (B, S_t), got {tuple(text.shape)}")
            text_tokens = self.text_in(self.text_embedder(text).to(video.dtype))
            text_valid = text != captions.PAD_ID
            text_xyz = text_coords(text.shape[1], cfg.max_entities).to(device)

        return TokenState(
            video=video, refs=ref_tokens, text=text_tokens, text_valid=text_valid,
            video_coords=video_coords(grid).to(device), ref_coords=ref_xyz,
            text_coords=text_xyz, grid=grid, t_emb=t_emb, t_mod=t_mod, entity_ids=entity_ids,
        )

    # ------------------------------------------------------------------
    # Forward
    # ------------------------------------------------------------------

    def block_forward(self, state: TokenState, layer: int) -> TokenState:
        if not 1 <= layer <= len(self.blocks):
            raise ConfigError(f"layer {layer} outside 1..{len(self.blocks)}")
        return self.blocks[layer - 1](state)

    def forward(self, z_t: torch.Tensor, t: Union[float, torch.Tensor],
                refs: Optional[ReferenceSet] = None, text: Optional[torch.Tensor] = None,
                hooks: Sequence[BlockHook] = (), id_embedding: bool = False) -> torch.Tensor:
        state = self.embed_inputs(z_t, t, refs, text, id_embedding)
        for layer in range(1, len(self.blocks) + 1):
            state = self.block_forward(state, layer)
            for hook in hooks:
                state = hook(layer, state)

        shift, scale = (self.final_table[None] + state.t_emb[:, None]).chunk(2, dim=1)
        out = self.head(modulate(self.norm_out(state.video), shift, scale))
        return out.reshape(z_t.shape)

    def predict_velocity(self, z_t: torch.Tensor, t: Union[float, torch.Tensor],
                         conds: Conditions, hooks: Sequence[BlockHook] = (),
                         id_embedding: bool = False) -> torch.Tensor:
        return self(z_t, t, conds.refs, conds.text, hooks, id_embedding)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(cfg: ModelConfig, seed: int = 0) -> DiffusionTransformer:
    """Construct with a fixed torch seed so two builds are parameter-identical."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = DiffusionTransformer(cfg)
    logger.info("model: %d blocks, width %d, %s parameters", cfg.n_blocks, cfg.width,
                f"{model.parameter_count():,}")
    return model


# ---------------------------------------------------------------------------
# Checkpoints (tensor container)
# ---------------------------------------------------------------------------


def save_checkpoint(model: DiffusionTransformer, path: Path,
                    extra: Optional[Dict[str, object]] = None) -> str:
    """Named float32 parameter tensors + a JSON config record. Returns the file hash."""
    records: Dict[str, np.ndarray] = {
        name: tensor.detach().cpu().to(torch.float32).numpy()
        for name, tensor in model.state_dict().items()
    }
    meta = {"model_config": model.cfg.to_dict(), "code_version": __version__,
            "extra": extra or {}}
    records[CONFIG_RECORD] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"),
                                           dtype=np.uint8)
    return container.write_records(Path(path), records)


def read_checkpoint_meta(records: Dict[str, np.ndarray]) -> Dict[str, object]:
    if CONFIG_RECORD not in records:
        raise ContainerError(f"checkpoint has no {CONFIG_RECORD} record")
    return json.loads(records[CONFIG_RECORD].tobytes().decode("utf-8"))


def load_checkpoint(path: Path, map_location: Union[str, torch.device] = "cpu"
                    ) -> Tuple[DiffusionTransformer, Dict[str, object]]:
    records = container.read_records(Path(path))
    meta = read_checkpoint_meta(records)
    if meta.get("code_version") != __version__:
        logger.warning("checkpoint written by maskbind %s, running %s",
                       meta.get("code_version"), __version__)
    model_cfg = ModelConfig.from_dict(meta["model_config"])  # type: ignore[arg-type]
    model = DiffusionTransformer(model_cfg)
    state = {name: torch.from_numpy(arr.copy()) for name, arr in records.items()
             if name != CONFIG_RECORD}
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise ContainerError(f"{path}: missing {missing}, unexpected {unexpected}")
    return model.to(map_location), meta


__all__ = [
    "ModelConfig", "TimestepEmbedder", "DiffusionTransformer", "build_model",
    "save_checkpoint", "load_checkpoint", "read_checkpoint_meta",
]
