"""Shared fixtures: small scenes, a small codec and a model that runs in well under a second."""

from __future__ import annotations

import logging

import pytest
import torch

from maskbind.backbone.model import ModelConfig, build_model
from maskbind.backbone.state import AudioConditions, Conditions, ReferenceSet
from maskbind.codec import CodecConfig
from maskbind.features import FeatureConfig
from maskbind.synthgen.scene import SceneConfig, generate_scene
from maskbind.trainer import TrainBatch, collate


@pytest.fixture
def scene_cfg() -> SceneConfig:
    return SceneConfig(height=32, width=32, frames=8, ref_size=16, min_radius=2.5,
                       max_radius=3.0, max_travel=4.0)


@pytest.fixture
def codec() -> CodecConfig:
    return CodecConfig(ct=2, ch=4, cw=4)


@pytest.fixture
def feat_cfg() -> FeatureConfig:
    return FeatureConfig(audio_dim=16, dft_bins=4, seed=0, text_dim=8, max_text_len=24)


@pytest.fixture
def model_cfg(codec: CodecConfig, feat_cfg: FeatureConfig) -> ModelConfig:
    return ModelConfig(n_blocks=2, width=16, heads=2, head_dim=8, rope_split=(2, 2, 4),
                       ffn_mult=2, time_freq_dim=16, mask_hidden=8, audio_window=1,
                       max_entities=3, latent_channels=codec.latent_channels,
                       audio_dim=feat_cfg.audio_dim, text_dim=feat_cfg.text_dim)


@pytest.fixture
def model(model_cfg: ModelConfig):
    return build_model(model_cfg, seed=0)


@pytest.fixture
def scenes(scene_cfg: SceneConfig):
    return [generate_scene(seed, 2, scene_cfg) for seed in (3, 4)]


@pytest.fixture
def batch(scenes, codec, feat_cfg, scene_cfg) -> TrainBatch:
    return collate(scenes, codec, feat_cfg, scene_cfg)


def randomize_(module: torch.nn.Module, seed: int = 0, std: float = 0.5) -> None:
    """Overwrite every parameter with N(0, std^2) so zero-initialised paths carry signal."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)


@pytest.fixture
def micro_cfg() -> ModelConfig:
    # under a thousand parameters; codec (1, 1, 1) gives 3 latent channels
    return ModelConfig(n_blocks=1, width=4, heads=1, head_dim=4, rope_split=(2, 2, 0),
                       ffn_mult=1, time_freq_dim=4, mask_hidden=2, audio_window=-1,
                       max_entities=1, latent_channels=3, audio_dim=4, text_dim=2)


@pytest.fixture
def micro_batch() -> TrainBatch:
    gen = torch.Generator().manual_seed(1)
    dt = torch.float64
    z0 = torch.randn(1, 2, 2, 2, 3, generator=gen, dtype=dt)
    refs = ReferenceSet(torch.randn(1, 1, 2, 2, 3, generator=gen, dtype=dt),
                        torch.tensor([0]))
    audio = AudioConditions(torch.randn(1, 1, 2, 4, generator=gen, dtype=dt),
                            torch.randn(1, 1, 2, 4, generator=gen, dtype=dt))
    text = torch.tensor([[5, 9, 0]])
    gt_binary = torch.tensor([[[[[1, 0], [0, 0]], [[0, 1], [1, 0]]]]], dtype=torch.bool)
    gt_soft = gt_binary.to(dt) * 0.75
    return TrainBatch(z0=z0, conds=Conditions(refs, audio, text), gt_soft=gt_soft,
                      gt_binary=gt_binary, latent_valid=torch.tensor([[True, True]]),
                      seeds=[0])


@pytest.fixture(autouse=True)
def _propagate_package_logs():
    # the CLI installs its own handler and stops propagation; caplog listens on root
    logger = logging.getLogger("maskbind")
    yield
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    logger.propagate = True
    logger.setLevel(logging.NOTSET)
