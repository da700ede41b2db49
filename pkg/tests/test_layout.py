import math

import pytest
import torch

from conftest import randomize_
from maskbind.backbone.model import ModelConfig, build_model
from maskbind.backbone.rope import rope_3d
from maskbind.backbone.state import reference_coords, video_coords
from maskbind.codec import CodecConfig
from maskbind.errors import ConfigError, MaskSessionError, ShapeError
from maskbind.layout import (
    MaskCache,
    MaskPredictionHook,
    MaskPredictor,
    MaskVolume,
    aggregate_masks,
    cache_update,
    downsample_gt_mask,
    latent_frame_valid,
    mask_head_forward,
    to_mask_volumes,
)


def test_aggregate_is_layer_mean():
    a = torch.full((2, 3, 3), 0.2)
    b = torch.full((2, 3, 3), 0.6)
    assert torch.allclose(aggregate_masks([a, b]), torch.full((2, 3, 3), 0.4))
    assert torch.allclose(aggregate_masks([MaskVolume(0, a)]), a)


def test_aggregate_errors():
    with pytest.raises(ConfigError):
        aggregate_masks([])
    with pytest.raises(ShapeError):
        aggregate_masks([torch.zeros(1, 2, 2), torch.zeros(1, 2, 3)])


def test_mask_volume_range():
    with pytest.raises(ShapeError):
        MaskVolume(0, torch.full((1, 2, 2), 1.5))
    with pytest.raises(ShapeError):
        MaskVolume(0, torch.zeros(2, 2))


def test_cache_starts_at_zero_and_steps_decrease():
    cache = MaskCache((1, 2, 2, 3, 3))
    assert torch.count_nonzero(cache.read()) == 0
    cache.update(torch.full((1, 2, 2, 3, 3), 0.5), step=5)
    cache.update(torch.full((1, 2, 2, 3, 3), 0.25), step=4)
    assert torch.all(cache.read() == 0.25)
    with pytest.raises(MaskSessionError):
        cache.update(torch.zeros(1, 2, 2, 3, 3), step=4)
    with pytest.raises(MaskSessionError):
        cache.update(torch.zeros(1, 2, 2, 3, 3), step=6)
    with pytest.raises(ShapeError):
        cache.update(torch.zeros(1, 2, 2, 3, 2), step=1)


def test_cache_keeps_a_copy():
    cache = MaskCache((2, 2))
    src = torch.full((2, 2), 0.3)
    cache.update(src, step=1)
    src.fill_(0.9)
    assert torch.all(cache.read() == 0.3)


def test_cache_update_function_chains():
    cache = cache_update(MaskCache((2, 2)), torch.ones(2, 2), step=3)
    assert cache.last_step == 3
    assert torch.all(cache_update(cache, torch.zeros(2, 2), step=2).read() == 0)
    with pytest.raises(MaskSessionError):
        cache_update(cache, torch.ones(2, 2), step=2)


def test_downsample_gt_mask():
    gt = torch.zeros(2, 4, 4, dtype=torch.bool)
    gt[:, :2, :2] = True          # full cell
    gt[:, 0:2, 2] = True          # half cell
    gt[:, 3, 3] = True            # quarter cell
    soft, binary = downsample_gt_mask(gt, CodecConfig(ct=1, ch=2, cw=2))
    assert soft.shape == (2, 2, 2)
    assert soft[0].tolist() == [[1.0, 0.5], [0.0, 0.25]]
    assert binary[0].tolist() == [[True, False], [False, False]]


def test_downsample_needs_divisible_grid():
    with pytest.raises(ShapeError):
        downsample_gt_mask(torch.zeros(3, 4, 4, dtype=torch.bool), CodecConfig(ct=2, ch=2, cw=2))


def test_latent_frame_valid():
    valid = torch.tensor([True, True, True, False, False, False])
    assert latent_frame_valid(valid, 2).tolist() == [True, False, False]
    with pytest.raises(ShapeError):
        latent_frame_valid(valid, 4)


def _oracle_head(head, h_v, h_r, v_xyz, r_xyz):
    """Per-token loop over the reference keys."""
    d = head.head_dim
    q, _, _ = head.proj(h_v).split(d, dim=-1)
    _, k, v = head.proj(h_r).split(d, dim=-1)
    q = rope_3d(head.q_norm(q), v_xyz, head.rope_split)
    k = rope_3d(head.k_norm(k), r_xyz, head.rope_split)
    out = torch.empty(h_v.shape[0], h_v.shape[1], dtype=h_v.dtype)
    for b in range(h_v.shape[0]):
        for i in range(h_v.shape[1]):
            scores = torch.stack([q[b, i] @ k[b, j] for j in range(k.shape[1])]) / math.sqrt(d)
            attended = (scores.softmax(0)[:, None] * v[b]).sum(0)
            out[b, i] = torch.sigmoid(head.mlp(attended)).squeeze(-1)
    return out


def test_mask_head_matches_loop_oracle():
    torch.manual_seed(0)
    head = MaskPredictor(width=8, head_dim=4, rope_split=(2, 2, 0), hidden=6).double()
    randomize_(head, seed=4)
    gen = torch.Generator().manual_seed(5)
    grid = (2, 2, 3)
    h_v = torch.randn(2, 12, 8, generator=gen, dtype=torch.float64)
    h_r = torch.randn(2, 4, 8, generator=gen, dtype=torch.float64)
    v_xyz = video_coords(grid)
    r_xyz = reference_coords(torch.tensor([1]), (2, 2))[0]
    masks = mask_head_forward(head, h_v, h_r, v_xyz, r_xyz, grid)
    assert masks.shape == (2, *grid)
    assert masks.min() >= 0 and masks.max() <= 1
    expected = _oracle_head(head, h_v, h_r, v_xyz, r_xyz).reshape(2, *grid)
    assert torch.allclose(masks, expected, atol=1e-10)


def test_hook_runs_on_configured_layers(model_cfg, batch):
    cfg = ModelConfig(**{**model_cfg.to_dict(), "mask_head_layers": (1, 2)})
    model = build_model(cfg, seed=0)
    hook = MaskPredictionHook(model.mask_heads)
    model(batch.z0, 0.5, batch.conds.refs, batch.conds.text, [hook])
    assert hook.layers == [1, 2]
    agg = hook.aggregate()
    assert agg.shape == (2, 2, 4, 8, 8)
    assert torch.allclose(agg, (hook.per_layer[1] + hook.per_layer[2]) / 2)
    volumes = to_mask_volumes(agg[0], [0, 1])
    assert [v.entity_id for v in volumes] == [0, 1]


def test_default_model_heads_sit_on_last_half(model, batch):
    hook = MaskPredictionHook(model.mask_heads)
    model(batch.z0, 0.5, batch.conds.refs, batch.conds.text, [hook])
    assert hook.layers == [2]
