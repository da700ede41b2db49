import pytest
import torch

from conftest import randomize_
from maskbind.errors import ConfigError, ShapeError
from maskbind.sampler import (
    SampleConfig,
    cfg_velocity,
    chain_segments,
    euler_step,
    long_video_extend,
    sample,
    time_grid,
)


def _grid(batch):
    return tuple(batch.z0.shape[1:4])


def test_skip_defaults_to_a_fifth():
    assert SampleConfig(steps=50).resolved_skip == 10
    assert SampleConfig(steps=7).resolved_skip == 1
    assert SampleConfig(steps=50, skip=0).resolved_skip == 0


def test_time_grid():
    grid = time_grid(4)
    assert grid.dtype == torch.float64
    assert grid.tolist() == [1.0, 0.75, 0.5, 0.25, 0.0]


def test_cfg_velocity_endpoints():
    gen = torch.Generator().manual_seed(0)
    v_c, v_u = torch.randn(3, 4, generator=gen), torch.randn(3, 4, generator=gen)
    assert torch.equal(cfg_velocity(v_c, v_u, 1.0), v_c)
    assert torch.equal(cfg_velocity(v_c, v_u, 0.0), v_u)
    assert torch.allclose(cfg_velocity(v_c, v_u, 6.5), v_u + 6.5 * (v_c - v_u), atol=1e-5)
    with pytest.raises(ShapeError):
        cfg_velocity(v_c, v_u[:2], 2.0)


def test_single_euler_step_with_true_velocity_recovers_data():
    z0 = torch.tensor([0.5, -1.25, 2.0], dtype=torch.float64)
    eps = torch.tensor([0.25, 1.5, -0.75], dtype=torch.float64)
    z1 = eps
    assert torch.equal(euler_step(z1, eps - z0, 1.0, 0.0), z0)
    with pytest.raises(ConfigError):
        euler_step(z1, eps - z0, 0.0, 1.0)


def test_cache_is_consumed_one_step_late(model, batch):
    cfg = SampleConfig(steps=50, cfg_scale=6.5, seed=0)
    result = sample(model, batch.conds, _grid(batch), cfg)
    per_step = model.cfg.n_blocks * 2
    assert result.audio_calls[:10] == [0] * 10
    assert result.audio_calls[10:] == [per_step] * 40
    assert torch.count_nonzero(result.consumed[0]) == 0
    for i in range(1, 50):
        assert torch.equal(result.consumed[i], result.predicted[i - 1])
    assert result.cache_steps == list(range(50, 0, -1))
    assert result.mask_trace().shape == (50, 2, 2, *_grid(batch))


def test_same_seed_is_bit_exact(model, batch):
    randomize_(model, seed=1, std=0.1)
    cfg = SampleConfig(steps=6, seed=3)
    a = sample(model, batch.conds, _grid(batch), cfg)
    b = sample(model, batch.conds, _grid(batch), cfg)
    assert torch.equal(a.latent, b.latent)
    c = sample(model, batch.conds, _grid(batch), SampleConfig(steps=6, seed=4))
    assert not torch.equal(a.latent, c.latent)


def test_skip_equal_to_steps_never_injects(model, batch):
    result = sample(model, batch.conds, _grid(batch), SampleConfig(steps=4, skip=4))
    assert result.audio_calls == [0, 0, 0, 0]


def test_same_step_bind_uses_current_masks(model, batch):
    cfg = SampleConfig(steps=3, skip=0, same_step_bind=True)
    result = sample(model, batch.conds, _grid(batch), cfg)
    for consumed, predicted in zip(result.consumed, result.predicted):
        assert torch.equal(consumed, predicted)
    assert result.audio_calls == [model.cfg.n_blocks * 2] * 3


@pytest.mark.parametrize("mode", ["global", "id_embedding"])
def test_unmasked_modes_bind_everywhere(model, batch, mode):
    result = sample(model, batch.conds, _grid(batch), SampleConfig(steps=3, skip=1, mode=mode))
    assert all(torch.all(c == 1) for c in result.consumed)
    assert result.audio_calls == [0, 4, 4]


def test_fixed_mask_mode(model, batch):
    grid = _grid(batch)
    with pytest.raises(ConfigError):
        sample(model, batch.conds, grid, SampleConfig(steps=2, mode="fixed_mask"))
    masks = torch.zeros(2, 2, *grid)
    masks[:, 0, :, :4] = 1
    result = sample(model, batch.conds, grid, SampleConfig(steps=2, skip=0, mode="fixed_mask"),
                    fixed_masks=masks)
    assert all(torch.equal(c, masks) for c in result.consumed)


def test_audio_length_must_match_grid(model, batch):
    t, h, w = _grid(batch)
    with pytest.raises(ShapeError):
        sample(model, batch.conds, (t + 1, h, w), SampleConfig(steps=2))


def test_invalid_sample_config():
    with pytest.raises(ConfigError):
        SampleConfig(steps=0).validate()
    with pytest.raises(ConfigError):
        SampleConfig(steps=5, skip=6).validate()
    with pytest.raises(ConfigError):
        SampleConfig(mode="ground_truth").validate()


def test_extension_pins_the_tail(model, batch):
    randomize_(model, seed=2, std=0.1)
    grid = _grid(batch)
    first = sample(model, batch.conds, grid, SampleConfig(steps=3))
    nxt = long_video_extend(model, first.latent, batch.conds, grid, SampleConfig(steps=3, seed=1),
                            tail=1)
    assert torch.equal(nxt.latent[:, :1], first.latent[:, -1:])
    with pytest.raises(ConfigError):
        long_video_extend(model, first.latent, batch.conds, grid, SampleConfig(steps=3), tail=0)
    with pytest.raises(ConfigError):
        long_video_extend(model, first.latent, batch.conds, grid, SampleConfig(steps=3),
                          tail=grid[0] + 1)


def test_chain_segments_length(model, batch):
    grid = _grid(batch)
    video = chain_segments(model, [batch.conds] * 3, grid, SampleConfig(steps=2), tail=1)
    assert video.shape[1] == grid[0] + 2 * (grid[0] - 1)
    with pytest.raises(ConfigError):
        chain_segments(model, [], grid, SampleConfig(steps=2), tail=1)
