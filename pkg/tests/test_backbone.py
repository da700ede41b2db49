import math

import pytest
import torch

from conftest import randomize_
from maskbind.backbone.blocks import attention
from maskbind.backbone.model import (
    ModelConfig,
    build_model,
    load_checkpoint,
    read_checkpoint_meta,
    save_checkpoint,
)
from maskbind.backbone.rope import check_split, rope_3d
from maskbind.backbone.state import ReferenceSet, reference_coords, text_coords, video_coords
from maskbind.errors import ConfigError, ShapeError
from maskbind.io import container
from maskbind.layout import default_mask_layers


def test_rope_is_identity_at_origin():
    x = torch.randn(2, 5, 8, generator=torch.Generator().manual_seed(0))
    out = rope_3d(x, torch.zeros(5, 3, dtype=torch.long), (2, 2, 4))
    assert torch.allclose(out, x)


def test_rope_preserves_norm():
    gen = torch.Generator().manual_seed(1)
    x = torch.randn(3, 6, 8, generator=gen, dtype=torch.float64)
    coords = torch.randint(-5, 9, (6, 3), generator=gen)
    out = rope_3d(x, coords, (2, 2, 4))
    assert torch.allclose(out.norm(dim=-1), x.norm(dim=-1), atol=1e-12)


def test_rope_scores_depend_on_relative_offset():
    gen = torch.Generator().manual_seed(2)
    q = torch.randn(1, 8, generator=gen, dtype=torch.float64)
    k = torch.randn(1, 8, generator=gen, dtype=torch.float64)
    split = (2, 2, 4)

    def score(a, b):
        qa = rope_3d(q, torch.tensor([a]), split)
        kb = rope_3d(k, torch.tensor([b]), split)
        return float((qa * kb).sum())

    shift = [3, -2, 5]
    a, b = [1, 2, 0], [-4, 1, 2]
    moved_a = [x + s for x, s in zip(a, shift)]
    moved_b = [x + s for x, s in zip(b, shift)]
    assert score(a, b) == pytest.approx(score(moved_a, moved_b), abs=1e-5)


def test_rope_split_validation():
    with pytest.raises(ConfigError):
        check_split((2, 2, 2), 8)
    with pytest.raises(ConfigError):
        check_split((3, 1, 4), 8)
    with pytest.raises(ShapeError):
        rope_3d(torch.zeros(4, 8), torch.zeros(3, 3), (2, 2, 4))


def test_stream_coordinates_never_collide():
    video = video_coords((2, 3, 3))
    refs = reference_coords(torch.tensor([0, 2]), (3, 3)).reshape(-1, 3)
    text = text_coords(4, max_entities=3)
    all_coords = torch.cat([video, refs, text])
    assert torch.unique(all_coords, dim=0).shape[0] == all_coords.shape[0]
    assert refs[:, 0].unique().tolist() == [-3, -1]
    assert text[:, 0].tolist() == [-4, -5, -6, -7]


def test_single_key_attention_returns_value():
    gen = torch.Generator().manual_seed(3)
    q = torch.randn(1, 1, 4, 8, generator=gen)
    k = torch.randn(1, 1, 1, 8, generator=gen)
    v = torch.randn(1, 1, 1, 8, generator=gen)
    out = attention(q, k, v)
    assert torch.allclose(out, v.expand_as(out), atol=1e-6)


def test_attention_key_mask_matches_oracle():
    gen = torch.Generator().manual_seed(4)
    q = torch.randn(1, 1, 2, 4, generator=gen, dtype=torch.float64)
    k = torch.randn(1, 1, 3, 4, generator=gen, dtype=torch.float64)
    v = torch.randn(1, 1, 3, 4, generator=gen, dtype=torch.float64)
    valid = torch.tensor([[True, False, True]])
    out = attention(q, k, v, valid)
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(4)
    scores[..., 1] = float("-inf")
    expected = scores.softmax(-1) @ v
    assert torch.allclose(out, expected, atol=1e-12)


def test_default_mask_layers():
    assert default_mask_layers(6) == (4, 5, 6)
    assert default_mask_layers(5) == (3, 4, 5)
    assert default_mask_layers(1) == (1,)
    assert ModelConfig(n_blocks=4).mask_head_layers == (3, 4)


def test_blocks_are_identity_at_init(model, batch):
    state = model.embed_inputs(batch.z0, 0.5, batch.conds.refs, batch.conds.text)
    out = model.block_forward(state, 1)
    assert torch.equal(out.video, state.video)
    assert torch.equal(out.refs, state.refs)


def test_velocity_is_zero_at_init(model, batch):
    v = model(batch.z0, 0.3, batch.conds.refs, batch.conds.text)
    assert v.shape == batch.z0.shape
    assert torch.count_nonzero(v) == 0


def test_forward_is_deterministic(model_cfg, batch):
    a, b = build_model(model_cfg, seed=5), build_model(model_cfg, seed=5)
    randomize_(a, seed=1)
    randomize_(b, seed=1)
    va = a(batch.z0, 0.7, batch.conds.refs, batch.conds.text)
    vb = b(batch.z0, 0.7, batch.conds.refs, batch.conds.text)
    assert torch.equal(va, vb)
    assert torch.count_nonzero(va) > 0


def test_predict_velocity_unpacks_conditions(model, batch):
    randomize_(model, seed=2)
    direct = model(batch.z0, 0.4, batch.conds.refs, batch.conds.text)
    assert torch.equal(model.predict_velocity(batch.z0, 0.4, batch.conds), direct)


def test_parameters_do_not_depend_on_reference_count(model, batch):
    count = model.parameter_count()
    refs = batch.conds.refs
    for n in (1, 2):
        sub = ReferenceSet(refs.latents[:, :n], refs.entity_ids[:n])
        v = model(batch.z0, 0.5, sub, batch.conds.text)
        assert v.shape == batch.z0.shape
    assert model.parameter_count() == count


def test_video_output_is_invariant_to_reference_order(model, batch):
    randomize_(model, seed=2, std=0.3)
    refs = batch.conds.refs
    v = model(batch.z0, 0.4, refs, batch.conds.text)
    v_perm = model(batch.z0, 0.4, refs.permuted([1, 0]), batch.conds.text)
    assert torch.allclose(v, v_perm, rtol=1e-4, atol=1e-4)


def test_timestep_changes_modulation(model, batch):
    s0 = model.embed_inputs(batch.z0, 0.0)
    s1 = model.embed_inputs(batch.z0, 1.0)
    assert not torch.allclose(s0.t_mod, s1.t_mod)


def test_entity_id_out_of_range(model, batch):
    refs = ReferenceSet(batch.conds.refs.latents, torch.tensor([0, 3]))
    with pytest.raises(ShapeError):
        model(batch.z0, 0.5, refs)


def test_latent_channel_mismatch(model):
    with pytest.raises(ShapeError):
        model(torch.zeros(1, 2, 2, 2, 5), 0.5)


def test_checkpoint_round_trip(tmp_path, model_cfg, batch):
    model = build_model(model_cfg, seed=0)
    randomize_(model, seed=3, std=0.2)
    path = tmp_path / "model.itah"
    digest = save_checkpoint(model, path, extra={"step": 7})
    assert len(digest) == 64
    loaded, meta = load_checkpoint(path)
    assert meta["extra"] == {"step": 7}
    assert loaded.cfg == model.cfg
    for (name, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), name
    assert read_checkpoint_meta(container.read_records(path))["model_config"]["width"] == 16


@pytest.mark.parametrize("kwargs", [
    {"width": 15},
    {"mask_head_layers": (0,)},
    {"mask_head_layers": (9,)},
    {"n_blocks": 0},
    {"max_entities": 0},
])
def test_invalid_model_config(kwargs):
    base = dict(n_blocks=2, width=16, heads=2, head_dim=8, rope_split=(2, 2, 4))
    base.update(kwargs)
    with pytest.raises(ConfigError):
        ModelConfig(**base).validate()
