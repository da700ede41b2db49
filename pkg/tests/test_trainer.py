import json
import math

import numpy as np
import pytest
import torch

from conftest import randomize_
from maskbind.backbone.model import build_model
from maskbind.errors import ConfigError, NumericError
from maskbind.synthgen import captions
from maskbind.synthgen.dataset import make_dataset
from maskbind.synthgen.scene import generate_scene
from maskbind.trainer import (
    TrainConfig,
    Trainer,
    augment_reference,
    compute_losses,
    drop_conditions,
    focal_loss,
    make_noised,
    train_step,
)


def test_focal_loss_matches_closed_form():
    pred = torch.tensor([0.8, 0.8, 0.3], dtype=torch.float64)
    target = torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)
    loss, supervised = focal_loss(pred, target, alpha=0.25, gamma=2.0)
    terms = [
        -0.25 * 0.2 ** 2 * math.log(0.8),
        -0.75 * 0.8 ** 2 * math.log(0.2),
        -0.25 * 0.7 ** 2 * math.log(0.3),
    ]
    assert supervised
    assert float(loss) == pytest.approx(sum(terms) / 3, rel=1e-12)


def test_focal_loss_respects_frame_validity():
    pred = torch.tensor([[0.9, 0.1]], dtype=torch.float64)
    target = torch.tensor([[1.0, 1.0]], dtype=torch.float64)
    valid = torch.tensor([[True, False]])
    loss, supervised = focal_loss(pred, target, valid)
    assert supervised
    assert float(loss) == pytest.approx(-0.25 * 0.1 ** 2 * math.log(0.9), rel=1e-12)
    loss, supervised = focal_loss(pred, target, torch.zeros_like(valid))
    assert not supervised
    assert float(loss) == 0.0


def test_flow_interpolation_endpoints():
    gen = torch.Generator().manual_seed(0)
    z0 = torch.randn(2, 3, 4, generator=gen)
    eps = torch.randn(2, 3, 4, generator=gen)
    noised = make_noised(z0, eps, torch.tensor([0.0, 1.0]))
    assert torch.equal(noised.z_t[0], z0[0])
    assert torch.equal(noised.z_t[1], eps[1])
    assert torch.equal(noised.target, eps - z0)


def test_crop_ratio_over_many_draws():
    sample = generate_scene(0, 1)
    rng = np.random.default_rng(0)
    crops = [augment_reference(sample, (0.7, 0.3), rng)[0] for _ in range(10000)]
    partial = [c for c in crops if c != "full"]
    assert abs(len(partial) / len(crops) - 0.7) < 0.02
    top = sum(c == "partial_top" for c in partial)
    assert abs(top / len(partial) - 0.5) < 0.03


def test_drop_conditions_drops_text_and_audio_together(batch):
    dropped = drop_conditions(batch.conds, torch.tensor([True, False]))
    assert torch.all(dropped.text[0] == captions.PAD_ID)
    assert torch.equal(dropped.text[1], batch.conds.text[1])
    assert torch.equal(dropped.audio.features[0], batch.conds.audio.mute_features[0])
    assert torch.equal(dropped.audio.features[1], batch.conds.audio.features[1])
    assert dropped.refs is batch.conds.refs


def _fixed_draws(batch, seed=0):
    gen = torch.Generator().manual_seed(seed)
    t = torch.rand(batch.batch_size, generator=gen, dtype=batch.z0.dtype)
    eps = torch.randn(batch.z0.shape, generator=gen, dtype=batch.z0.dtype)
    return t, eps, torch.zeros(batch.batch_size, dtype=torch.bool)


def test_total_is_weighted_sum(model, batch):
    randomize_(model, seed=1, std=0.2)
    cfg = TrainConfig(lambda_fm=1.0, lambda_focal=0.5)
    t, eps, drop = _fixed_draws(batch)
    losses = compute_losses(model, batch, t, eps, drop, cfg)
    assert losses.supervised
    assert float(losses.focal) > 0
    assert torch.allclose(losses.total, losses.fm + 0.5 * losses.focal)


def test_id_embedding_training_has_no_mask_loss(model, batch):
    cfg = TrainConfig(audio_mode="id_embedding", lambda_focal=3.0)
    assert cfg.effective_lambda_focal == 0.0
    t, eps, drop = _fixed_draws(batch)
    losses = compute_losses(model, batch, t, eps, drop, cfg)
    assert not losses.supervised
    assert torch.equal(losses.total, losses.fm)


def test_all_invalid_frames_are_unsupervised(model, batch):
    batch.latent_valid = torch.zeros_like(batch.latent_valid)
    t, eps, drop = _fixed_draws(batch)
    losses = compute_losses(model, batch, t, eps, drop, TrainConfig())
    assert not losses.supervised
    assert float(losses.focal) == 0.0


def test_gradients_match_finite_differences(micro_cfg, micro_batch):
    model = build_model(micro_cfg, seed=0).double()
    randomize_(model, seed=2, std=0.5)
    cfg = TrainConfig(lambda_focal=0.7)
    t = torch.tensor([0.4], dtype=torch.float64)
    eps = torch.randn(micro_batch.z0.shape, generator=torch.Generator().manual_seed(3),
                      dtype=torch.float64)
    drop = torch.tensor([False])

    def loss() -> torch.Tensor:
        return compute_losses(model, micro_batch, t, eps, drop, cfg).total

    model.zero_grad()
    loss().backward()
    params = [p for p in model.parameters()]
    analytic = torch.cat([
        (p.grad if p.grad is not None else torch.zeros_like(p)).reshape(-1) for p in params])

    h = 1e-6
    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(loss())
                flat[i] = orig - h
                down = float(loss())
                flat[i] = orig
                numeric.append((up - down) / (2 * h))
    numeric_t = torch.tensor(numeric, dtype=torch.float64)
    rel = (numeric_t - analytic).norm() / analytic.norm()
    assert float(analytic.norm()) > 0
    assert float(rel) < 1e-3


def test_train_step_records_metrics(model, batch):
    cfg = TrainConfig(batch_size=2)
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
    record = train_step(model, opt, batch, cfg, torch.Generator().manual_seed(0), step=0)
    assert record["step"] == 0 and record["phase"] == 2
    assert record["total_loss"] == pytest.approx(record["fm_loss"] + record["focal_loss"])
    assert record["supervised"]


def test_non_finite_loss_raises(model, batch):
    batch.z0[0, 0, 0, 0, 0] = float("nan")
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
    with pytest.raises(NumericError) as info:
        train_step(model, opt, batch, TrainConfig(), torch.Generator().manual_seed(0), step=4)
    assert info.value.step == 4
    assert info.value.diagnostics["seeds"] == batch.seeds


def _trainer(model_cfg, scene_cfg, codec, feat_cfg, out_dir, steps, **kwargs):
    dataset = make_dataset(4, "train", scene_cfg, n_entities=2)
    cfg = TrainConfig(steps=steps, batch_size=2, log_every=0, checkpoint_every=0, **kwargs)
    return Trainer(build_model(model_cfg, seed=0), cfg, dataset, codec, feat_cfg,
                   scene_cfg, out_dir=out_dir, config_hash="c" * 64)


def test_trainer_writes_artifacts_and_resumes(tmp_path, model_cfg, scene_cfg, codec, feat_cfg):
    straight = _trainer(model_cfg, scene_cfg, codec, feat_cfg, tmp_path / "a", 4).run(
        progress=False)

    out = tmp_path / "b"
    first = _trainer(model_cfg, scene_cfg, codec, feat_cfg, out, 2).run(progress=False)
    assert len(first) == 2
    for name in ("checkpoint.itah", "trainer_state.pt", "metrics.jsonl", "manifest.json"):
        assert (out / name).is_file()

    resumed = _trainer(model_cfg, scene_cfg, codec, feat_cfg, out, 4)
    rest = resumed.run(progress=False)
    assert [r["step"] for r in rest] == [2, 3]
    lines = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert [l["step"] for l in lines] == [0, 1, 2, 3]
    for a, b in zip(straight[2:], rest):
        assert a["total_loss"] == pytest.approx(b["total_loss"], rel=1e-5)


def test_trainer_skips_finished_run(tmp_path, model_cfg, scene_cfg, codec, feat_cfg):
    out = tmp_path / "run"
    _trainer(model_cfg, scene_cfg, codec, feat_cfg, out, 1).run(progress=False)
    again = _trainer(model_cfg, scene_cfg, codec, feat_cfg, out, 1)
    assert again.run(progress=False) == []
    assert again.step == 1


def test_two_phase_schedule(tmp_path, model_cfg, scene_cfg, codec, feat_cfg):
    history = _trainer(model_cfg, scene_cfg, codec, feat_cfg, None, 2, two_phase=True,
                       phase1_steps=1).run(progress=False)
    assert [r["phase"] for r in history] == [1, 2]


@pytest.mark.parametrize("kwargs", [
    {"p_drop": 1.5},
    {"crop_ratio": (0.5, 0.6)},
    {"audio_mode": "global"},
    {"focal_targets": "none"},
    {"two_phase": True, "phase1_steps": 0},
    {"lambda_focal": -1.0},
])
def test_invalid_train_config(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs).validate()
