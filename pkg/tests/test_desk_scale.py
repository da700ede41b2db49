"""Full desk-scale run: 512 two-entity scenes, default model, then the ablation.

Takes tens of minutes, so it only runs with MASKBIND_SLOW=1.
"""

import os

import pytest

from maskbind.backbone.model import build_model
from maskbind.config import RunConfig
from maskbind.eval.ablation import check_directional_claims, run_ablation
from maskbind.synthgen.dataset import make_dataset
from maskbind.trainer import Trainer

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(os.environ.get("MASKBIND_SLOW") != "1",
                       reason="desk-scale run; set MASKBIND_SLOW=1"),
]


def _mean(values):
    present = [v for v in values if v is not None]
    return sum(present) / len(present) if present else None


@pytest.fixture(scope="module")
def reports(tmp_path_factory):
    cfg = RunConfig().validate()
    data = cfg.data
    dataset = make_dataset(data.n_train, "train", data.scene(), data.n_entities)
    model = build_model(cfg.model, seed=cfg.train.seed)
    Trainer(model, cfg.train, dataset, cfg.codec, cfg.features, data.scene(),
            out_dir=tmp_path_factory.mktemp("desk"), config_hash=cfg.config_hash()
            ).run(progress=False)
    scenes = list(make_dataset(cfg.eval.n_samples, "test", data.scene(), data.n_entities))
    return run_ablation(model.eval(), scenes, cfg.eval.modes, cfg.codec, cfg.features,
                        cfg.sample, cfg.eval, data.scene())


def test_trained_model_binds_audio_to_the_right_entity(reports):
    ours = next(r for r in reports if r.mode == "predicted_mask")
    assert _mean(ours.heldout_mask_iou) >= 0.6
    assert ours.driven_attribution >= 0.5
    assert ours.driven_attribution >= 2 * abs(ours.other_attribution)
    assert ours.swap_error <= 0.2


def test_ablation_ordering(reports):
    failed = [c for c in check_directional_claims(reports) if c.passed is not True]
    assert not failed, [(c.name, c.detail) for c in failed]
