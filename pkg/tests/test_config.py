from typing import Optional, Tuple

import pytest

from maskbind.config import (
    RunConfig,
    coerce,
    env_overrides,
    load_config,
    parse_sections,
)
from maskbind.errors import ConfigError, ShapeError


def _load(tmp_path, text, environ=None):
    path = tmp_path / "run.ini"
    path.write_text(text, encoding="utf-8")
    return load_config(path, environ=environ or {})


def test_defaults_are_consistent():
    cfg = parse_sections({})
    assert cfg.model.latent_channels == cfg.codec.latent_channels
    assert cfg.model.audio_dim == cfg.features.audio_dim
    assert cfg.config_hash() == RunConfig().validate().config_hash()
    assert len(cfg.config_hash()) == 64


def test_hash_ignores_key_order(tmp_path):
    a = _load(tmp_path, "[train]\nlr = 0.001\nsteps = 10\n[sample]\nsteps = 20\n")
    b = _load(tmp_path, "[sample]\nsteps = 20\n[train]\nsteps = 10\nlr = 0.001\n")
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != parse_sections({}).config_hash()


def test_unknown_key_names_its_path(tmp_path):
    with pytest.raises(ConfigError) as info:
        _load(tmp_path, "[train]\nlearning_rate = 0.1\n")
    assert info.value.key_path == "train.learning_rate"


def test_unknown_section(tmp_path):
    with pytest.raises(ConfigError):
        _load(tmp_path, "[optimizer]\nlr = 0.1\n")


def test_bad_value_names_its_path(tmp_path):
    with pytest.raises(ConfigError) as info:
        _load(tmp_path, "[train]\nsteps = many\n")
    assert info.value.key_path == "train.steps"


def test_derived_model_keys_are_rejected(tmp_path):
    with pytest.raises(ConfigError) as info:
        _load(tmp_path, "[model]\nlatent_channels = 12\n")
    assert info.value.key_path == "model.latent_channels"


def test_derived_keys_follow_codec_and_features(tmp_path):
    cfg = _load(tmp_path, "[codec]\nct = 1\nch = 2\ncw = 2\n[features]\naudio_dim = 20\n")
    assert cfg.model.latent_channels == 12
    assert cfg.model.audio_dim == 20


def test_environment_overrides_file(tmp_path):
    cfg = _load(tmp_path, "[train]\nlr = 0.1\n", environ={"TRAIN__LR": "0.002", "HOME": "/x"})
    assert cfg.train.lr == 0.002
    assert env_overrides({"SAMPLE__MODE": "global", "NOPE__X": "1", "PATH": "/bin"}) == {
        "sample": {"mode": "global"}}


def test_cross_section_checks(tmp_path):
    with pytest.raises(ConfigError):
        _load(tmp_path, "[data]\nn_entities = 3\n[model]\nmax_entities = 2\n")
    with pytest.raises(ShapeError):
        _load(tmp_path, "[data]\nheight = 30\n")
    with pytest.raises(ConfigError):
        _load(tmp_path, "[sample]\nmode = ground_truth\n")


def test_coerce_types():
    assert coerce("none", Optional[int], "k") is None
    assert coerce("7", Optional[int], "k") == 7
    assert coerce("2, 2, 4", Tuple[int, int, int], "k") == (2, 2, 4)
    assert coerce("1.0,3.0", Tuple[float, ...], "k") == (1.0, 3.0)
    assert coerce("yes", bool, "k") is True
    assert coerce("off", bool, "k") is False
    with pytest.raises(ConfigError):
        coerce("1, 2", Tuple[int, int, int], "k")
    with pytest.raises(ConfigError):
        coerce("maybe", bool, "k")


def test_ini_round_trip(tmp_path):
    cfg = _load(tmp_path, "[model]\nn_blocks = 4\n[sample]\nskip = none\ncfg_scale = 3.5\n"
                          "[eval]\nmodes = global, predicted_mask\n")
    assert cfg.model.mask_head_layers == (3, 4)
    assert cfg.eval.modes == ("global", "predicted_mask")
    again = _load(tmp_path, cfg.to_ini())
    assert again.config_hash() == cfg.config_hash()


def test_malformed_file(tmp_path):
    with pytest.raises(ConfigError):
        _load(tmp_path, "lr = 0.1\n")
