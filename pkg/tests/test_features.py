import logging
import math

import numpy as np
import pytest
import torch

from maskbind.errors import ConfigError, ShapeError
from maskbind.features import (
    FeatureConfig,
    TextEmbedder,
    TextTokens,
    extract_audio_features,
    make_track,
    mute_track,
    pad_token_batch,
    projection_matrix,
    raw_audio_features,
    rephrase_and_merge,
)
from maskbind.synthgen import captions
from maskbind.synthgen.scene import generate_scene

CFG = FeatureConfig(audio_dim=32, dft_bins=8, seed=0)


def test_zero_signal_has_zero_statistics():
    raw = raw_audio_features(np.zeros(16), 2, CFG)
    assert raw.shape == (8, 3 + 8)
    assert torch.count_nonzero(raw[:, :3]) == 0


@pytest.mark.parametrize("bin_index", [1, 3, 6])
def test_sinusoid_peaks_in_its_bin(bin_index):
    ct, k = 2, CFG.dft_bins
    n = torch.arange(64, dtype=torch.float64)
    signal = torch.sin(2 * math.pi * bin_index * n / (2 * k))
    raw = raw_audio_features(signal, ct, CFG)
    interior = raw[5:-5, 3:]
    assert (interior.argmax(dim=-1) == bin_index - 1).all()


def test_extraction_is_deterministic():
    signal = np.random.default_rng(0).normal(size=32)
    a = extract_audio_features(signal, 2, CFG)
    assert torch.equal(a, extract_audio_features(signal, 2, CFG))


def test_signal_length_must_divide():
    with pytest.raises(ShapeError):
        extract_audio_features(np.zeros(15), 2, CFG)


def test_shift_by_one_stride_shifts_rows():
    ct = 2
    signal = np.random.default_rng(1).normal(size=64)
    shifted = np.roll(signal, ct)
    a = extract_audio_features(signal, ct, CFG)
    b = extract_audio_features(shifted, ct, CFG)
    assert torch.allclose(b[6:26], a[5:25], atol=1e-6)


def test_mute_track_is_extract_on_zeros():
    mute = mute_track(8, 2, CFG)
    assert mute.shape == (8, 32)
    assert torch.equal(mute, extract_audio_features(np.zeros(16), 2, CFG))
    raw = raw_audio_features(np.zeros(16), 2, CFG)
    assert torch.all(raw[:, :3].var(dim=0) == 0)


def test_mute_is_entity_independent():
    sample = generate_scene(2, 2)
    a = make_track(0, sample.audio_signals[0], 2, CFG)
    b = make_track(1, sample.audio_signals[1], 2, CFG)
    assert torch.equal(a.mute_features, b.mute_features)
    assert not torch.equal(a.features, b.features)


def test_projection_is_orthonormal():
    proj = projection_matrix(CFG)
    assert proj.shape == (32, 11)
    assert torch.allclose(proj.T @ proj, torch.eye(11, dtype=torch.float64), atol=1e-12)


def test_audio_dim_too_small():
    with pytest.raises(ConfigError):
        FeatureConfig(audio_dim=4, dft_bins=8).validate()


def test_rephrase_single_entity():
    spec = generate_scene(0, 1).entities[0]
    out = rephrase_and_merge(TextTokens.from_ids([]), [spec], CFG)
    words = captions.decode_ids(out.token_ids.tolist())
    assert words[0] == "<sep>"
    assert words[1:3] == [spec.color_name, spec.shape_kind]
    assert len(words) == 4
    assert not out.truncated


def test_rephrase_orders_by_entity_id():
    specs = generate_scene(4, 2).entities
    forward = rephrase_and_merge(TextTokens.from_ids([8]), specs, CFG)
    backward = rephrase_and_merge(TextTokens.from_ids([8]), specs[::-1], CFG)
    assert torch.equal(forward.token_ids, backward.token_ids)
    words = captions.decode_ids(forward.token_ids.tolist())
    assert words.index(specs[0].color_name) < words.index(specs[1].color_name)


def test_rephrase_overflow_truncates(caplog):
    specs = generate_scene(4, 2).entities
    long_caption = TextTokens.from_ids([8] * 40)
    with caplog.at_level(logging.WARNING, logger="maskbind"):
        out = rephrase_and_merge(long_caption, specs, CFG)
    assert len(out) == CFG.max_text_len
    assert out.truncated
    assert any("truncating" in r.message for r in caplog.records)


def test_text_embedder():
    emb = TextEmbedder(FeatureConfig(text_dim=8))
    out = emb(torch.tensor([[captions.PAD_ID, 5]]))
    assert out.shape == (1, 2, 8)
    assert torch.count_nonzero(out[0, 0]) == 0
    with pytest.raises(ShapeError):
        emb(torch.tensor([captions.VOCAB_SIZE]))


def test_pad_token_batch():
    ids = pad_token_batch([TextTokens.from_ids([4, 5]), TextTokens.from_ids([6])], 4)
    assert ids.tolist() == [[4, 5, 0, 0], [6, 0, 0, 0]]
