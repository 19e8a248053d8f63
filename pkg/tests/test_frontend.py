import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from uconv.frontend import (AudioBuffer, AudioError, draw_masks, extract_logmel, load_features,
                            mask_augment, normalize, num_frames, read_feat, read_wav, write_feat,
                            write_wav)


def _htk_centres():
    # independent of the module: HTK mel, 82 equally spaced points on 0..8 kHz
    top = 2595 * math.log10(1 + 8000 / 700)
    return [700 * (10 ** (top * i / 81 / 2595) - 1) for i in range(1, 81)]


def test_frame_counts():
    assert num_frames(480000) == 2998
    assert num_frames(400) == 1
    assert extract_logmel(AudioBuffer(np.zeros(480000))).shape == (2998, 80)
    with pytest.raises(AudioError, match="too short"):
        extract_logmel(AudioBuffer(np.zeros(399)))


def test_sample_rate_enforced():
    with pytest.raises(AudioError):
        AudioBuffer(np.zeros(1000), sample_rate=8000)


def test_1khz_sine_peaks_in_its_mel_bin():
    centres = _htk_centres()
    expected = min(range(80), key=lambda m: abs(centres[m] - 1000.0))
    assert expected == 28
    t = np.arange(16000) / 16000
    feats = extract_logmel(AudioBuffer(0.5 * np.sin(2 * np.pi * 1000 * t)))
    assert np.all(feats.argmax(axis=1) == expected)


@given(st.floats(0.01, 100.0), st.integers(0, 2**16))
def test_gain_shifts_logmel_by_log_c_squared(c, seed):
    x = np.random.default_rng(seed).uniform(-0.01, 0.01, 2000)
    a, b = extract_logmel(AudioBuffer(x)), extract_logmel(AudioBuffer(c * x))
    np.testing.assert_allclose(b - a, math.log(c * c), rtol=0, atol=1e-9)
    np.testing.assert_allclose(normalize(b), normalize(a), rtol=0, atol=1e-6)


def test_zero_width_masks_are_identity():
    feats = np.random.default_rng(0).standard_normal((10, 80))
    out = mask_augment(feats, seed=3, max_freq=0, time_ratio=0.0)
    np.testing.assert_array_equal(out, feats)


def test_mask_augment_deterministic_and_matches_draws():
    feats = np.random.default_rng(1).standard_normal((200, 80))
    a, b = mask_augment(feats, 7), mask_augment(feats, 7)
    np.testing.assert_array_equal(a, b)
    expected = np.zeros(feats.shape, dtype=bool)
    draws = draw_masks(200, 80, 7)
    assert [d.axis for d in draws] == ["freq", "freq", "time", "time"]
    for d in draws:
        if d.axis == "freq":
            assert 0 <= d.width <= 10
            expected[:, d.start:d.start + d.width] = True
        else:
            assert 0 <= d.width <= 10  # 5% of 200
            expected[d.start:d.start + d.width] = True
    np.testing.assert_array_equal(a[~expected], feats[~expected])
    np.testing.assert_allclose(a[expected], feats.mean())


@given(st.integers(1, 300), st.integers(0, 10**6))
def test_mask_never_touches_unmasked_cells(T, seed):
    feats = np.arange(T * 80, dtype=np.float64).reshape(T, 80) + 1e6
    out = mask_augment(feats, seed)
    changed = out != feats
    cover = np.zeros_like(changed)
    for d in draw_masks(T, 80, seed):
        if d.axis == "freq":
            cover[:, d.start:d.start + d.width] = True
        else:
            cover[d.start:d.start + d.width] = True
    assert not np.any(changed & ~cover)


def test_normalize_properties(rng):
    feats = rng.standard_normal((50, 80)) * 4 + 2
    feats[:, 5] = 3.0
    out = normalize(feats)
    assert np.all(out[:, 5] == 0)
    np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-9)
    np.testing.assert_allclose(normalize(out), out, atol=1e-9)


def test_normalize_uses_valid_frames_only(rng):
    feats = rng.standard_normal((30, 80))
    padded = np.concatenate([feats, np.full((10, 80), 99.0)])
    np.testing.assert_allclose(normalize(padded, length=30)[:30], normalize(feats), atol=1e-12)


def test_feat_round_trip_and_errors(tmp_path, rng):
    feats = rng.standard_normal((7, 80)).astype(np.float32)
    path = tmp_path / "a.feat"
    write_feat(path, feats)
    assert path.read_bytes()[:4] == b"FEAT"
    assert len(path.read_bytes()) == 12 + 7 * 80 * 4
    np.testing.assert_array_equal(read_feat(path), feats)
    np.testing.assert_array_equal(load_features(path), feats)
    path.write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(AudioError, match="magic"):
        read_feat(path)


def test_wav_round_trip(tmp_path, rng):
    samples = rng.uniform(-0.5, 0.5, 4000)
    path = tmp_path / "a.wav"
    write_wav(path, AudioBuffer(samples))
    back = read_wav(path)
    np.testing.assert_allclose(back.samples, samples, atol=1 / 32768)
    feats = load_features(path)
    assert feats.shape == (num_frames(4000), 80)
    np.testing.assert_allclose(feats.mean(axis=0), 0, atol=1e-9)
