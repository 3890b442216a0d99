from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgeasr.mel import (
    MelConfig,
    MelRingState,
    mel_band_edges,
    mel_batch,
    mel_filterbank,
    mel_push_chunk,
    n_frames,
    read_raw_f32,
    read_wav,
    synthetic_audio,
    write_wav,
)

CFG = MelConfig()


def _stream(audio, sizes, cfg=CFG):
    state = MelRingState(cfg)
    out, pos = [], 0
    for n in sizes:
        out.append(mel_push_chunk(audio[pos : pos + n], state))
        pos += n
    return np.concatenate(out), state


def test_one_window_one_frame():
    assert mel_batch(np.zeros(400)).shape == (1, 80)


def test_too_short():
    with pytest.raises(ValueError):
        mel_batch(np.zeros(399))


def test_silence_is_log_floor():
    feats = mel_batch(np.zeros(1600))
    np.testing.assert_array_equal(feats, np.full_like(feats, np.log(CFG.log_floor)))


def test_tone_frames_and_peak_band():
    t = np.arange(16000) / 16000
    feats = mel_batch(np.sin(2 * np.pi * 440 * t))
    assert feats.shape[0] == 1 + (16000 - 400) // 160 == 98
    peaks = feats.argmax(axis=1)
    assert np.all(peaks == peaks[0])
    edges = mel_band_edges(CFG)
    # band k spans edges[k]..edges[k+2]; 440 Hz must fall inside the peak band
    assert edges[peaks[0]] < 440 < edges[peaks[0] + 2]


def test_filterbank_shape_and_coverage():
    fb = mel_filterbank(CFG)
    assert fb.shape == (80, 257)
    assert np.all(fb >= 0)
    assert np.all(fb.sum(axis=1) > 0)


def test_config_validation():
    with pytest.raises(ValueError):
        MelConfig(hop=500)
    with pytest.raises(ValueError):
        MelConfig(hop=150)  # 80 ms is not a whole number of hops


def test_single_chunk_equals_batch(rng):
    a = rng.standard_normal(160 * 50)
    out, _ = _stream(a, [a.size])
    np.testing.assert_allclose(out, mel_batch(a), atol=1e-5)


def test_560ms_chunk_gives_56_frames(rng):
    state = MelRingState(CFG)
    mel_push_chunk(rng.standard_normal(8960), state)
    for _ in range(3):
        assert mel_push_chunk(rng.standard_normal(8960), state).shape == (56, 80)


def test_first_push_lag():
    state = MelRingState(CFG)
    # window spans 2.5 hops, so the first push of k hops yields k - 2 frames
    assert mel_push_chunk(np.zeros(160 * 10), state).shape[0] == 8
    assert state.carry_len == 320


def test_non_hop_chunk_rejected():
    with pytest.raises(ValueError):
        mel_push_chunk(np.zeros(100), MelRingState(CFG))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=1, max_size=12), st.integers(0, 2**31 - 1))
def test_split_equivalence_property(hops, seed):
    a = np.random.default_rng(seed).standard_normal(160 * sum(hops))
    out, state = _stream(a, [160 * h for h in hops])
    assert state.frames_emitted == n_frames(a.size, CFG) == out.shape[0]
    if out.shape[0]:
        np.testing.assert_allclose(out, mel_batch(a), atol=1e-5)


def test_state_size_constant(rng):
    state = MelRingState(CFG)
    size0 = state.nbytes()
    for _ in range(50):
        mel_push_chunk(rng.standard_normal(1280), state)
        assert state.nbytes() == size0


def test_causality(rng):
    a = rng.standard_normal(160 * 40)
    b = a.copy()
    b[160 * 20 :] = rng.standard_normal(160 * 20)
    sa, sb = MelRingState(CFG), MelRingState(CFG)
    fa = mel_push_chunk(a[: 160 * 20], sa)
    fb = mel_push_chunk(b[: 160 * 20], sb)
    np.testing.assert_array_equal(fa, fb)


def test_wav_round_trip(tmp_path):
    a = synthetic_audio(3, 0.5)
    write_wav(tmp_path / "a.wav", a)
    back, sr = read_wav(tmp_path / "a.wav")
    assert sr == 16000
    assert back.size == a.size
    assert np.abs(back - a).max() <= 1 / 32768


def test_wav_rejects_non_wav(tmp_path):
    (tmp_path / "x.wav").write_bytes(b"hello")
    with pytest.raises(ValueError):
        read_wav(tmp_path / "x.wav")


def test_raw_f32(tmp_path):
    a = np.linspace(-1, 1, 100).astype("<f4")
    a.tofile(tmp_path / "a.raw")
    np.testing.assert_array_equal(read_raw_f32(tmp_path / "a.raw"), a.astype(np.float64))


def test_synthetic_audio_deterministic():
    np.testing.assert_array_equal(synthetic_audio(5, 1.0), synthetic_audio(5, 1.0))
    assert not np.array_equal(synthetic_audio(5, 1.0), synthetic_audio(6, 1.0))
