import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aedbench.audio_io import Waveform
from aedbench.mfcc import (ClipTooShortError, MfccConfig, extract_mfcc, frame_signal, load_cached,
                           mel_energies, n_frames, save_cached)
from oracles import oracle_mel_energies

CFG = MfccConfig()


class TestConfig:
    def test_sample_domain_lengths(self):
        assert CFG.win_len == 1323
        assert CFG.hop_len == 662
        assert CFG.fft_size == 2048 and CFG.n_mel_filters == 40 and CFG.n_coeffs == 20

    @pytest.mark.parametrize("kw", [dict(window_ms=10, hop_ms=15), dict(n_coeffs=41),
                                    dict(fft_size=1024), dict(hop_ms=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            MfccConfig(**kw)

    def test_hash_tracks_fields(self):
        assert MfccConfig().hash() == MfccConfig().hash()
        assert MfccConfig(n_mel_filters=30).hash() != MfccConfig().hash()


class TestFraming:
    def test_four_second_clip(self):
        x = np.zeros(176400)
        assert n_frames(len(x), 1323, 662) == (176400 - 1323) // 662 + 1 == 265
        m = extract_mfcc(Waveform(np.random.default_rng(0).normal(0, 0.1, 176400)))
        assert m.shape == (265, 20)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(min_value=1323, max_value=30000))
    def test_frame_count_formula(self, n):
        x = np.random.default_rng(n).normal(0, 0.1, n)
        assert frame_signal(x, 1323, 662).shape == ((n - 1323) // 662 + 1, 1323)

    def test_too_short(self):
        with pytest.raises(ClipTooShortError):
            extract_mfcc(Waveform(np.zeros(1322)))

    def test_frames_are_slices(self):
        x = np.arange(5000, dtype=float)
        F = frame_signal(x, 1323, 662)
        np.testing.assert_array_equal(F[2], x[1324:1324 + 1323])


class TestMfcc:
    def test_identical_frames_identical_rows(self):
        # a signal periodic in the hop produces identical frames
        period = np.random.default_rng(1).normal(0, 0.2, 662)
        x = np.tile(period, 10)
        m = extract_mfcc(Waveform(x))
        for row in m[1:]:
            np.testing.assert_array_equal(row, m[0])

    @pytest.mark.parametrize("kind", ["noise", "tone"])
    def test_filterbank_matches_direct_dft(self, kind):
        rng = np.random.default_rng(2)
        t = np.arange(1323) / 44100
        frame = rng.normal(0, 0.3, 1323) if kind == "noise" else 0.5 * np.sin(2 * np.pi * 1234.5 * t)
        got = mel_energies(frame, CFG)[0]
        ref = oracle_mel_energies(frame, CFG)
        mask = ref > 1e-12 * ref.max()
        np.testing.assert_allclose(got[mask], ref[mask], rtol=1e-6)
        assert np.all(got[~mask] < 1e-10 * ref.max())

    def test_amplitude_scaling_moves_only_c0(self):
        x = np.random.default_rng(3).normal(0, 0.05, 20000)
        a = extract_mfcc(Waveform(x))
        b = extract_mfcc(Waveform(2 * x))
        np.testing.assert_allclose(b[:, 1:], a[:, 1:], atol=1e-9)
        # energies scale by 4; orthonormal DCT maps a constant log offset onto c0 only
        np.testing.assert_allclose(b[:, 0] - a[:, 0], math.sqrt(40) * math.log(4.0), atol=1e-9)

    def test_silence_is_finite(self):
        m = extract_mfcc(Waveform(np.zeros(5000)))
        assert np.all(np.isfinite(m))
        np.testing.assert_allclose(m[:, 0], math.sqrt(40) * math.log(1e-10))

    @settings(max_examples=25, deadline=None)
    @given(st.floats(min_value=1e-8, max_value=1.0), st.integers(0, 2**31 - 1))
    def test_finite_for_any_level(self, amp, seed):
        x = amp * np.random.default_rng(seed).uniform(-1, 1, 3000)
        assert np.all(np.isfinite(extract_mfcc(Waveform(x))))

    def test_rejects_wrong_rate(self):
        with pytest.raises(ValueError):
            extract_mfcc(Waveform(np.zeros(5000), sample_rate=16000))


class TestCache:
    def test_round_trip_and_invalidation(self, tmp_path):
        m = extract_mfcc(Waveform(np.random.default_rng(4).normal(0, 0.1, 5000)))
        p = tmp_path / "c.npz"
        save_cached(p, m, CFG)
        np.testing.assert_array_equal(load_cached(p, CFG), m)
        assert load_cached(p, MfccConfig(n_mel_filters=30)) is None
        assert load_cached(tmp_path / "missing.npz", CFG) is None
