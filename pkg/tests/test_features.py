import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.signal import lfilter

from tapkit.features import (HNR_CEIL_DB, HNR_FLOOR_DB, IDX, N_PARAMS, PARAM_NAMES, AcousticMatrix,
                             FeatureError, StatsAccumulator, TapStats, compute_stats, destandardize,
                             extract_taps, f0_autocorr, formants_lpc, from_bytes, hnr_acf, hnr_from_r,
                             levinson_durbin, read_csv, spectral_params, standardize, to_bytes,
                             write_csv)
from tapkit.signal import N_FFT, SignalError, Waveform, n_frames, stft
from tapkit.synthetic import all_pole, speech_like, vowel

FS = 16000


def tone(f=220.0, dur=1.0, amp=0.5):
    return amp * np.sin(2 * np.pi * f * np.arange(int(dur * FS)) / FS)


def voiced_with_floor(dur, seed):
    """Speech-like signal plus a low noise floor so that no frame is digital silence."""
    x = speech_like(dur, seed=seed).samples
    return Waveform(x + 0.003 * np.random.default_rng(seed).standard_normal(x.size))


def semitone_to_hz(st_):
    return 27.5 * 2 ** (st_ / 12)


def test_param_order_is_fixed():
    assert N_PARAMS == 25
    assert PARAM_NAMES[0] == "loudness" and PARAM_NAMES[13] == "HNRdBACF" and PARAM_NAMES[-1] == "F3amplitudeLogRelF0"
    assert PARAM_NAMES[6:10] == ("mfcc1", "mfcc2", "mfcc3", "mfcc4")


class TestPitch:
    def test_tone_frame(self):
        f0, voiced = f0_autocorr(tone()[:N_FFT])
        assert voiced and f0 == pytest.approx(220, abs=2)

    def test_white_noise_unvoiced(self):
        rng = np.random.default_rng(42)
        assert not any(f0_autocorr(rng.standard_normal(N_FFT))[1] for _ in range(20))

    def test_zero_frame(self):
        assert f0_autocorr(np.zeros(N_FFT)) == (0.0, False)

    @pytest.mark.parametrize("f", [80.0, 150.0, 310.0, 450.0])
    def test_range(self, f):
        f0, voiced = f0_autocorr(tone(f)[:N_FFT])
        assert voiced and f0 == pytest.approx(f, abs=2)

    def test_extract_tone(self):
        a = extract_taps(Waveform(tone()))
        st_ = a.column("F0semitone")
        voiced = st_ > 0
        assert voiced.mean() > 0.9
        np.testing.assert_allclose(semitone_to_hz(st_[voiced]), 220, atol=2)


class TestHNR:
    def test_periodic_clamps_high(self):
        assert hnr_acf(tone()[:N_FFT]) == HNR_CEIL_DB

    def test_unvoiced_floor(self):
        assert hnr_acf(np.zeros(N_FFT)) == HNR_FLOOR_DB

    def test_equal_power_noise_near_zero(self):
        rng = np.random.default_rng(42)
        t = np.arange(N_FFT) / FS
        vals = [hnr_acf(np.sin(2 * np.pi * 200 * t) + rng.standard_normal(N_FFT) / np.sqrt(2)) for _ in range(50)]
        assert np.mean(vals) == pytest.approx(0.0, abs=2.0)

    def test_r_mapping(self):
        assert hnr_from_r(0.5) == pytest.approx(0.0, abs=1e-12)
        assert hnr_from_r(0.9) == pytest.approx(10 * np.log10(9))
        assert hnr_from_r(1.0) == HNR_CEIL_DB and hnr_from_r(0.0) == HNR_FLOOR_DB

    def test_tone_vs_noise_margin(self):
        a_tone = extract_taps(Waveform(tone()))
        a_noise = extract_taps(Waveform(0.3 * np.random.default_rng(42).standard_normal(FS)))
        assert a_tone.column("HNRdBACF").mean() - a_noise.column("HNRdBACF").mean() >= 10


class TestFormants:
    def test_levinson_matches_solve(self):
        rng = np.random.default_rng(42)
        x = lfilter([1], [1, -0.9, 0.4], rng.standard_normal(4000))
        r = np.array([x[: len(x) - k] @ x[k:] for k in range(6)])
        a, err = levinson_durbin(r, 5)
        R = np.array([[r[abs(i - j)] for j in range(5)] for i in range(5)])
        np.testing.assert_allclose(a[1:], -np.linalg.solve(R, r[1:6]), rtol=1e-9, atol=1e-12)
        assert err > 0

    def test_single_resonator(self):
        rng = np.random.default_rng(42)
        src = lfilter([1.0], [1, -1.9, 0.9025], (np.arange(2048) % 128 == 0).astype(float))
        y = lfilter([1.0], all_pole([700.0], [110.0]), src + 1e-4 * rng.standard_normal(2048))
        (f1, bw1), *_ = formants_lpc(y[1024:1024 + N_FFT])
        assert f1 == pytest.approx(700, abs=25)

    def test_three_resonator_vowel(self):
        y = vowel((700.0, 1220.0, 2600.0), 120.0, 0.5).samples
        got = np.array([f for f, _ in formants_lpc(y[4000:4000 + N_FFT])])
        np.testing.assert_allclose(got, [700, 1220, 2600], atol=50)

    def test_zero_frame(self):
        assert formants_lpc(np.zeros(N_FFT)) == [(0.0, 0.0)] * 3


class TestSpectral:
    def test_gain_two_raises_loudness(self):
        x = voiced_with_floor(1.0, 3).samples
        d = extract_taps(Waveform(2 * x)).column("loudness") - extract_taps(Waveform(x)).column("loudness")
        np.testing.assert_allclose(d, np.log10(4), atol=1e-6)

    def test_lowpass_alpha_positive(self):
        x = tone(300) + 0.5 * tone(600)
        assert np.all(extract_taps(Waveform(x)).column("alphaRatio") > 0)

    def test_stationary_flux(self):
        # 500 Hz repeats exactly every hop; 440 Hz only leaks a little between frames
        assert np.all(extract_taps(Waveform(tone(500))).column("spectralFlux")[1:] < 1e-9)
        assert np.all(extract_taps(Waveform(tone(440))).column("spectralFlux")[1:] < 1e-3)

    def test_spectral_keys(self):
        mag = np.abs(stft(tone()))
        p = spectral_params(mag)
        assert {"loudness", "alphaRatio", "hammarbergIndex", "spectralFlux", "mfcc1"} <= set(p)
        assert all(v.shape == (mag.shape[0],) for v in p.values())


class TestExtract:
    def test_shape_lock(self):
        for n in (512, 700, 16000, 12345):
            x = np.random.default_rng(n).standard_normal(n) * 0.1
            assert extract_taps(Waveform(x)).data.shape == (n_frames(n), 25)

    def test_silence_conventions(self):
        a = extract_taps(Waveform(np.zeros(FS)))
        assert np.all(a.column("F0semitone") == 0)
        assert np.all(a.column("HNRdBACF") == HNR_FLOOR_DB)
        assert np.all(a.column("loudness") == pytest.approx(-10.0))

    def test_voicing_consistency(self):
        a = extract_taps(speech_like(2.0, seed=5))
        unv = a.column("F0semitone") == 0
        assert unv.any() and (~unv).any()
        for name in ("jitterLocal", "shimmerLocaldB", "logRelF0_H1_H2", "logRelF0_H1_A3",
                     "F1amplitudeLogRelF0", "F2amplitudeLogRelF0", "F3amplitudeLogRelF0"):
            assert np.all(a.column(name)[unv] == 0), name

    def test_deterministic(self):
        w = speech_like(1.0, seed=8)
        assert extract_taps(w).data.tobytes() == extract_taps(w).data.tobytes()

    def test_too_short(self):
        with pytest.raises(SignalError):
            extract_taps(Waveform(np.zeros(100)))

    def test_wrong_rate(self):
        with pytest.raises(FeatureError):
            extract_taps(Waveform(np.zeros(1000), 8000))

    @pytest.mark.parametrize("gain", [0.25, 0.5, 2.0])
    def test_gain_covariance(self, gain):
        w = voiced_with_floor(1.5, 11)
        a = extract_taps(w)
        b = extract_taps(Waveform(w.samples * gain))
        assert np.all((b.column("loudness") > a.column("loudness")) == (gain > 1))
        for name in ("F0semitone", "F1frequency", "F2frequency", "F3frequency", "alphaRatio", "hammarbergIndex"):
            np.testing.assert_allclose(b.column(name), a.column(name), atol=1e-6, err_msg=name)


class TestStats:
    def test_degenerate(self):
        rng = np.random.default_rng(42)
        a = rng.standard_normal((10, 25))
        a[:, 4] = 3.0
        with pytest.raises(FeatureError, match="degenerate parameter"):
            compute_stats([AcousticMatrix(a), AcousticMatrix(a[:5])])

    def test_two_values(self):
        s = compute_stats([AcousticMatrix(np.zeros((1, 25))), AcousticMatrix(np.full((1, 25), 2.0))])
        np.testing.assert_allclose(s.mean, 1.0)
        np.testing.assert_allclose(s.std, 1.0)

    def test_needs_two(self):
        with pytest.raises(FeatureError):
            compute_stats([AcousticMatrix(np.random.default_rng(0).standard_normal((5, 25)))])

    @settings(max_examples=30, deadline=None)
    @given(sizes=st.lists(st.integers(1, 30), min_size=2, max_size=6), seed=st.integers(0, 2 ** 31 - 1))
    def test_brute_force_two_pass(self, sizes, seed):
        rng = np.random.default_rng(seed)
        mats = [rng.normal(rng.uniform(-100, 100, 25), rng.uniform(0.1, 50, 25), (n, 25)) for n in sizes]
        s = compute_stats(AcousticMatrix(m) for m in mats)
        allv = np.vstack(mats)
        mean = allv.sum(axis=0) / len(allv)
        std = np.sqrt(((allv - mean) ** 2).sum(axis=0) / len(allv))
        np.testing.assert_allclose(s.mean, mean, rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(s.std, std, rtol=1e-10)

    def test_merge_commutes(self):
        rng = np.random.default_rng(42)
        a, b = rng.standard_normal((7, 25)), rng.standard_normal((13, 25)) + 4
        ab = StatsAccumulator().add(a).merge(StatsAccumulator().add(b)).stats()
        ba = StatsAccumulator().add(b).merge(StatsAccumulator().add(a)).stats()
        np.testing.assert_allclose(ab.mean, ba.mean, rtol=1e-12)
        np.testing.assert_allclose(ab.std, ba.std, rtol=1e-12)

    def test_round_trip(self):
        rng = np.random.default_rng(42)
        a = AcousticMatrix(rng.standard_normal((20, 25)) * 30 + 5)
        s = TapStats(rng.uniform(-5, 5, 25), rng.uniform(0.5, 40, 25))
        np.testing.assert_allclose(destandardize(standardize(a, s), s).data, a.data, rtol=1e-12, atol=1e-12)

    def test_self_stats(self):
        rng = np.random.default_rng(42)
        a = AcousticMatrix(rng.standard_normal((40, 25)) * 7 + 3)
        z = standardize(a, compute_stats([a, a])).data
        np.testing.assert_allclose(z.mean(axis=0), 0, atol=1e-12)
        np.testing.assert_allclose(z.std(axis=0), 1, rtol=1e-12)

    def test_scalar_oracle(self):
        a = AcousticMatrix(np.arange(50, dtype=float).reshape(2, 25))
        s = TapStats(np.full(25, 10.0), np.full(25, 4.0))
        assert standardize(a, s).data[1, 3] == (28.0 - 10.0) / 4.0

    def test_dict_round_trip(self):
        s = TapStats(np.arange(25.0), np.arange(1.0, 26.0))
        t = TapStats.from_dict(s.to_dict())
        assert np.array_equal(t.mean, s.mean) and np.array_equal(t.std, s.std)


class TestFormats:
    def test_csv_round_trip(self, tmp_path):
        a = extract_taps(speech_like(1.0, seed=2))
        write_csv(a, tmp_path / "a.csv")
        lines = (tmp_path / "a.csv").read_text().splitlines()
        assert lines[0] == ",".join(PARAM_NAMES) and len(lines) == a.n_frames + 1
        b = read_csv(tmp_path / "a.csv")
        np.testing.assert_allclose(b.data, a.data, rtol=1e-8, atol=1e-12)

    def test_binary_round_trip(self):
        a = extract_taps(speech_like(1.0, seed=2))
        b = from_bytes(to_bytes(a))
        np.testing.assert_array_equal(b.data, a.data.astype(np.float32))
        with pytest.raises(FeatureError, match="truncated"):
            from_bytes(to_bytes(a)[:-4])

    def test_matrix_rejects_nan(self):
        d = np.zeros((2, 25))
        d[0, 0] = np.nan
        with pytest.raises(FeatureError):
            AcousticMatrix(d)


def test_column_index_table():
    assert all(PARAM_NAMES[IDX[n]] == n for n in PARAM_NAMES)
