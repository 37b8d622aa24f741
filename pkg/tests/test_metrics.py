import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tapkit.features import N_PARAMS, PARAM_NAMES, TapStats
from tapkit.metrics import (MetricError, acoustic_mae, improvement_table, stoi,
                            third_octave_matrix, write_improvement_csv)
from tapkit.signal import Waveform, mix_at_snr, resample
from tapkit.synthetic import noise_like, speech_like

try:
    import pystoi
except ImportError:
    pystoi = None

needs_pystoi = pytest.mark.skipif(pystoi is None, reason="pystoi oracle not installed")


@pytest.fixture(scope="module")
def speech():
    return speech_like(2.0, seed=11)


def noisy(clean, snr, seed):
    return mix_at_snr(clean, noise_like("white", clean.duration_s, seed=seed), snr, seed=seed).noisy


class TestStoi:
    def test_self(self, speech):
        assert stoi(speech, speech) == pytest.approx(1.0, abs=1e-6)

    @pytest.mark.parametrize("g", [0.5, 2.0])
    def test_gain_invariance(self, speech, g):
        assert abs(stoi(speech, Waveform(g * speech.samples)) - stoi(speech, speech)) <= 1e-6

    def test_monotone_over_snr(self, speech):
        vals = [stoi(speech, noisy(speech, snr, 3)) for snr in (20, 10, 0)]
        assert vals[0] > vals[1] > vals[2]

    @needs_pystoi
    @pytest.mark.parametrize("seed", range(3))
    def test_matches_pystoi_at_10k(self, seed):
        c = resample(speech_like(2.0, seed=seed), 10000)
        n = resample(noise_like("pink", 2.0, seed=seed), 10000)
        y = Waveform(c.samples + 0.5 * n.samples, 10000)
        assert abs(stoi(c, y) - pystoi.stoi(c.samples, y.samples, 10000)) < 1e-10

    @needs_pystoi
    def test_close_to_pystoi_at_16k(self, speech):
        y = noisy(speech, 5, 1)
        assert abs(stoi(speech, y) - pystoi.stoi(speech.samples, y.samples, 16000)) < 5e-3

    def test_unrelated_speech_is_low(self):
        vals = [stoi(speech_like(2.0, seed=s), speech_like(2.0, seed=s + 100)) for s in range(4)]
        assert np.mean(vals) < 0.3

    @pytest.mark.xfail(strict=True, reason="white noise keeps band-envelope correlation near 0.4 "
                                           "under this algorithm; the reference implementation agrees")
    def test_unrelated_white_noise_below_03(self, speech):
        assert stoi(speech, noise_like("white", 2.0, seed=5)) < 0.3

    @needs_pystoi
    def test_white_noise_agrees_with_reference(self, speech):
        n = noise_like("white", 2.0, seed=5)
        assert abs(stoi(speech, n) - pystoi.stoi(speech.samples, n.samples, 16000)) < 5e-3

    def test_silent_processed_is_finite(self, speech):
        v = stoi(speech, Waveform(np.zeros(len(speech))))
        assert np.isfinite(v) and 0.0 <= v <= 1.0

    def test_errors(self, speech):
        with pytest.raises(MetricError, match="length"):
            stoi(speech, Waveform(speech.samples[:-1]))
        with pytest.raises(MetricError, match="silent"):
            stoi(Waveform(np.zeros(len(speech))), speech)

    def test_band_matrix(self):
        obm, cf = third_octave_matrix()
        assert obm.shape == (15, 257) and cf[0] == 150.0
        assert np.all(obm.sum(axis=0) <= 1)


def stats_with_std(std):
    return TapStats(np.zeros(N_PARAMS), np.asarray(std, dtype=np.float64))


class TestAcousticMae:
    def test_identical(self):
        A = np.random.default_rng(1).standard_normal((10, N_PARAMS))
        assert not np.any(acoustic_mae(A, A, stats_with_std(np.ones(N_PARAMS))))

    def test_constant_offset(self):
        A = np.random.default_rng(2).standard_normal((10, N_PARAMS))
        B = A.copy()
        B[:, 6] += -3.0
        std = np.full(N_PARAMS, 2.0)
        mae = acoustic_mae(A, B, stats_with_std(std))
        assert mae[6] == pytest.approx(1.5, abs=1e-12) and np.count_nonzero(mae) == 1

    @settings(max_examples=25, deadline=None)
    @given(T=st.integers(1, 12), seed=st.integers(0, 10 ** 6))
    def test_brute_force_and_triangle(self, T, seed):
        rng = np.random.default_rng(seed)
        A, B, C = (rng.standard_normal((T, N_PARAMS)) for _ in range(3))
        stats = stats_with_std(rng.uniform(0.5, 3.0, N_PARAMS))
        mae = acoustic_mae(A, B, stats)
        for p in range(N_PARAMS):
            ref = sum(abs(A[t, p] - B[t, p]) for t in range(T)) / T / stats.std[p]
            assert abs(mae[p] - ref) <= 1e-12
        assert np.all(acoustic_mae(A, C, stats) <= mae + acoustic_mae(B, C, stats) + 1e-12)

    def test_raw_space(self):
        A = np.zeros((3, N_PARAMS))
        assert acoustic_mae(A, A + 2.0, standardized=False)[0] == 2.0

    def test_errors(self):
        with pytest.raises(MetricError, match="shape"):
            acoustic_mae(np.zeros((2, 25)), np.zeros((3, 25)), stats_with_std(np.ones(25)))
        with pytest.raises(MetricError):
            acoustic_mae(np.zeros((2, 25)), np.zeros((2, 25)))


class TestImprovement:
    def test_forty_percent(self):
        rows = improvement_table(np.full(25, 0.5), np.full(25, 0.3))
        assert all(r.improvement_pct == pytest.approx(40.0, abs=1e-12) for r in rows)

    def test_equal_is_zero(self):
        v = np.random.default_rng(3).uniform(0.1, 1, 25)
        assert all(r.improvement_pct == 0.0 for r in improvement_table(v, v))

    def test_sorted_and_undefined(self):
        rng = np.random.default_rng(4)
        base, sys_ = rng.uniform(0.1, 1, 25), rng.uniform(0.1, 1, 25)
        base[3] = 0.0
        rows = improvement_table(base, sys_)
        pcts = [r.improvement_pct for r in rows[:-1]]
        assert pcts == sorted(pcts, reverse=True)
        assert rows[-1].param == PARAM_NAMES[3] and not rows[-1].defined
        ref = np.mean([100 * (b - s) / b for b, s in zip(base, sys_) if b > 0])
        assert np.mean(pcts) == pytest.approx(ref, rel=1e-12)

    def test_csv(self, tmp_path):
        base = np.full(25, 0.5)
        base[0] = 0.0
        write_improvement_csv(improvement_table(base, np.full(25, 0.3)), tmp_path / "i.csv")
        lines = (tmp_path / "i.csv").read_text().splitlines()
        assert lines[0] == "param,mae_baseline,mae_system,improvement_pct"
        assert lines[1].endswith(",40") and lines[-1].endswith(",undefined")
