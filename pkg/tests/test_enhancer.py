import numpy as np
import pytest

from tapkit import nn
from tapkit.enhancer import (EnhancerModel, JointLossConfig, base_loss_grad, enhance,
                             joint_loss, load_enhancer, save_enhancer, tap_loss,
                             tap_loss_grad, tap_targets, train_enhancer, write_history_csv)
from tapkit.estimator import TrainConfig, TrainingError, predict
from tapkit.features import extract_taps, standardize
from tapkit.gradcheck import run_scope, tiny_estimator
from tapkit.signal import SignalError, Waveform, cola_interior, istft, mix_at_snr, stft
from tapkit.synthetic import harmonic_tone, noise_like


def saturated(value, hidden=4):
    m = EnhancerModel.init(hidden, 1, seed=0)
    m.params["head.W"] = np.zeros_like(m.params["head.W"])
    m.params["head.b"] = np.full(257, value)
    return m


@pytest.fixture(scope="module")
def est():
    return tiny_estimator(0, hidden=8, layers=1)


@pytest.fixture(scope="module")
def clip():
    rng = np.random.default_rng(42)
    return Waveform(0.1 * rng.standard_normal(4000))


class TestTapLoss:
    def test_zero_at_own_prediction(self, est, clip):
        A = predict(clip, est)
        loss, g = tap_loss_grad(clip, A, est)
        assert loss == 0.0 and not np.any(g)

    def test_single_deviation(self, est, clip):
        A = predict(clip, est).data.copy()
        A[3, 4] += 1.0
        assert tap_loss(clip, A, est) == pytest.approx(1.0 / (A.shape[0] * 25), abs=1e-15)

    def test_matches_mae_composition(self, est, clip):
        rng = np.random.default_rng(1)
        A = rng.standard_normal((predict(clip, est).data.shape))
        expected, _ = nn.mae_loss(predict(clip, est).data, A)
        assert abs(tap_loss(clip, A, est) - expected) <= 1e-12

    def test_frame_mismatch(self, est, clip):
        with pytest.raises(SignalError, match="frame-count"):
            tap_loss(clip, np.zeros((3, 25)), est)

    def test_nonnegative(self, est, clip):
        rng = np.random.default_rng(2)
        for _ in range(5):
            A = rng.standard_normal(predict(clip, est).data.shape)
            assert tap_loss(clip, A, est) > 0

    def test_gradient_finite_difference(self):
        assert run_scope("taploss")["taploss"].max_rel_err < 1e-3


class TestJointLoss:
    def test_identical(self, est, clip):
        A = predict(clip, est)
        for base in ("l1_waveform", "l2_spectral_magnitude"):
            _, c = joint_loss(clip, clip, A, JointLossConfig(base_loss=base), est)
            assert c["l_base"] == 0.0 and c["l_tap"] == 0.0

    def test_lambda_zero(self, est, clip):
        rng = np.random.default_rng(3)
        other = Waveform(clip.samples + 0.01 * rng.standard_normal(len(clip)))
        total, c = joint_loss(other, clip, predict(clip, est), JointLossConfig(lambda_tap=0.0), est)
        assert total == c["l_base"] and c["l_tap"] > 0

    def test_independent_recomputation(self, est, clip):
        rng = np.random.default_rng(4)
        other = Waveform(clip.samples + 0.05 * rng.standard_normal(len(clip)))
        A = predict(clip, est)
        for base in ("l1_waveform", "l2_spectral_magnitude"):
            total, c = joint_loss(other, clip, A, JointLossConfig(base_loss=base, lambda_tap=0.7), est)
            if base == "l1_waveform":
                lb = np.mean(np.abs(other.samples - clip.samples))
            else:
                lb = np.mean((np.abs(stft(other)) - np.abs(stft(clip))) ** 2)
            lt = np.mean(np.abs(predict(other, est).data - A.data))
            assert abs(c["l_base"] - lb) <= 1e-12 and abs(c["l_tap"] - lt) <= 1e-12
            assert abs(total - (lb + 0.7 * lt)) <= 1e-12

    def test_length_mismatch(self, est, clip):
        short = Waveform(clip.samples[:-10])
        with pytest.raises(SignalError, match="length"):
            joint_loss(short, clip, None, JointLossConfig(), None)

    def test_spectral_gradient(self, clip):
        rng = np.random.default_rng(5)
        x = clip.samples + 0.05 * rng.standard_normal(len(clip))
        _, g = base_loss_grad(x, clip.samples, "l2_spectral_magnitude")
        d = rng.standard_normal(len(x))
        h = 1e-6
        fd = (base_loss_grad(x + h * d, clip.samples, "l2_spectral_magnitude")[0]
              - base_loss_grad(x - h * d, clip.samples, "l2_spectral_magnitude")[0]) / (2 * h)
        assert abs(fd - g @ d) <= 1e-6 * abs(fd)

    def test_config_validation(self):
        for bad in (dict(base_loss="l3"), dict(lambda_tap=-1.0), dict(lambda_tap=np.inf),
                    dict(tap_target="oracle")):
            with pytest.raises(ValueError):
                JointLossConfig(**bad).validate()

    def test_full_chain_gradient(self):
        r = run_scope("joint")
        assert all(rep.max_rel_err < 1e-3 for rep in r.values())


class TestEnhance:
    def test_identity_mask(self, clip):
        out = enhance(clip, saturated(60.0))
        ref = istft(stft(clip), len(clip)).samples
        sl = cola_interior(len(clip))
        assert np.abs(out.samples[sl] - ref[sl]).max() < 1e-6
        assert np.abs(out.samples[sl] - clip.samples[sl]).max() < 1e-6

    def test_zero_mask(self, clip):
        out = enhance(clip, saturated(-800.0))
        assert np.abs(out.samples).max() == 0.0

    def test_length_and_determinism(self):
        m = EnhancerModel.init(4, 1, seed=1)
        y = Waveform(0.1 * np.random.default_rng(0).standard_normal(5000))
        a, b = enhance(y, m), enhance(y, m)
        assert len(a) == 5000 and a.samples.tobytes() == b.samples.tobytes()

    def test_wrong_rate(self):
        with pytest.raises(SignalError):
            enhance(Waveform(np.zeros(4000), 8000), EnhancerModel.init(4, 1))

    def test_checkpoint_round_trip(self, tmp_path, clip):
        m = EnhancerModel.init(4, 1, seed=2, config={"note": "x"})
        save_enhancer(m, tmp_path / "e.tapk")
        m2 = load_enhancer(tmp_path / "e.tapk")
        assert enhance(clip, m).samples.tobytes() == enhance(clip, m2).samples.tobytes()
        assert m2.config["note"] == "x"


def tone_pairs(n, seed, dur=0.5):
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        tone = harmonic_tone(rng.uniform(120, 260), 3, dur, rng)
        mix = mix_at_snr(tone, noise_like("white", dur, seed=seed * 50 + i), rng.uniform(0, 5), seed=i)
        pairs.append((mix.noisy, mix.clean))
    return pairs


def snr_db(clean, est):
    sl = cola_interior(len(clean))
    c, e = clean.samples[sl], est.samples[sl]
    return 10 * np.log10(np.sum(c ** 2) / np.sum((c - e) ** 2))


class TestTraining:
    def test_training_improves_held_out_snr(self):
        pairs = tone_pairs(10, 1)
        m, hist = train_enhancer(pairs, JointLossConfig(lambda_tap=0.0), TrainConfig(lr=1e-2, epochs=12, seed=0),
                                 None, hidden=16)
        noisy, clean = tone_pairs(1, 99)[0]
        assert snr_db(clean, enhance(noisy, m)) > snr_db(clean, noisy)
        assert {r["split"] for r in hist} == {"train", "val"}

    def test_lambda_changes_first_step(self, est):
        pairs = tone_pairs(5, 2, dur=0.25)
        tcfg = TrainConfig(lr=1e-2, epochs=1, seed=0)
        a, _ = train_enhancer(pairs, JointLossConfig(lambda_tap=0.0), tcfg, est, hidden=4)
        b, _ = train_enhancer(pairs, JointLossConfig(lambda_tap=1.0), tcfg, est, hidden=4)
        assert not a.params.equal(b.params)

    def test_bit_identical_runs(self, est, tmp_path):
        pairs = tone_pairs(5, 3, dur=0.25)
        tcfg = TrainConfig(lr=1e-2, epochs=2, seed=4)
        a, ha = train_enhancer(pairs, JointLossConfig(), tcfg, est, hidden=4)
        b, hb = train_enhancer(pairs, JointLossConfig(), tcfg, est, hidden=4)
        assert a.params.equal(b.params) and ha == hb
        write_history_csv(ha, tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "epoch,split,l_base,l_tap,l_total" and len(lines) == 1 + len(ha)

    def test_errors(self, est):
        tcfg = TrainConfig(epochs=1)
        with pytest.raises(TrainingError, match="no training pairs"):
            train_enhancer([], JointLossConfig(), tcfg, est)
        with pytest.raises(TrainingError, match="estimator"):
            train_enhancer(tone_pairs(5, 4, 0.25), JointLossConfig(lambda_tap=1.0), tcfg, None)
        a = Waveform(np.zeros(4000))
        with pytest.raises(SignalError):
            train_enhancer([(a, Waveform(np.zeros(3999)))] * 5, JointLossConfig(lambda_tap=0.0), tcfg, None)

    def test_targets(self, est, clip):
        (t_est,) = tap_targets([clip], est, "estimator")
        (t_ext,) = tap_targets([clip], est, "extractor")
        assert np.array_equal(t_est, predict(clip, est).data)
        assert np.array_equal(t_ext, standardize(extract_taps(clip), est.stats).data)
        assert tap_targets([clip], None) == [None]
