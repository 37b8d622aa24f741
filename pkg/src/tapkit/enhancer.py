"""TAPLoss and a toy mask-based enhancer trained with the joint objective.

The TAP loss is the MAE between the frozen estimator's prediction for an
enhanced waveform and a clean-speech target matrix.  Its waveform gradient is
the chain

    MAE grad -> BPTT input grad -> signed-log / real-imag unpacking -> STFT adjoint

so any waveform-producing model can be fine-tuned against it.  The toy
enhancer (one GRU over log-magnitude frames, sigmoid mask, noisy phase) is the
stand-in base model here.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .estimator import (EstimatorModel, TrainConfig, TrainingError, featurize_backward,
                        featurize_spec, predict, split_indices)
from .features import AcousticMatrix, extract_taps, standardize
from .signal import (N_BINS, SAMPLE_RATE, SignalError, Waveform, istft, istft_adjoint,
                     n_frames, stft, stft_adjoint)

logger = logging.getLogger(__name__)

BASE_LOSSES = ("l1_waveform", "l2_spectral_magnitude")
TAP_TARGETS = ("estimator", "extractor")


@dataclass(frozen=True)
class JointLossConfig:
    base_loss: str = "l1_waveform"
    lambda_tap: float = 1.0
    estimator_path: str | None = None
    tap_target: str = "estimator"

    def validate(self):
        if self.base_loss not in BASE_LOSSES:
            raise ValueError(f"base_loss must be one of {BASE_LOSSES}")
        if not np.isfinite(self.lambda_tap) or self.lambda_tap < 0:
            raise ValueError("lambda_tap must be finite and >= 0")
        if self.tap_target not in TAP_TARGETS:
            raise ValueError(f"tap_target must be one of {TAP_TARGETS}")
        return self


def _samples(y):
    return y.samples if isinstance(y, Waveform) else np.asarray(y, dtype=np.float64)


# ---------------------------------------------------------------------------
# TAP loss
# ---------------------------------------------------------------------------


def _target_data(A_clean):
    return A_clean.data if isinstance(A_clean, AcousticMatrix) else np.asarray(A_clean, dtype=np.float64)


def tap_loss(y_enh, A_clean, est: EstimatorModel) -> float:
    """MAE between ``predict(y_enh)`` and the standardized clean matrix."""
    x = _samples(y_enh)
    target = _target_data(A_clean)
    t = n_frames(x.shape[0])
    if target.shape[0] != t:
        raise SignalError(f"frame-count mismatch: enhanced {t}, clean {target.shape[0]}")
    pred, _ = est.forward(featurize_spec(stft(x)))
    loss, _ = nn.mae_loss(pred, target)
    return loss


def tap_loss_grad(y_enh, A_clean, est: EstimatorModel):
    """Return ``(loss, dloss/dy)`` with the estimator held fixed."""
    x = _samples(y_enh)
    target = _target_data(A_clean)
    S = stft(x)
    if target.shape[0] != S.shape[0]:
        raise SignalError(f"frame-count mismatch: enhanced {S.shape[0]}, clean {target.shape[0]}")
    pred, cache = est.forward(featurize_spec(S))
    loss, g = nn.mae_loss(pred, target)
    dF, _ = nn.sequence_backward(g, cache, est.params)
    return loss, stft_adjoint(featurize_backward(dF, S), x.shape[0])


# ---------------------------------------------------------------------------
# Joint objective
# ---------------------------------------------------------------------------


def base_loss_grad(y_enh, y_clean, kind):
    x, s = _samples(y_enh), _samples(y_clean)
    if kind == "l1_waveform":
        d = x - s
        return float(np.abs(d).mean()), np.sign(d) / d.size
    if kind == "l2_spectral_magnitude":
        Se, Sc = stft(x), stft(s)
        me, mc = np.abs(Se), np.abs(Sc)
        d = me - mc
        loss = float(np.mean(d * d))
        unit = np.divide(Se, me, out=np.zeros_like(Se), where=me > 0)
        return loss, stft_adjoint(2.0 * d / d.size * unit, x.shape[0])
    raise ValueError(f"unknown base loss {kind!r}")


def joint_loss_grad(y_enh, y_clean, A_clean, cfg: JointLossConfig, est: EstimatorModel | None):
    """Return ``(total, components, dtotal/dy_enh)``."""
    x, s = _samples(y_enh), _samples(y_clean)
    if x.shape != s.shape:
        raise SignalError(f"length mismatch: enhanced {x.shape[0]}, clean {s.shape[0]}")
    l_base, g = base_loss_grad(x, s, cfg.base_loss)
    l_tap = 0.0
    if est is not None and A_clean is not None:
        l_tap, g_tap = tap_loss_grad(x, A_clean, est)
        if cfg.lambda_tap != 0.0:
            g = g + cfg.lambda_tap * g_tap
    total = l_base + cfg.lambda_tap * l_tap
    return total, {"l_base": l_base, "l_tap": l_tap, "l_total": total}, g


def joint_loss(y_enh, y_clean, A_clean, cfg: JointLossConfig, est: EstimatorModel | None):
    """``L_base + lambda_tap * L_tap``; returns ``(total, components)``."""
    total, comps, _ = joint_loss_grad(y_enh, y_clean, A_clean, cfg, est)
    return total, comps


# ---------------------------------------------------------------------------
# Enhancer
# ---------------------------------------------------------------------------


@dataclass
class EnhancerModel:
    params: nn.ParamStore
    config: dict = None

    @classmethod
    def init(cls, hidden=64, layers=1, seed=0, config=None):
        spec = nn.SequenceSpec(N_BINS, hidden, layers, N_BINS)
        return cls(spec.init(seed), config or {})

    @property
    def spec(self):
        return nn.SequenceSpec.from_params(self.params)


def enhancer_features(S):
    return np.log1p(np.abs(S))


def enhance_forward(y_noisy, m: EnhancerModel):
    """Enhance one waveform (or a (B, N) batch of equal-length ones).

    Returns ``(enhanced samples, cache)``.
    """
    x = _samples(y_noisy)
    batched = x.ndim == 2
    xs = x if batched else x[None]
    S = np.stack([stft(row) for row in xs])
    logits, seq_cache = nn.sequence_forward(enhancer_features(S), m.params)
    mask = nn.sigmoid(logits)
    out = np.stack([istft(mask[b] * S[b], xs.shape[1]).samples for b in range(xs.shape[0])])
    return (out if batched else out[0]), (S, mask, seq_cache, batched)


def enhance_backward(g_wave, cache, m: EnhancerModel):
    """Parameter gradients of a loss given its gradient w.r.t. the enhanced waveform."""
    S, mask, seq_cache, batched = cache
    g = np.asarray(g_wave, dtype=np.float64)
    gs = g if batched else g[None]
    dZ = np.stack([istft_adjoint(row, S.shape[1]) for row in gs])
    dmask = (np.conj(S) * dZ).real
    dlogits = dmask * mask * (1.0 - mask)
    _, grads = nn.sequence_backward(dlogits, seq_cache, m.params)
    return grads


def enhance(y_noisy: Waveform, m: EnhancerModel) -> Waveform:
    """Masked-STFT enhancement with the noisy phase; output length equals input length."""
    if y_noisy.sample_rate_hz != SAMPLE_RATE:
        raise SignalError(f"enhancer expects {SAMPLE_RATE} Hz input")
    out, _ = enhance_forward(y_noisy.samples, m)
    return Waveform(out, SAMPLE_RATE)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def tap_targets(cleans, est: EstimatorModel | None, kind="estimator"):
    """Per-clip TAP loss targets in the estimator's standardized space."""
    if est is None:
        return [None] * len(cleans)
    if kind == "estimator":
        return [predict(c, est).data for c in cleans]
    return [standardize(extract_taps(c), est.stats).data for c in cleans]


def pair_loss_grads(model, noisy, clean, targets, jcfg, est):
    """Joint loss and parameter gradients over a batch of equal-length pairs."""
    X = np.stack([_samples(n) for n in noisy])
    out, cache = enhance_forward(X, model)
    B = X.shape[0]
    g_wave = np.empty_like(out)
    comps = {"l_base": 0.0, "l_tap": 0.0, "l_total": 0.0}
    for b in range(B):
        _, c, g = joint_loss_grad(out[b], clean[b], targets[b], jcfg, est)
        g_wave[b] = g / B
        for k in comps:
            comps[k] += c[k] / B
    return comps, enhance_backward(g_wave, cache, model)


def _groups(indices, pairs):
    groups = {}
    for i in indices:
        groups.setdefault(len(pairs[i][0]), []).append(i)
    return [groups[k] for k in sorted(groups)]


def evaluate_joint(model, pairs, targets, jcfg, est, indices):
    sums = {"l_base": 0.0, "l_tap": 0.0, "l_total": 0.0}
    for group in _groups(indices, pairs):
        X = np.stack([pairs[i][0].samples for i in group])
        out, _ = enhance_forward(X, model)
        for b, i in enumerate(group):
            _, c = joint_loss(out[b], pairs[i][1], targets[i], jcfg, est)
            for k in sums:
                sums[k] += c[k]
    return {k: v / len(indices) for k, v in sums.items()}


def train_enhancer(pairs, jcfg: JointLossConfig, tcfg: TrainConfig, est: EstimatorModel | None,
                   hidden=64, layers=1):
    """Train the toy enhancer on (noisy, clean) Waveform pairs.

    Only the enhancer is updated; ``est`` is frozen.  History rows hold
    ``epoch``, ``split`` and the three loss components; epoch 0 is the
    untrained model.  Returns the final-epoch model and the history.
    """
    jcfg.validate()
    tcfg.validate()
    pairs = list(pairs)
    if not pairs:
        raise TrainingError("no training pairs")
    for noisy, clean in pairs:
        if len(noisy) != len(clean):
            raise SignalError("noisy/clean pair lengths differ")
    if jcfg.lambda_tap > 0 and est is None:
        raise TrainingError("lambda_tap > 0 needs an estimator")
    tr_idx, va_idx = split_indices(len(pairs), tcfg.val_fraction, tcfg.seed)
    targets = tap_targets([c for _, c in pairs], est, jcfg.tap_target)

    model = EnhancerModel.init(hidden, layers, tcfg.seed,
                               {"train": asdict(tcfg), "joint": asdict(jcfg)})
    params = model.params
    state = nn.AdamState.zeros(params, tcfg.lr)
    rng = np.random.default_rng(tcfg.seed + 1)

    def log_epoch(epoch):
        for split, idx in (("train", tr_idx), ("val", va_idx)):
            row = {"epoch": epoch, "split": split, **evaluate_joint(model, pairs, targets, jcfg, est, idx)}
            if not np.isfinite(row["l_total"]):
                raise TrainingError(f"non-finite loss at epoch {epoch} ({split})")
            history.append(row)

    history = []
    log_epoch(0)
    for epoch in range(1, tcfg.epochs + 1):
        order = tr_idx[rng.permutation(len(tr_idx))]
        for start in range(0, len(order), tcfg.batch):
            batch = order[start:start + tcfg.batch]
            grads = params.zeros_like()
            for group in _groups(batch, pairs):
                comps, g = pair_loss_grads(model, [pairs[i][0] for i in group],
                                           [pairs[i][1] for i in group],
                                           [targets[i] for i in group], jcfg, est)
                if not np.isfinite(comps["l_total"]):
                    raise TrainingError(f"non-finite loss at epoch {epoch}")
                w = len(group) / len(batch)
                for k, v in g.items():
                    grads[k] = grads[k] + w * v
            nn.clip_global_norm(grads)
            nn.adam_step(params, grads, state)
        log_epoch(epoch)
        logger.info("epoch %d %s", epoch, history[-2])
    return model, history


def write_history_csv(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "split", "l_base", "l_tap", "l_total"])
        for row in history:
            w.writerow([row["epoch"], row["split"], repr(float(row["l_base"])),
                        repr(float(row["l_tap"])), repr(float(row["l_total"]))])


def save_enhancer(m: EnhancerModel, path, rng_seed=0):
    spec = m.spec
    nn.save_checkpoint(path, m.params, {
        "model_kind": "enhancer",
        "hyperparameters": {"input_dim": spec.input_dim, "hidden": spec.hidden,
                            "layers": spec.layers, "output_dim": spec.output_dim,
                            **(m.config or {})},
        "rng_seed": rng_seed,
    })


def load_enhancer(path) -> EnhancerModel:
    params, header = nn.load_checkpoint(path)
    if header.get("model_kind") != "enhancer":
        raise nn.CheckpointError(f"expected an enhancer checkpoint, got {header.get('model_kind')!r}")
    hp = header["hyperparameters"]
    extra = {k: v for k, v in hp.items() if k not in ("input_dim", "hidden", "layers", "output_dim")}
    return EnhancerModel(params, extra)
