"""Learned temporal acoustic parameter estimator.

``predict(y)`` maps a waveform to a (T, 25) matrix of standardized acoustic
parameters: the complex STFT is unpacked into real and imaginary halves,
log-compressed with a signed ``log1p``, and fed to a stacked GRU with a dense
per-frame head.  Training regresses the head onto the reference extractor's
output under the MAE loss with Adam.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .features import (N_PARAMS, PARAM_NAMES, AcousticMatrix, FeatureError, TapStats,
                       compute_stats, extract_taps, standardize)
from .signal import HOP, N_BINS, N_FFT, SAMPLE_RATE, Waveform, stft

logger = logging.getLogger(__name__)

INPUT_DIM = 2 * N_BINS
FRAME_GRID = {"n_fft": N_FFT, "hop": HOP, "window": "hann", "centered": False,
              "sample_rate_hz": SAMPLE_RATE}


class TrainingError(RuntimeError):
    pass


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 30
    batch: int = 1
    bptt_chunk: int = 128
    seed: int = 0
    val_fraction: float = 0.2
    hidden: int = 128
    layers: int = 2

    def validate(self):
        if not self.lr >= 0 or not np.isfinite(self.lr):
            raise ValueError("lr must be finite and non-negative")
        if self.epochs < 1 or self.batch < 1 or self.bptt_chunk < 1:
            raise ValueError("epochs, batch and bptt_chunk must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.hidden < 1 or self.layers < 1:
            raise ValueError("hidden and layers must be >= 1")
        return self


# ---------------------------------------------------------------------------
# Featurization
# ---------------------------------------------------------------------------


def slog(x):
    return np.sign(x) * np.log1p(np.abs(x))


def featurize_spec(S: np.ndarray) -> np.ndarray:
    return slog(np.concatenate([S.real, S.imag], axis=-1))


def featurize(y: Waveform) -> np.ndarray:
    """(T, 514) features: signed-log real parts then imaginary parts."""
    return featurize_spec(stft(y))


def featurize_backward(dF: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Map a feature gradient back to a complex spectrogram gradient."""
    d = dF / (1.0 + np.abs(np.concatenate([S.real, S.imag], axis=-1)))
    return d[..., :N_BINS] + 1j * d[..., N_BINS:]


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class EstimatorModel:
    params: nn.ParamStore
    stats: TapStats
    config: dict = None

    @classmethod
    def init(cls, hidden, layers, stats, seed=0, config=None):
        spec = nn.SequenceSpec(INPUT_DIM, hidden, layers, N_PARAMS)
        return cls(spec.init(seed), stats, config or {})

    @property
    def spec(self):
        return nn.SequenceSpec.from_params(self.params)

    def forward(self, features, h0=None):
        return nn.sequence_forward(features, self.params, h0)


def predict(y: Waveform, m: EstimatorModel) -> AcousticMatrix:
    """Standardized acoustic parameter estimate for ``y``."""
    out, _ = m.forward(featurize(y))
    return AcousticMatrix(out)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def split_indices(n, val_fraction, seed):
    n_val = int(np.floor(n * val_fraction))
    if n_val < 1 or n - n_val < 1:
        raise TrainingError(f"insufficient split: {n} clip(s) at val_fraction {val_fraction}")
    order = np.random.default_rng(seed).permutation(n)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _group_by_length(items):
    groups = {}
    for i, (x, _) in enumerate(items):
        groups.setdefault(x.shape[0], []).append(i)
    return [groups[k] for k in sorted(groups)]


def evaluate_mae(params, items) -> float:
    """Frame-weighted MAE of ``params`` over (features, target) pairs."""
    total, count = 0.0, 0
    for group in _group_by_length(items):
        X = np.stack([items[i][0] for i in group])
        Y = np.stack([items[i][1] for i in group])
        pred, _ = nn.sequence_forward(X, params)
        total += float(np.abs(pred - Y).sum())
        count += Y.size
    return total / count


def sequence_loss_grads(params, X, Y, chunk):
    """MAE over a (B, T, ·) batch with truncated BPTT in ``chunk``-frame windows.

    Returns ``(loss, grads)``; the hidden state is carried across windows but
    no gradient flows through the boundary.
    """
    T = X.shape[1]
    grads = params.zeros_like()
    loss = 0.0
    h = None
    for start in range(0, T, chunk):
        sl = slice(start, min(start + chunk, T))
        pred, cache = nn.sequence_forward(X[:, sl], params, h)
        h = cache.h_final
        l, g = nn.mae_loss(pred, Y[:, sl])
        w = (sl.stop - sl.start) / T
        loss += l * w
        _, pg = nn.sequence_backward(g * w, cache, params)
        for k, v in pg.items():
            grads[k] = grads[k] + v
    return loss, grads


def train_estimator(corpus, cfg: TrainConfig, targets=None):
    """Fit an estimator to the reference extractor on ``corpus`` (list of Waveform).

    ``targets`` may supply precomputed raw AcousticMatrix objects.  Returns
    ``(model, history)`` where history rows are dicts with keys ``epoch``,
    ``train_mae`` and ``val_mae``; epoch 0 is the untrained model.  The model
    with the best validation MAE is returned.
    """
    cfg.validate()
    corpus = list(corpus)
    if not corpus:
        raise TrainingError("empty corpus")
    tr_idx, va_idx = split_indices(len(corpus), cfg.val_fraction, cfg.seed)
    raw = list(targets) if targets is not None else [extract_taps(w) for w in corpus]
    try:
        stats = compute_stats([raw[i] for i in tr_idx])
    except FeatureError as exc:
        raise TrainingError(f"cannot standardize targets: {exc}") from exc
    feats = [featurize(w) for w in corpus]
    items = [(feats[i], standardize(raw[i], stats).data) for i in range(len(corpus))]
    train = [items[i] for i in tr_idx]
    val = [items[i] for i in va_idx]

    model = EstimatorModel.init(cfg.hidden, cfg.layers, stats, cfg.seed,
                                {"train": asdict(cfg)})
    params = model.params
    state = nn.AdamState.zeros(params, cfg.lr)
    rng = np.random.default_rng(cfg.seed + 1)

    history = [{"epoch": 0, "train_mae": evaluate_mae(params, train),
                "val_mae": evaluate_mae(params, val)}]
    best_val, best = history[0]["val_mae"], params.copy()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch):
            batch = [train[i] for i in order[start:start + cfg.batch]]
            grads = params.zeros_like()
            n_frames = sum(x.shape[0] for x, _ in batch)
            loss = 0.0
            for group in _group_by_length(batch):
                X = np.stack([batch[i][0] for i in group])
                Y = np.stack([batch[i][1] for i in group])
                w = X.shape[0] * X.shape[1] / n_frames
                l, g = sequence_loss_grads(params, X, Y, cfg.bptt_chunk)
                loss += w * l
                for k, v in g.items():
                    grads[k] = grads[k] + w * v
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            nn.clip_global_norm(grads)
            nn.adam_step(params, grads, state)
        row = {"epoch": epoch, "train_mae": evaluate_mae(params, train),
               "val_mae": evaluate_mae(params, val)}
        if not (np.isfinite(row["train_mae"]) and np.isfinite(row["val_mae"])):
            raise TrainingError(f"non-finite MAE at epoch {epoch}: {row}")
        history.append(row)
        logger.info("epoch %d train_mae %.4f val_mae %.4f", epoch, row["train_mae"], row["val_mae"])
        if row["val_mae"] < best_val:
            best_val, best = row["val_mae"], params.copy()
    model.params = best
    return model, history


def write_history_csv(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_mae", "val_mae"])
        for row in history:
            w.writerow([row["epoch"], repr(float(row["train_mae"])), repr(float(row["val_mae"]))])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_estimator(m: EstimatorModel, path, rng_seed=0):
    spec = m.spec
    header = {
        "model_kind": "estimator",
        "frame_grid": FRAME_GRID,
        "param_names": list(PARAM_NAMES),
        "tap_stats": m.stats.to_dict(),
        "hyperparameters": {"input_dim": spec.input_dim, "hidden": spec.hidden,
                            "layers": spec.layers, "output_dim": spec.output_dim,
                            **(m.config or {})},
        "rng_seed": rng_seed,
    }
    nn.save_checkpoint(path, m.params, header)


def load_estimator(path, expect_hidden=None, expect_layers=None) -> EstimatorModel:
    """Load an estimator checkpoint.

    Shapes always come from the file; a differing ``expect_hidden`` or
    ``expect_layers`` only triggers a warning.
    """
    params, header = nn.load_checkpoint(path)
    if header.get("model_kind") != "estimator":
        raise nn.CheckpointError(f"expected an estimator checkpoint, got {header.get('model_kind')!r}")
    if header.get("frame_grid") != FRAME_GRID:
        raise GridMismatchError(f"checkpoint frame grid {header.get('frame_grid')} != {FRAME_GRID}")
    if header.get("param_names") != list(PARAM_NAMES):
        raise GridMismatchError("checkpoint parameter list differs from this extractor")
    hp = header["hyperparameters"]
    if expect_hidden is not None and hp["hidden"] != expect_hidden:
        warnings.warn(f"checkpoint hidden={hp['hidden']} differs from requested {expect_hidden}; using checkpoint")
    if expect_layers is not None and hp["layers"] != expect_layers:
        warnings.warn(f"checkpoint layers={hp['layers']} differs from requested {expect_layers}; using checkpoint")
    extra = {k: v for k, v in hp.items() if k not in ("input_dim", "hidden", "layers", "output_dim")}
    return EstimatorModel(params, TapStats.from_dict(header["tap_stats"]), extra)
