"""Objective evaluation: STOI and per-parameter acoustic MAE.

STOI follows Taal et al. (2011): 10 kHz analysis, 256-sample Hann frames with
50% overlap zero-padded to 512, removal of frames more than 40 dB below the
loudest clean frame, 15 one-third-octave bands from 150 Hz, 30-frame
(384 ms) segments, per-segment normalization with clipping at a -15 dB SDR
bound, and the mean correlation over bands and segments.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .features import PARAM_NAMES, AcousticMatrix, TapStats
from .signal import Waveform, resample

STOI_FS = 10000
STOI_FRAME = 256
STOI_HOP = 128
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA_DB = -15.0
STOI_DYN_RANGE_DB = 40.0
_EPS = np.finfo(np.float64).eps


class MetricError(ValueError):
    pass


def _stoi_window():
    # symmetric Hann without the zero end points
    return np.hanning(STOI_FRAME + 2)[1:-1]


def third_octave_matrix(fs=STOI_FS, nfft=STOI_NFFT, n_bands=STOI_BANDS, min_freq=STOI_MIN_FREQ):
    """(bands, nfft//2+1) 0/1 matrix grouping FFT bins into one-third-octave bands."""
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(n_bands)
    cf = 2.0 ** (k / 3.0) * min_freq
    fl = np.sqrt(cf * 2.0 ** ((k - 1) / 3.0) * min_freq)
    fr = np.sqrt(cf * 2.0 ** ((k + 1) / 3.0) * min_freq)
    obm = np.zeros((n_bands, f.size))
    for i in range(n_bands):
        lo = int(np.argmin((f - fl[i]) ** 2))
        hi = int(np.argmin((f - fr[i]) ** 2))
        obm[i, lo:hi] = 1.0
    return obm, cf


_OBM, STOI_CENTRES = third_octave_matrix()


def _frame_starts(n):
    return np.arange(0, max(n - STOI_FRAME, 0), STOI_HOP)


def remove_silent_frames(x, y, dyn_range=STOI_DYN_RANGE_DB):
    """Drop frames where the clean signal is ``dyn_range`` dB below its loudest
    frame, and overlap-add the survivors of both signals back together."""
    w = _stoi_window()
    starts = _frame_starts(x.shape[0])
    if starts.size == 0:
        return x[:0], y[:0]
    idx = starts[:, None] + np.arange(STOI_FRAME)[None, :]
    xf = x[idx] * w
    yf = y[idx] * w
    energy = 20.0 * np.log10(np.linalg.norm(xf, axis=1) / np.sqrt(STOI_FRAME) + _EPS)
    keep = (energy - energy.max() + dyn_range) > 0
    xf, yf = xf[keep], yf[keep]
    n_out = (xf.shape[0] - 1) * STOI_HOP + STOI_FRAME if xf.shape[0] else 0
    xs = np.zeros(n_out)
    ys = np.zeros(n_out)
    for j in range(xf.shape[0]):
        xs[j * STOI_HOP:j * STOI_HOP + STOI_FRAME] += xf[j]
        ys[j * STOI_HOP:j * STOI_HOP + STOI_FRAME] += yf[j]
    return xs, ys


def _stdft(x):
    starts = _frame_starts(x.shape[0])
    if starts.size == 0:
        return np.zeros((0, STOI_NFFT // 2 + 1), dtype=complex)
    idx = starts[:, None] + np.arange(STOI_FRAME)[None, :]
    return np.fft.rfft(x[idx] * _stoi_window(), n=STOI_NFFT, axis=1)


def band_envelopes(x):
    """(bands, frames) one-third-octave magnitude envelopes."""
    spec = _stdft(x)
    return np.sqrt(_OBM @ (np.abs(spec) ** 2).T)


def stoi_from_envelopes(X, Y):
    """Mean clipped correlation between clean and processed band envelopes."""
    n_frames = X.shape[1]
    if n_frames < STOI_SEGMENT:
        raise MetricError(f"only {n_frames} frames after silence removal; STOI needs {STOI_SEGMENT}")
    clip = 10.0 ** (-STOI_BETA_DB / 20.0)
    # (segments, bands, N) stacks
    idx = np.arange(STOI_SEGMENT)[None, :] + np.arange(n_frames - STOI_SEGMENT + 1)[:, None]
    xs = X[:, idx].transpose(1, 0, 2)
    ys = Y[:, idx].transpose(1, 0, 2)
    alpha = np.linalg.norm(xs, axis=2, keepdims=True) / (np.linalg.norm(ys, axis=2, keepdims=True) + _EPS)
    yp = np.minimum(ys * alpha, xs * (1.0 + clip))
    xc = xs - xs.mean(axis=2, keepdims=True)
    yc = yp - yp.mean(axis=2, keepdims=True)
    xc /= np.linalg.norm(xc, axis=2, keepdims=True) + _EPS
    yc /= np.linalg.norm(yc, axis=2, keepdims=True) + _EPS
    corr = (xc * yc).sum(axis=2)
    return float(np.mean(corr))


def stoi(clean: Waveform, processed: Waveform) -> float:
    """Short-Time Objective Intelligibility of ``processed`` against ``clean``."""
    if len(clean) != len(processed):
        raise MetricError(f"length mismatch: {len(clean)} vs {len(processed)}")
    if clean.sample_rate_hz != processed.sample_rate_hz:
        raise MetricError("sample rates differ")
    if not np.any(clean.samples):
        raise MetricError("clean signal is entirely silent")
    x = resample(clean, STOI_FS).samples
    y = resample(processed, STOI_FS).samples
    x, y = remove_silent_frames(x, y)
    d = stoi_from_envelopes(band_envelopes(x), band_envelopes(y))
    return float(np.clip(d, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Acoustic MAE
# ---------------------------------------------------------------------------


def acoustic_mae(a_ref: AcousticMatrix, a_sys: AcousticMatrix, stats: TapStats | None = None,
                 standardized=True) -> np.ndarray:
    """Per-parameter MAE over frames, in standardized units by default."""
    ref = a_ref.data if isinstance(a_ref, AcousticMatrix) else np.asarray(a_ref, dtype=np.float64)
    sys_ = a_sys.data if isinstance(a_sys, AcousticMatrix) else np.asarray(a_sys, dtype=np.float64)
    if ref.shape != sys_.shape:
        raise MetricError(f"shape mismatch: {ref.shape} vs {sys_.shape}")
    mae = np.abs(ref - sys_).mean(axis=0)
    if standardized:
        if stats is None:
            raise MetricError("standardized MAE needs TapStats")
        mae = mae / stats.std
    return mae


@dataclass(frozen=True)
class ImprovementRow:
    param: str
    mae_baseline: float
    mae_system: float
    improvement_pct: float | None

    @property
    def defined(self):
        return self.improvement_pct is not None


def improvement_table(mae_baseline, mae_system, names=PARAM_NAMES):
    """Rows sorted by improvement (positive = system better), undefined last."""
    base = np.asarray(mae_baseline, dtype=np.float64)
    sys_ = np.asarray(mae_system, dtype=np.float64)
    if base.shape != sys_.shape or base.shape != (len(names),):
        raise MetricError("baseline and system vectors must match the parameter list")
    rows = []
    for name, b, s in zip(names, base, sys_):
        pct = 100.0 * (b - s) / b if b > 0 else None
        rows.append(ImprovementRow(name, float(b), float(s), pct))
    defined = sorted((r for r in rows if r.defined), key=lambda r: -r.improvement_pct)
    return defined + [r for r in rows if not r.defined]


def write_improvement_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["param", "mae_baseline", "mae_system", "improvement_pct"])
        for r in rows:
            w.writerow([r.param, f"{r.mae_baseline:.9g}", f"{r.mae_system:.9g}",
                        "undefined" if r.improvement_pct is None else f"{r.improvement_pct:.6g}"])
