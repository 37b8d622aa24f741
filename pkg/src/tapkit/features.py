"""Reference frame-level acoustic parameter extractor.

Produces a (T, 25) matrix of eGeMAPS-style low-level descriptors on the same
frame grid as :func:`tapkit.signal.stft`, so row ``t`` of the matrix lines up
with row ``t`` of the spectrogram.  Unvoiced frames use fixed conventions
(zeros for pitch-derived values, floors for HNR and loudness) so every entry is
defined.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from .signal import (HOP, N_BINS, N_FFT, SAMPLE_RATE, WINDOW, SignalError,
                     Waveform, frame_signal)

PARAM_NAMES = (
    "loudness", "alphaRatio", "hammarbergIndex", "spectralSlope0_500",
    "spectralSlope500_1500", "spectralFlux", "mfcc1", "mfcc2", "mfcc3", "mfcc4",
    "F0semitone", "jitterLocal", "shimmerLocaldB", "HNRdBACF", "logRelF0_H1_H2",
    "logRelF0_H1_A3", "F1frequency", "F1bandwidth", "F1amplitudeLogRelF0",
    "F2frequency", "F2bandwidth", "F2amplitudeLogRelF0", "F3frequency",
    "F3bandwidth", "F3amplitudeLogRelF0",
)
N_PARAMS = len(PARAM_NAMES)
IDX = {name: i for i, name in enumerate(PARAM_NAMES)}

F0_MIN_HZ = 60.0
F0_MAX_HZ = 500.0
VOICING_THRESHOLD = 0.45
OCTAVE_COST = 0.01
HNR_FLOOR_DB = -20.0
HNR_CEIL_DB = 40.0
LPC_ORDER = 12
PRE_EMPHASIS = 0.97
MAX_FORMANT_BW_HZ = 600.0
MIN_FORMANT_HZ = 90.0
N_MEL = 26
LOUDNESS_EPS = 1e-10
SEMITONE_REF_HZ = 27.5
_DB_EPS = 1e-12

_FREQS = np.fft.rfftfreq(N_FFT, 1.0 / SAMPLE_RATE)


class FeatureError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Pitch and harmonicity
# ---------------------------------------------------------------------------


def _acf(x: np.ndarray) -> np.ndarray:
    spec = np.fft.rfft(x, n=2 * N_FFT)
    return np.fft.irfft(np.abs(spec) ** 2)[:N_FFT]


# autocorrelation of the analysis window, used to undo the window's taper
# (Boersma-style correction); lags past the pitch floor are never read
_WINDOW_ACF = _acf(WINDOW)
_WINDOW_ACF = _WINDOW_ACF / _WINDOW_ACF[0]


def _pitch_search(frame: np.ndarray, fs=SAMPLE_RATE):
    """Return (peak_r, lag) of the best candidate in the 60-500 Hz lag range."""
    x = frame - frame.mean()
    r = _acf(x * WINDOW)
    if r[0] <= 0.0:
        return 0.0, 0.0
    lo = int(np.floor(fs / F0_MAX_HZ))
    hi = int(np.ceil(fs / F0_MIN_HZ))
    rn = r / r[0] / _WINDOW_ACF
    seg = rn[lo - 1:hi + 2]
    peaks = np.flatnonzero((seg[1:-1] > seg[:-2]) & (seg[1:-1] >= seg[2:])) + lo
    if peaks.size == 0:
        return 0.0, 0.0
    best_score, best = -np.inf, (0.0, 0.0)
    for k in peaks:
        a, b, c = rn[k - 1], rn[k], rn[k + 1]
        denom = a - 2.0 * b + c
        shift = 0.5 * (a - c) / denom if denom < 0 else 0.0
        lag = k + shift
        peak = b - 0.25 * (a - c) * shift
        score = peak - OCTAVE_COST * np.log2(F0_MIN_HZ * lag / fs)
        if score > best_score:
            best_score, best = score, (min(peak, 1.0), lag)
    return best


def f0_autocorr(frame: np.ndarray, fs=SAMPLE_RATE):
    """Estimate pitch of one raw (unwindowed) ``N_FFT``-sample frame.

    Returns ``(f0_hz, voiced)``; unvoiced frames give ``(0.0, False)``.
    """
    peak, lag = _pitch_search(np.asarray(frame, dtype=np.float64), fs)
    if lag <= 0 or peak <= VOICING_THRESHOLD:
        return 0.0, False
    return fs / lag, True


def hnr_from_r(r: float) -> float:
    if r >= 1.0:
        return HNR_CEIL_DB
    if r <= 0.0:
        return HNR_FLOOR_DB
    return float(np.clip(10.0 * np.log10(r / (1.0 - r)), HNR_FLOOR_DB, HNR_CEIL_DB))


def hnr_acf(frame: np.ndarray, fs=SAMPLE_RATE) -> float:
    """Harmonics-to-noise ratio (dB) from the normalized ACF at the pitch lag."""
    peak, lag = _pitch_search(np.asarray(frame, dtype=np.float64), fs)
    if lag <= 0 or peak <= VOICING_THRESHOLD:
        return HNR_FLOOR_DB
    return hnr_from_r(peak)


# ---------------------------------------------------------------------------
# Formants
# ---------------------------------------------------------------------------


def levinson_durbin(r: np.ndarray, order: int):
    """Solve the autocorrelation normal equations.

    Returns ``(a, err)`` with ``a[0] == 1`` such that the prediction error
    filter is ``A(z) = sum a[k] z^-k``.
    """
    a = np.zeros(order + 1)
    a[0] = 1.0
    err = r[0]
    if err <= 0:
        raise np.linalg.LinAlgError("zero-energy autocorrelation")
    for i in range(1, order + 1):
        acc = r[i] + np.dot(a[1:i], r[i - 1:0:-1])
        k = -acc / err
        a[1:i + 1] = a[1:i + 1] + k * a[i - 1::-1][:i]
        err *= 1.0 - k * k
        if err <= 0:
            raise np.linalg.LinAlgError("non-positive prediction error")
    return a, err


def formants_lpc(frame: np.ndarray, fs=SAMPLE_RATE, n_formants=3):
    """Order-12 LPC formant tracker on one raw ``N_FFT``-sample frame.

    Pre-emphasis and the Hann window are applied here.  Returns a list of
    ``n_formants`` (frequency_hz, bandwidth_hz) pairs, zero-filled when fewer
    resonances qualify.
    """
    x = np.asarray(frame, dtype=np.float64)
    x = np.append(x[0], x[1:] - PRE_EMPHASIS * x[:-1]) * WINDOW
    out = [(0.0, 0.0)] * n_formants
    r = _acf(x)[:LPC_ORDER + 1]
    try:
        a, _ = levinson_durbin(r, LPC_ORDER)
    except np.linalg.LinAlgError:
        return out
    roots = np.roots(a)
    roots = roots[np.imag(roots) > 0]
    if roots.size == 0:
        return out
    freqs = np.angle(roots) * fs / (2 * np.pi)
    bws = -(fs / np.pi) * np.log(np.abs(roots))
    order = np.argsort(freqs)
    found = [(float(freqs[i]), float(bws[i])) for i in order
             if freqs[i] >= MIN_FORMANT_HZ and bws[i] <= MAX_FORMANT_BW_HZ]
    found = found[:n_formants]
    return found + out[len(found):]


# ---------------------------------------------------------------------------
# Spectral parameters
# ---------------------------------------------------------------------------


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_mel=N_MEL, fmin=0.0, fmax=SAMPLE_RATE / 2) -> np.ndarray:
    """(n_mel, N_BINS) triangular filters, unit peak."""
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mel + 2))
    fb = np.zeros((n_mel, N_BINS))
    for m in range(n_mel):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (_FREQS - lo) / (mid - lo)
        down = (hi - _FREQS) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def _a_weight(f):
    f2 = np.square(np.asarray(f, dtype=np.float64))
    num = 12194.0 ** 2 * f2 ** 2
    den = (f2 + 20.6 ** 2) * np.sqrt((f2 + 107.7 ** 2) * (f2 + 737.9 ** 2)) * (f2 + 12194.0 ** 2)
    ra = num / den
    return ra / (12194.0 ** 2 * 1000.0 ** 4 / ((1000.0 ** 2 + 20.6 ** 2) * np.sqrt(
        (1000.0 ** 2 + 107.7 ** 2) * (1000.0 ** 2 + 737.9 ** 2)) * (1000.0 ** 2 + 12194.0 ** 2)))


MEL_FB = mel_filterbank()
_MEL_CENTRES = _mel_to_hz(np.linspace(_hz_to_mel(0.0), _hz_to_mel(SAMPLE_RATE / 2), N_MEL + 2))[1:-1]
# power-domain equal-loudness weights, normalized to 1 at 1 kHz
LOUDNESS_WEIGHTS = _a_weight(_MEL_CENTRES) ** 2


def _band(lo, hi):
    return (_FREQS >= lo) & (_FREQS < hi)


_ALPHA_LO = _band(50.0, 1000.0)
_ALPHA_HI = _band(1000.0, 5000.0)
_HAMM_LO = _band(0.0, 2000.0)
_HAMM_HI = _band(2000.0, 5000.0)
_SLOPE_A = _band(0.0, 500.0)
_SLOPE_B = _band(500.0, 1500.0)


def _db_power(e):
    return 10.0 * np.log10(e + _DB_EPS)


def _db_mag(m):
    return 20.0 * np.log10(m + _DB_EPS)


def _slope(mag_db, mask):
    f = _FREQS[mask]
    y = mag_db[..., mask]
    fc = f - f.mean()
    return (y * fc).sum(axis=-1) / np.dot(fc, fc)


def spectral_params(mag: np.ndarray) -> dict:
    """Spectral-shape parameters of a (T, 257) magnitude spectrogram.

    Returns a dict of (T,) arrays keyed by parameter name.  Harmonic
    differences are handled in :func:`extract_taps` since they need pitch.
    """
    mag = np.atleast_2d(np.asarray(mag, dtype=np.float64))
    pw = mag ** 2
    mel = pw @ MEL_FB.T
    out = {}
    out["loudness"] = np.log10(LOUDNESS_EPS + mel @ LOUDNESS_WEIGHTS)
    silent = pw.sum(axis=1) <= 0.0
    out["alphaRatio"] = np.where(
        silent, 0.0, _db_power(pw[:, _ALPHA_LO].sum(1)) - _db_power(pw[:, _ALPHA_HI].sum(1)))
    out["hammarbergIndex"] = np.where(
        silent, 0.0, _db_mag(mag[:, _HAMM_LO].max(1)) - _db_mag(mag[:, _HAMM_HI].max(1)))
    mag_db = _db_mag(mag)
    out["spectralSlope0_500"] = np.where(silent, 0.0, _slope(mag_db, _SLOPE_A))
    out["spectralSlope500_1500"] = np.where(silent, 0.0, _slope(mag_db, _SLOPE_B))
    norms = np.linalg.norm(mag, axis=1, keepdims=True)
    unit = np.divide(mag, norms, out=np.zeros_like(mag), where=norms > 0)
    flux = np.zeros(mag.shape[0])
    flux[1:] = np.linalg.norm(unit[1:] - unit[:-1], axis=1)
    out["spectralFlux"] = flux
    logmel = np.log(mel + LOUDNESS_EPS)
    cep = dct(logmel, type=2, norm="ortho", axis=1)
    for k in range(1, 5):
        out[f"mfcc{k}"] = np.where(silent, 0.0, cep[:, k])
    return out


# ---------------------------------------------------------------------------
# Full extractor
# ---------------------------------------------------------------------------


def _harmonic_amp(mag_row, f_hz):
    """Peak magnitude within +-1 bin of ``f_hz``."""
    k = int(round(f_hz * N_FFT / SAMPLE_RATE))
    lo, hi = max(k - 1, 0), min(k + 2, N_BINS)
    if lo >= hi:
        return 0.0
    return float(mag_row[lo:hi].max())


@dataclass(frozen=True)
class AcousticMatrix:
    data: np.ndarray
    param_names: tuple = PARAM_NAMES

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 2 or d.shape[1] != len(self.param_names):
            raise FeatureError(f"expected (T, {len(self.param_names)}) matrix, got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise FeatureError("acoustic matrix has non-finite entries")
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "param_names", tuple(self.param_names))

    @property
    def n_frames(self):
        return self.data.shape[0]

    def column(self, name):
        return self.data[:, IDX[name]]


def extract_taps(w: Waveform) -> AcousticMatrix:
    """Frame-level acoustic parameters of a 16 kHz waveform."""
    if w.sample_rate_hz != SAMPLE_RATE:
        raise FeatureError(f"extractor expects {SAMPLE_RATE} Hz input, got {w.sample_rate_hz}")
    if len(w) < N_FFT:
        raise SignalError(f"signal shorter than one frame ({len(w)} < {N_FFT} samples)")
    frames = frame_signal(w.samples)
    t = frames.shape[0]
    mag = np.abs(np.fft.rfft(frames * WINDOW, n=N_FFT, axis=1))
    out = np.zeros((t, N_PARAMS))
    for name, col in spectral_params(mag).items():
        out[:, IDX[name]] = col

    out[:, IDX["HNRdBACF"]] = HNR_FLOOR_DB
    periods = np.zeros(t)
    amps = np.abs(frames).max(axis=1)
    for i in range(t):
        frame = frames[i]
        peak, lag = _pitch_search(frame)
        voiced = lag > 0 and peak > VOICING_THRESHOLD
        formants = formants_lpc(frame)
        for j, (fq, bw) in enumerate(formants, start=1):
            out[i, IDX[f"F{j}frequency"]] = fq
            out[i, IDX[f"F{j}bandwidth"]] = bw
        if not voiced:
            continue
        f0 = SAMPLE_RATE / lag
        periods[i] = lag / SAMPLE_RATE
        out[i, IDX["F0semitone"]] = 12.0 * np.log2(f0 / SEMITONE_REF_HZ)
        out[i, IDX["HNRdBACF"]] = hnr_from_r(peak)
        h1 = _harmonic_amp(mag[i], f0)
        h1_db = _db_mag(h1)
        out[i, IDX["logRelF0_H1_H2"]] = h1_db - _db_mag(_harmonic_amp(mag[i], 2 * f0))
        f3 = formants[2][0]
        if f3 > 0:
            a3 = _harmonic_amp(mag[i], f0 * max(round(f3 / f0), 1))
            out[i, IDX["logRelF0_H1_A3"]] = h1_db - _db_mag(a3)
        for j, (fq, _) in enumerate(formants, start=1):
            if fq > 0:
                aj = _harmonic_amp(mag[i], f0 * max(round(fq / f0), 1))
                out[i, IDX[f"F{j}amplitudeLogRelF0"]] = _db_mag(aj) - h1_db

    both = (periods[1:] > 0) & (periods[:-1] > 0)
    prev, cur = periods[:-1], periods[1:]
    jit = np.zeros(t)
    jit[1:] = np.where(both, np.abs(cur - prev) / np.where(both, 0.5 * (cur + prev), 1.0), 0.0)
    shim = np.zeros(t)
    with np.errstate(divide="ignore"):
        ratio = np.where(both, _db_mag(amps[1:]) - _db_mag(amps[:-1]), 0.0)
    shim[1:] = np.abs(ratio)
    out[:, IDX["jitterLocal"]] = jit
    out[:, IDX["shimmerLocaldB"]] = shim
    return AcousticMatrix(out)


# ---------------------------------------------------------------------------
# Corpus statistics and standardization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TapStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=np.float64)
        s = np.asarray(self.std, dtype=np.float64)
        if m.shape != (N_PARAMS,) or s.shape != (N_PARAMS,):
            raise FeatureError("stats must be two length-25 vectors")
        if np.any(~(s > 0)):
            bad = [PARAM_NAMES[i] for i in np.flatnonzero(~(s > 0))]
            raise FeatureError(f"degenerate parameter(s): {', '.join(bad)}")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "std", s)

    def to_dict(self):
        return {"param_names": list(PARAM_NAMES), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        if list(d.get("param_names", PARAM_NAMES)) != list(PARAM_NAMES):
            raise FeatureError("stats were computed for a different parameter list")
        return cls(np.array(d["mean"]), np.array(d["std"]))


class StatsAccumulator:
    """Mergeable (count, mean, M2) accumulator; merge order does not matter
    beyond floating-point rounding."""

    def __init__(self, n_params=N_PARAMS):
        self.count = 0
        self.mean = np.zeros(n_params)
        self.m2 = np.zeros(n_params)

    def add(self, data: np.ndarray):
        data = np.asarray(data, dtype=np.float64)
        other = StatsAccumulator(data.shape[1])
        other.count = data.shape[0]
        other.mean = data.mean(axis=0)
        other.m2 = ((data - other.mean) ** 2).sum(axis=0)
        self.merge(other)
        return self

    def merge(self, other: "StatsAccumulator"):
        n = self.count + other.count
        if other.count == 0:
            return self
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (other.count / n)
        self.m2 = self.m2 + other.m2 + delta ** 2 * (self.count * other.count / n)
        self.count = n
        return self

    def stats(self) -> TapStats:
        return TapStats(self.mean.copy(), np.sqrt(self.m2 / self.count))


def compute_stats(corpus) -> TapStats:
    """Pooled per-parameter mean and population std over all frames."""
    mats = list(corpus)
    if len(mats) < 2:
        raise FeatureError("need at least 2 matrices to compute stats")
    acc = StatsAccumulator()
    for m in mats:
        acc.add(m.data if isinstance(m, AcousticMatrix) else m)
    return acc.stats()


def standardize(a: AcousticMatrix, stats: TapStats) -> AcousticMatrix:
    return AcousticMatrix((a.data - stats.mean) / stats.std, a.param_names)


def destandardize(a: AcousticMatrix, stats: TapStats) -> AcousticMatrix:
    return AcousticMatrix(a.data * stats.std + stats.mean, a.param_names)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def write_csv(a: AcousticMatrix, path):
    buf = io.StringIO()
    buf.write(",".join(a.param_names) + "\n")
    for row in a.data:
        buf.write(",".join(f"{v:.9g}" for v in row) + "\n")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def read_csv(path) -> AcousticMatrix:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = [list(map(float, line.split(","))) for line in fh if line.strip()]
    if tuple(header) != PARAM_NAMES:
        raise FeatureError("unexpected parameter header")
    return AcousticMatrix(np.array(rows, dtype=np.float64).reshape(-1, len(header)), tuple(header))


def to_bytes(a: AcousticMatrix) -> bytes:
    """Compact form: u32 header length, JSON header, little-endian f32 rows."""
    header = json.dumps({"param_names": list(a.param_names), "frames": a.n_frames},
                        separators=(",", ":")).encode()
    return struct.pack("<I", len(header)) + header + a.data.astype("<f4").tobytes()


def from_bytes(blob: bytes) -> AcousticMatrix:
    (n,) = struct.unpack("<I", blob[:4])
    header = json.loads(blob[4:4 + n])
    names = tuple(header["param_names"])
    body = np.frombuffer(blob[4 + n:], dtype="<f4")
    if body.size != header["frames"] * len(names):
        raise FeatureError("binary acoustic matrix is truncated")
    return AcousticMatrix(body.reshape(header["frames"], len(names)).astype(np.float64), names)
