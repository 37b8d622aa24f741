"""Signal substrate: WAV I/O, resampling, STFT on the shared frame grid, mixing
and the software channel degrader.

All STFTs in the package use one grid: 512-point FFT, hop 256, periodic Hann,
no centering.  With that grid the frame count of a signal of ``n`` samples is
``(n - 512) // 256 + 1``.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass
from math import gcd
from pathlib import Path

import numpy as np
from scipy import signal as sps

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
N_FFT = 512
HOP = 256
N_BINS = N_FFT // 2 + 1
WINDOW = sps.get_window("hann", N_FFT, fftbins=True)

# denominator floor for weighted overlap-add; the interior minimum of
# sum(w^2) for Hann at 50% overlap is exactly 0.5, so only the edges are hit
_OLA_FLOOR = 0.5


class SignalError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise SignalError("waveform must be mono (1-D)")
        if not np.all(np.isfinite(x)):
            raise SignalError("waveform contains non-finite samples")
        if int(self.sample_rate_hz) <= 0:
            raise SignalError("sample rate must be positive")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self):
        return len(self) / self.sample_rate_hz


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


def load_wav(path, downmix=False) -> Waveform:
    """Read a 16-bit PCM RIFF/WAVE file.

    Stereo input is rejected unless ``downmix`` is set, in which case the
    channels are averaged.
    """
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise SignalError("malformed container: missing RIFF/WAVE header")

    fmt = None
    pcm = None
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise SignalError(f"malformed container: truncated {cid.decode('latin-1')!r} chunk")
        if cid == b"fmt ":
            if size < 16:
                raise SignalError("malformed container: short fmt chunk")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            pcm = body
        pos += 8 + size + (size & 1)

    if fmt is None or pcm is None:
        raise SignalError("malformed container: missing fmt or data chunk")
    audio_format, channels, rate, _, block_align, bits = fmt
    if audio_format not in (1, 0xFFFE) or bits != 16:
        raise SignalError(f"unsupported codec: format {audio_format}, {bits}-bit")
    if len(pcm) == 0:
        raise SignalError("zero-length data chunk")
    if channels > 1 and not downmix:
        raise SignalError(f"{channels}-channel file; pass downmix=True")

    n = len(pcm) // block_align
    x = np.frombuffer(pcm[: n * block_align], dtype="<i2").astype(np.float64)
    x = x.reshape(n, channels).mean(axis=1) / 32768.0
    return Waveform(x, rate)


def save_wav(w: Waveform, path) -> int:
    """Write ``w`` as 16-bit mono PCM. Returns the number of clipped samples."""
    x = w.samples
    clipped = int(np.count_nonzero(np.abs(x) > 1.0))
    if clipped:
        logger.warning("%s: %d samples clipped to [-1, 1]", path, clipped)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    payload = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, w.sample_rate_hz,
                                    2 * w.sample_rate_hz, 2, 16)
    header += b"data" + struct.pack("<I", len(payload))
    try:
        Path(path).write_bytes(header + payload)
    except OSError as exc:
        raise SignalError(f"unwritable path {path}: {exc}") from exc
    return clipped


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def _resample_filter(up, down, taps_per_phase=32, beta=8.6):
    factor = max(up, down)
    numtaps = taps_per_phase * factor + 1
    h = sps.firwin(numtaps, 1.0 / factor, window=("kaiser", beta))
    return h * up


def resample(w: Waveform, target_hz: int) -> Waveform:
    """Kaiser-windowed sinc polyphase resampling to ``target_hz``."""
    target_hz = int(target_hz)
    if target_hz <= 0:
        raise SignalError("target rate must be positive")
    if target_hz == w.sample_rate_hz:
        return Waveform(w.samples.copy(), target_hz)
    g = gcd(target_hz, w.sample_rate_hz)
    up, down = target_hz // g, w.sample_rate_hz // g
    y = sps.resample_poly(w.samples, up, down, window=_resample_filter(up, down))
    n_out = int(round(len(w) * target_hz / w.sample_rate_hz))
    if y.shape[0] >= n_out:
        y = y[:n_out]
    else:
        y = np.pad(y, (0, n_out - y.shape[0]))
    return Waveform(y, target_hz)


def ensure_rate(w: Waveform, rate=SAMPLE_RATE) -> Waveform:
    return w if w.sample_rate_hz == rate else resample(w, rate)


# ---------------------------------------------------------------------------
# STFT and its linear relatives
# ---------------------------------------------------------------------------


def n_frames(n_samples: int) -> int:
    if n_samples < N_FFT:
        raise SignalError(f"signal shorter than one frame ({n_samples} < {N_FFT} samples)")
    return (n_samples - N_FFT) // HOP + 1


def frame_signal(x: np.ndarray) -> np.ndarray:
    """Unwindowed (T, N_FFT) view-copy of the frames of ``x``."""
    t = n_frames(x.shape[-1])
    idx = np.arange(N_FFT)[None, :] + HOP * np.arange(t)[:, None]
    return x[idx]


def _overlap_add(frames: np.ndarray, out_len: int) -> np.ndarray:
    t = frames.shape[0]
    total = max(out_len, (t - 1) * HOP + N_FFT)
    y = np.zeros(total)
    for i in range(t):
        y[i * HOP:i * HOP + N_FFT] += frames[i]
    return y[:out_len]


def stft(w) -> np.ndarray:
    """One-sided Hann STFT; returns a complex (T, 257) array.

    Accepts a Waveform or a raw 1-D array.
    """
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    return np.fft.rfft(frame_signal(x) * WINDOW, n=N_FFT, axis=-1)


def _check_spec(S):
    S = np.asarray(S)
    if S.ndim != 2 or S.shape[1] != N_BINS:
        raise SignalError(f"expected a (T, {N_BINS}) spectrogram, got {S.shape}")
    return S


def _ola_norm(t: int, out_len: int) -> np.ndarray:
    wsq = np.tile(WINDOW ** 2, (t, 1))
    return np.maximum(_overlap_add(wsq, out_len), _OLA_FLOOR)


def istft(S, out_len: int, sample_rate_hz=SAMPLE_RATE) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft`.

    Exact on the interior where two frames overlap; the first and last
    half-frames are attenuated rather than amplified, and samples past the last
    frame are zero.
    """
    S = _check_spec(S)
    t = S.shape[0]
    if out_len < 0 or out_len > (t + 1) * HOP + N_FFT:
        raise SignalError(f"out_len {out_len} not representable by {t} frames")
    frames = np.fft.irfft(S, n=N_FFT, axis=-1) * WINDOW
    y = _overlap_add(frames, out_len) / _ola_norm(t, out_len)
    return Waveform(y, sample_rate_hz)


def _frame_adjoint(G: np.ndarray, out_len: int) -> np.ndarray:
    # adjoint of x -> rfft(window * frames(x)) under the real inner product
    Gh = G.copy()
    Gh[:, 1:-1] *= 0.5
    frames = np.fft.irfft(Gh, n=N_FFT, axis=-1) * (N_FFT * WINDOW)
    return _overlap_add(frames, out_len)


def stft_adjoint(G, out_len: int) -> np.ndarray:
    """Adjoint of :func:`stft` restricted to signals of ``out_len`` samples.

    Satisfies ``Re<stft(x), G> == <x, stft_adjoint(G)>`` where complex entries
    are treated as pairs of reals, so a gradient w.r.t. the spectrogram (real
    part + 1j * imaginary part) maps to the gradient w.r.t. the samples.
    """
    G = _check_spec(G)
    if G.shape[0] != n_frames(out_len):
        raise SignalError(f"gradient has {G.shape[0]} frames, signal of {out_len} samples has {n_frames(out_len)}")
    return _frame_adjoint(G, out_len)


def istft_adjoint(g, n_spec_frames: int) -> np.ndarray:
    """Adjoint of :func:`istft`: maps a waveform gradient to a complex
    spectrogram gradient (real part + 1j * imaginary part)."""
    g = np.asarray(g, dtype=np.float64)
    gn = g / _ola_norm(n_spec_frames, g.shape[0])
    padded = np.zeros(max(g.shape[0], (n_spec_frames - 1) * HOP + N_FFT))
    padded[: g.shape[0]] = gn
    idx = np.arange(N_FFT)[None, :] + HOP * np.arange(n_spec_frames)[:, None]
    R = np.fft.rfft(padded[idx] * WINDOW, n=N_FFT, axis=-1)
    scale = np.full(N_BINS, 2.0 / N_FFT)
    scale[0] = scale[-1] = 1.0 / N_FFT
    return R * scale


def cola_interior(n_samples: int) -> slice:
    """Sample range where :func:`istft` reconstructs exactly."""
    return slice(HOP, n_frames(n_samples) * HOP)


# ---------------------------------------------------------------------------
# Mixing
# ---------------------------------------------------------------------------


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


@dataclass(frozen=True)
class Mixture:
    noisy: Waveform
    clean: Waveform
    noise: Waveform      # scaled noise component actually added
    noise_gain: float
    rescale: float       # joint anti-clipping factor applied to both signals


def fit_noise(noise: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Tile or crop ``noise`` to ``n`` samples starting at a seeded offset."""
    rng = np.random.default_rng(seed)
    if noise.shape[0] > n:
        off = int(rng.integers(0, noise.shape[0] - n + 1))
        return noise[off:off + n].copy()
    off = int(rng.integers(0, noise.shape[0]))
    reps = -(-(n + off) // noise.shape[0])
    return np.tile(noise, reps)[off:off + n]


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float, seed: int = 0) -> Mixture:
    if clean.sample_rate_hz != noise.sample_rate_hz:
        raise SignalError("clean and noise sample rates differ")
    if not np.isfinite(snr_db):
        raise SignalError("snr_db must be finite")
    s = clean.samples
    p_clean = power(s)
    if p_clean == 0.0:
        raise SignalError("zero-power clean")
    d = fit_noise(noise.samples, s.shape[0], seed)
    p_noise = power(d)
    if p_noise == 0.0:
        raise SignalError("zero-power noise")
    gain = float(np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0))))
    d = gain * d
    noisy = s + d
    peak = float(np.max(np.abs(noisy)))
    scale = 1.0 / peak if peak > 1.0 else 1.0
    rate = clean.sample_rate_hz
    return Mixture(Waveform(noisy * scale, rate), Waveform(s * scale, rate),
                   Waveform(d * scale, rate), gain, scale)


# ---------------------------------------------------------------------------
# Channel degrader
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChannelProfile:
    """Software stand-in for a VoIP transmission chain."""

    band_low_hz: float
    band_high_hz: float
    mu_law_bits: int | None = None
    frame_drop_prob: float = 0.0
    seed: int = 0

    def validate(self, sample_rate_hz=SAMPLE_RATE):
        if not 0 <= self.band_low_hz < self.band_high_hz <= sample_rate_hz / 2:
            raise SignalError("require 0 <= band_low_hz < band_high_hz <= sample_rate/2")
        if self.mu_law_bits is not None and not 2 <= self.mu_law_bits <= 16:
            raise SignalError("mu_law_bits must be in [2, 16] or null")
        if not 0.0 <= self.frame_drop_prob <= 1.0:
            raise SignalError("frame_drop_prob must be in [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        known = {"band_low_hz", "band_high_hz", "mu_law_bits", "frame_drop_prob", "seed"}
        extra = set(d) - known
        if extra:
            raise SignalError(f"unknown channel profile fields: {sorted(extra)}")
        return cls(**d)


CHANNEL_PRESETS = {
    "phone": ChannelProfile(300.0, 3400.0, 8, 0.01, 0),
    "cloud": ChannelProfile(50.0, 8000.0, 16, 0.0, 0),
}

DROP_FRAME_S = 0.020


def mu_law(x: np.ndarray, bits: int) -> np.ndarray:
    """mu-law compand, quantize to ``2**bits`` levels, expand."""
    mu = 2.0 ** bits - 1.0
    y = np.sign(x) * np.log1p(mu * np.abs(x)) / np.log1p(mu)
    q = np.round((np.clip(y, -1.0, 1.0) + 1.0) / 2.0 * mu) / mu * 2.0 - 1.0
    return np.sign(q) * np.expm1(np.abs(q) * np.log1p(mu)) / mu


def apply_channel(w: Waveform, p: ChannelProfile) -> Waveform:
    """Band-pass, companding quantizer and seeded frame drops, in that order."""
    fs = w.sample_rate_hz
    p.validate(fs)
    x = w.samples.copy()
    nyq = fs / 2.0
    lo = p.band_low_hz if p.band_low_hz > 0 else None
    hi = p.band_high_hz if p.band_high_hz < nyq else None
    if lo is not None and hi is not None:
        sos = sps.butter(4, [lo, hi], btype="bandpass", fs=fs, output="sos")
    elif lo is not None:
        sos = sps.butter(4, lo, btype="highpass", fs=fs, output="sos")
    elif hi is not None:
        sos = sps.butter(4, hi, btype="lowpass", fs=fs, output="sos")
    else:
        sos = None
    if sos is not None:
        x = sps.sosfiltfilt(sos, x)
    if p.mu_law_bits is not None:
        x = mu_law(x, p.mu_law_bits)
    if p.frame_drop_prob > 0:
        hop = int(round(DROP_FRAME_S * fs))
        n_drop_frames = -(-x.shape[0] // hop)
        rng = np.random.default_rng(p.seed)
        drops = rng.random(n_drop_frames) < p.frame_drop_prob
        mask = np.repeat(~drops, hop)[: x.shape[0]]
        x = x * mask
    return Waveform(x, fs)
