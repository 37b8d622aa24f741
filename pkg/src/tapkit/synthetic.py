"""Seeded speech-like and noise source generators.

The speech generator is a plain source-filter model: a glottal pulse train
with a gliding pitch contour, low-passed by two real poles, shaped by three
formant resonators per syllable and gated by a syllabic envelope.  It is not
meant to sound like speech, only to carry the structure the extractor and
STOI care about (harmonicity, formants, onsets and pauses).
"""

import numpy as np
from scipy.signal import butter, lfilter, sosfilt

from .signal import SAMPLE_RATE, Waveform

VOWELS = {
    "a": (730.0, 1090.0, 2440.0),
    "i": (270.0, 2290.0, 3010.0),
    "u": (300.0, 870.0, 2240.0),
    "e": (530.0, 1840.0, 2480.0),
    "o": (570.0, 840.0, 2410.0),
    "ae": (660.0, 1720.0, 2410.0),
}
FORMANT_BW = (90.0, 110.0, 170.0)
GLOTTAL_POLE = 0.95


def resonator_coeffs(freq_hz, bw_hz, fs=SAMPLE_RATE):
    r = np.exp(-np.pi * bw_hz / fs)
    return np.array([1.0, -2.0 * r * np.cos(2 * np.pi * freq_hz / fs), r * r])


def all_pole(freqs, bws, fs=SAMPLE_RATE):
    """Denominator of a cascade of two-pole resonators."""
    a = np.array([1.0])
    for f, b in zip(freqs, bws):
        a = np.convolve(a, resonator_coeffs(f, b, fs))
    return a


def glottal_source(f0_track, fs=SAMPLE_RATE, radiation=False):
    """Unit pulses at each pitch period of ``f0_track`` (Hz per sample),
    rolled off by -12 dB/octave; ``radiation`` adds the +6 dB/octave lip
    radiation differentiator."""
    phase = np.cumsum(f0_track / fs)
    pulses = np.zeros_like(f0_track)
    pulses[1:][np.diff(np.floor(phase)) > 0] = 1.0
    g = lfilter([1.0], [1.0, -2 * GLOTTAL_POLE, GLOTTAL_POLE ** 2], pulses)
    return np.append(g[0], np.diff(g)) if radiation else g


def vowel(formants, f0_hz, duration_s, fs=SAMPLE_RATE, bws=FORMANT_BW, peak=0.5):
    """Steady synthetic vowel; used as a known-answer fixture for formant tracking."""
    n = int(round(duration_s * fs))
    src = glottal_source(np.full(n, float(f0_hz)), fs)
    y = lfilter([1.0], all_pole(formants, bws[:len(formants)], fs), src)
    return Waveform(y * (peak / np.max(np.abs(y))), fs)


def _envelope(n, fs, ramp_s=0.02):
    env = np.ones(n)
    k = min(int(ramp_s * fs), n // 2)
    if k > 0:
        ramp = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, k))
        env[:k] = ramp
        env[n - k:] = ramp[::-1]
    return env


def speech_like(duration_s, seed=0, fs=SAMPLE_RATE, rms=0.08) -> Waveform:
    """Syllable sequence with pitch glides, vowel formants, fricatives and pauses."""
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * fs))
    out = np.zeros(n)
    base_f0 = rng.uniform(95.0, 220.0)
    names = list(VOWELS)
    pos = int(rng.uniform(0.0, 0.15) * fs)
    while pos < n:
        if rng.random() < 0.25:
            # fricative: high-passed noise burst
            m = int(rng.uniform(0.05, 0.12) * fs)
            sos = butter(4, rng.uniform(2500.0, 4500.0), btype="highpass", fs=fs, output="sos")
            burst = sosfilt(sos, rng.standard_normal(m)) * 0.3 * _envelope(m, fs, 0.01)
            end = min(pos + m, n)
            out[pos:end] += burst[: end - pos]
            pos = end
        m = int(rng.uniform(0.15, 0.35) * fs)
        f_start = base_f0 * rng.uniform(0.85, 1.2)
        f_end = f_start * rng.uniform(0.8, 1.15)
        wobble = 0.02 * np.sin(2 * np.pi * rng.uniform(3.0, 7.0) * np.arange(m) / fs + rng.uniform(0, 2 * np.pi))
        f0 = np.linspace(f_start, f_end, m) * (1.0 + wobble)
        src = glottal_source(f0, fs, radiation=True) + 0.002 * rng.standard_normal(m)
        formants = np.array(VOWELS[names[rng.integers(len(names))]]) * rng.uniform(0.92, 1.08, 3)
        seg = lfilter([1.0], all_pole(formants, FORMANT_BW, fs), src)
        seg = seg / (np.std(seg) + 1e-12) * rng.uniform(0.5, 1.0) * _envelope(m, fs)
        end = min(pos + m, n)
        out[pos:end] += seg[: end - pos]
        pos = end + int(rng.choice([rng.uniform(0.02, 0.06), rng.uniform(0.1, 0.3)], p=[0.7, 0.3]) * fs)
    out *= rms / (np.sqrt(np.mean(out ** 2)) + 1e-12)
    peak = np.max(np.abs(out))
    if peak > 0.95:
        out *= 0.95 / peak
    return Waveform(out, fs)


NOISE_KINDS = ("white", "pink", "brown", "babble", "hum", "modulated")


def noise_like(kind, duration_s, seed=0, fs=SAMPLE_RATE, rms=0.1) -> Waveform:
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * fs))
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind in ("pink", "brown"):
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.fft.rfftfreq(n, 1.0 / fs)
        f[0] = f[1]
        spec /= f ** (0.5 if kind == "pink" else 1.0)
        x = np.fft.irfft(spec, n)
    elif kind == "babble":
        x = sum(speech_like(duration_s, int(rng.integers(1 << 31)), fs).samples for _ in range(5))
    elif kind == "hum":
        t = np.arange(n) / fs
        f = rng.uniform(48.0, 62.0)
        x = sum(np.sin(2 * np.pi * f * k * t + rng.uniform(0, 2 * np.pi)) / k for k in range(1, 8))
        x = x + 0.3 * rng.standard_normal(n)
    elif kind == "modulated":
        t = np.arange(n) / fs
        x = rng.standard_normal(n) * (1.0 + 0.8 * np.sin(2 * np.pi * rng.uniform(2.0, 8.0) * t))
    else:
        raise ValueError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")
    x = x - x.mean()
    return Waveform(x * rms / (np.sqrt(np.mean(x ** 2)) + 1e-12), fs)


def harmonic_tone(f0_hz, n_harmonics, duration_s, rng, fs=SAMPLE_RATE, peak=0.3) -> Waveform:
    t = np.arange(int(round(duration_s * fs))) / fs
    x = sum(rng.uniform(0.2, 1.0) / k * np.sin(2 * np.pi * f0_hz * k * t + rng.uniform(0, 2 * np.pi))
            for k in range(1, n_harmonics + 1))
    return Waveform(peak * x / np.max(np.abs(x)), fs)


def tone_noise_corpus(n=20, seed=0, duration_s=1.0, snr_range_db=(-5.0, 25.0)):
    """Harmonic tones (100-300 Hz, 1-5 harmonics) mixed with assorted noises.

    Returns a list of noisy Waveforms; used as the small training fixture
    for the estimator.
    """
    from .signal import mix_at_snr

    rng = np.random.default_rng(seed)
    kinds = ("white", "pink", "brown", "hum", "modulated")
    out = []
    for i in range(n):
        tone = harmonic_tone(rng.uniform(100.0, 300.0), int(rng.integers(1, 6)), duration_s, rng)
        noise = noise_like(kinds[i % len(kinds)], duration_s, seed=seed * 100 + i)
        out.append(mix_at_snr(tone, noise, rng.uniform(*snr_range_db), seed=i).noisy)
    return out
