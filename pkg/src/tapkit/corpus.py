"""Desk-scale noisy corpus synthesis and JSON-lines manifests.

A manifest starts with a header line ``{"corpus_root": ..., "format_version": 1}``
followed by one entry per line.  Every path in an entry is relative to the
corpus root, which is itself relative to the manifest's directory unless
absolute (``TAPKIT_CORPUS_ROOT`` overrides it).  An entry records everything
needed to re-render its audio bit-exactly.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .signal import (ChannelProfile, SignalError, apply_channel, ensure_rate, load_wav,
                     mix_at_snr, save_wav, Waveform)

MANIFEST_VERSION = 1
ROOT_ENV = "TAPKIT_CORPUS_ROOT"


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    clean_path: str
    noise_path: str
    snr_db: float
    noise_offset_seed: int
    out_noisy_path: str
    out_clean_path: str
    split: str = "train"
    channel_profile: dict | None = None
    clean_offset: int = 0
    duration_samples: int | None = None

    def __post_init__(self):
        if not np.isfinite(self.snr_db):
            raise CorpusError(f"{self.id}: snr_db must be finite")
        if self.split not in ("train", "test"):
            raise CorpusError(f"{self.id}: split must be 'train' or 'test'")


@dataclass
class MixtureManifest:
    corpus_root: str
    entries: list = field(default_factory=list)

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise CorpusError("manifest ids must be unique")

    def root(self, manifest_dir=None) -> Path:
        override = os.environ.get(ROOT_ENV)
        root = Path(override) if override else Path(self.corpus_root)
        if not root.is_absolute() and manifest_dir is not None:
            root = Path(manifest_dir) / root
        return root

    def by_split(self, split):
        return [e for e in self.entries if e.split == split]

    def dumps(self) -> str:
        lines = [json.dumps({"corpus_root": self.corpus_root, "format_version": MANIFEST_VERSION},
                            sort_keys=True)]
        lines += [json.dumps(asdict(e), sort_keys=True) for e in self.entries]
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
        if not lines:
            raise CorpusError(f"{path}: empty manifest")
        header = json.loads(lines[0])
        if header.get("format_version") != MANIFEST_VERSION or "corpus_root" not in header:
            raise CorpusError(f"{path}: bad manifest header {header}")
        try:
            entries = [ManifestEntry(**json.loads(ln)) for ln in lines[1:]]
        except TypeError as exc:
            raise CorpusError(f"{path}: {exc}") from exc
        return cls(header["corpus_root"], entries)


@dataclass(frozen=True)
class SynthSpec:
    count: int = 50
    duration_s: float = 4.0
    snr_range_db: tuple = (0.0, 20.0)
    seed: int = 0
    channel: ChannelProfile | None = None

    def validate(self):
        if self.count < 1:
            raise CorpusError("count must be >= 1")
        if self.duration_s < 1:
            raise CorpusError("duration_s must be >= 1")
        lo, hi = self.snr_range_db
        if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
            raise CorpusError("snr_range_db must be a finite (low, high) pair")
        return self


def list_wavs(directory):
    d = Path(directory)
    if not d.is_dir():
        raise CorpusError(f"not a directory: {directory}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() == ".wav")
    if not files:
        raise CorpusError(f"no WAV files in {directory}")
    return files


def _rel(path, root):
    return Path(os.path.relpath(Path(path).resolve(), Path(root).resolve())).as_posix()


def render_entry(entry: ManifestEntry, root) -> tuple[Waveform, Waveform]:
    """Re-create (noisy, clean) for one entry from its sources and seeds."""
    root = Path(root)
    clean = ensure_rate(load_wav(root / entry.clean_path, downmix=True))
    noise = ensure_rate(load_wav(root / entry.noise_path, downmix=True))
    n = entry.duration_samples or len(clean)
    if entry.clean_offset + n > len(clean):
        raise CorpusError(f"{entry.id}: clean source shorter than offset + duration")
    seg = Waveform(clean.samples[entry.clean_offset:entry.clean_offset + n])
    mix = mix_at_snr(seg, noise, entry.snr_db, seed=entry.noise_offset_seed)
    noisy = mix.noisy
    if entry.channel_profile is not None:
        noisy = apply_channel(noisy, ChannelProfile.from_dict(entry.channel_profile))
    return noisy, mix.clean


def _write_entry(args):
    entry, root = args
    noisy, clean = render_entry(entry, root)
    for rel, w in ((entry.out_noisy_path, noisy), (entry.out_clean_path, clean)):
        out = Path(root) / rel
        out.parent.mkdir(parents=True, exist_ok=True)
        save_wav(w, out)
    return entry.id


def _pick_clean(rng, cleans, n):
    for k in rng.permutation(len(cleans)):
        if len(cleans[k][1]) >= n:
            return int(k)
    raise CorpusError(f"no clean source is at least {n} samples long")


def plan_corpus(clean_dir, noise_dir, root, spec: SynthSpec):
    """Draw every random choice for a corpus and return the manifest (no audio)."""
    spec.validate()
    clean_files = list_wavs(clean_dir)
    noise_files = list_wavs(noise_dir)
    cleans = [(p, ensure_rate(load_wav(p, downmix=True))) for p in clean_files]
    n = int(round(spec.duration_s * 16000))
    rng = np.random.default_rng(spec.seed)
    width = max(4, len(str(spec.count - 1)))
    entries = []
    for i in range(spec.count):
        k = _pick_clean(rng, cleans, n)
        clean_offset = int(rng.integers(0, len(cleans[k][1]) - n + 1))
        noise_path = noise_files[int(rng.integers(len(noise_files)))]
        snr = float(rng.uniform(*spec.snr_range_db))
        noise_seed = int(rng.integers(0, 2 ** 31 - 1))
        channel = None
        if spec.channel is not None:
            channel = asdict(replace(spec.channel, seed=int(rng.integers(0, 2 ** 31 - 1))))
        eid = f"mix{i:0{width}d}"
        entries.append(ManifestEntry(
            id=eid, clean_path=_rel(cleans[k][0], root), noise_path=_rel(noise_path, root),
            snr_db=snr, noise_offset_seed=noise_seed, out_noisy_path=f"noisy/{eid}.wav",
            out_clean_path=f"clean/{eid}.wav", channel_profile=channel,
            clean_offset=clean_offset, duration_samples=n))
    return MixtureManifest(".", entries)


def synth_corpus(clean_dir, noise_dir, out_dir, spec: SynthSpec, jobs=1,
                 manifest_name="manifest.jsonl") -> MixtureManifest:
    """Plan, render and write a corpus under ``out_dir``; returns the manifest.

    Rendering is per-entry and may run in ``jobs`` processes; outputs do not
    depend on ``jobs``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = plan_corpus(clean_dir, noise_dir, out_dir, spec)
    render_manifest(manifest, out_dir, jobs)
    manifest.save(out_dir / manifest_name)
    return manifest


def render_manifest(manifest: MixtureManifest, root, jobs=1):
    work = [(e, str(root)) for e in manifest.entries]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_write_entry, work))
    else:
        for w in work:
            _write_entry(w)


def split_manifest(m: MixtureManifest, test_fraction: float, seed: int) -> MixtureManifest:
    """Seeded shuffle, then the first ``floor(n * test_fraction)`` entries become test."""
    n = len(m.entries)
    if not 0.0 < test_fraction < 1.0:
        raise CorpusError("test_fraction must be in (0, 1)")
    if n < 2:
        raise CorpusError("need at least 2 entries to split")
    n_test = int(np.floor(n * test_fraction))
    if n_test < 1:
        raise CorpusError(f"test split would be empty ({n} entries at fraction {test_fraction})")
    test = set(np.random.default_rng(seed).permutation(n)[:n_test].tolist())
    entries = [replace(e, split="test" if i in test else "train") for i, e in enumerate(m.entries)]
    return MixtureManifest(m.corpus_root, entries)


def load_pairs(manifest: MixtureManifest, manifest_dir, split=None):
    """(id, noisy, clean) triples for rendered entries, optionally one split."""
    root = manifest.root(manifest_dir)
    out = []
    for e in manifest.entries:
        if split is not None and e.split != split:
            continue
        noisy = load_wav(root / e.out_noisy_path)
        clean = load_wav(root / e.out_clean_path)
        if len(noisy) != len(clean):
            raise SignalError(f"{e.id}: noisy and clean lengths differ")
        out.append((e.id, noisy, clean))
    return out
