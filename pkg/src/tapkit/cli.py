"""``tapkit`` command-line interface.

Every subcommand writes into a run directory (``--out``) together with a
``config.lock`` holding the resolved configuration.  On failure a single
``tapkit: error: <Kind>: <message>`` line goes to stderr (or a JSON object to
stdout with ``--json``) and the exit status is nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import CHOICES, KEYS, ConfigError, key_type, load_file, resolve, write_lock

logger = logging.getLogger("tapkit")

EXECUTION_FLAGS = ("out", "json", "jobs", "verbose", "config", "command")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="tapkit", description="Temporal acoustic parameter toolkit.")
    p.add_argument("--version", action="version", version=f"tapkit {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for command, keys in KEYS.items():
        sp = sub.add_parser(command)
        sp.add_argument("--config", help="TOML file with keys for this subcommand")
        sp.add_argument("--out", help=f"run directory (default runs/{command})")
        sp.add_argument("--json", action="store_true", help="print a JSON summary on stdout")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes for per-file work")
        sp.add_argument("-v", "--verbose", action="store_true")
        for key in keys:
            kw = {"dest": key, "default": None}
            if key_type(command, key) is not list:
                kw["type"] = key_type(command, key)
            if key in CHOICES:
                kw["choices"] = CHOICES[key]
            if key_type(command, key) is list:
                kw["help"] = "comma-separated list"
            sp.add_argument("--" + key.replace("_", "-"), **kw)
    return p


def _pmap(fn, items, jobs):
    """Ordered map, in-process or over a process pool."""
    items = list(items)
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _need(cfg, key):
    if not cfg.get(key):
        raise ConfigError(f"missing required setting {key!r}")
    return cfg[key]


def _manifest_entries(cfg):
    from .corpus import MixtureManifest

    path = Path(_need(cfg, "manifest"))
    m = MixtureManifest.load(path)
    split = cfg.get("split", "all")
    entries = m.entries if split == "all" else m.by_split(split)
    if not entries:
        raise ConfigError(f"manifest {path} has no entries in split {split!r}")
    return m.root(path.parent), entries


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def _write_sources(out, cfg):
    """Generate seeded speech-like and noise sources when no directories are given."""
    from .signal import save_wav
    from .synthetic import NOISE_KINDS, noise_like, speech_like

    src = out / "sources"
    (src / "clean").mkdir(parents=True, exist_ok=True)
    (src / "noise").mkdir(parents=True, exist_ok=True)
    dur = max(cfg["source_duration_s"], cfg["duration_s"])
    for i in range(cfg["source_count"]):
        save_wav(speech_like(dur, seed=cfg["seed"] * 1000 + i), src / "clean" / f"speech{i:02d}.wav")
    for i, kind in enumerate(NOISE_KINDS):
        save_wav(noise_like(kind, dur, seed=cfg["seed"] * 1000 + 500 + i), src / "noise" / f"{kind}.wav")
    return src / "clean", src / "noise"


def cmd_synth(cfg, out, jobs):
    from .corpus import SynthSpec, plan_corpus, render_manifest, split_manifest
    from .signal import CHANNEL_PRESETS

    if bool(cfg["clean_dir"]) != bool(cfg["noise_dir"]):
        raise ConfigError("give both clean_dir and noise_dir, or neither")
    if cfg["clean_dir"]:
        clean_dir, noise_dir = Path(cfg["clean_dir"]), Path(cfg["noise_dir"])
    else:
        clean_dir, noise_dir = _write_sources(out, cfg)
    channel = None if cfg["channel"] == "none" else CHANNEL_PRESETS[cfg["channel"]]
    spec = SynthSpec(cfg["count"], cfg["duration_s"], (cfg["snr_min_db"], cfg["snr_max_db"]),
                     cfg["seed"], channel)
    m = plan_corpus(clean_dir, noise_dir, out, spec)
    if len(m.entries) >= 2:
        m = split_manifest(m, cfg["test_fraction"], cfg["seed"])
    render_manifest(m, out, jobs)
    m.save(out / "manifest.jsonl")
    return {"manifest": str(out / "manifest.jsonl"), "entries": len(m.entries),
            "train": len(m.by_split("train")), "test": len(m.by_split("test"))}


# ---------------------------------------------------------------------------
# extract
# ---------------------------------------------------------------------------


def _extract_one(args):
    from .features import extract_taps, to_bytes, write_csv
    from .signal import ensure_rate, load_wav

    src, dst, fmt = args
    a = extract_taps(ensure_rate(load_wav(src, downmix=True)))
    if fmt == "csv":
        write_csv(a, dst)
    else:
        Path(dst).write_bytes(to_bytes(a))
    return a.n_frames


def _audio_inputs(cfg, which):
    """(name, path) pairs from explicit inputs or from a manifest."""
    if cfg.get("inputs"):
        if cfg.get("manifest"):
            raise ConfigError("give either inputs or manifest, not both")
        return [(Path(p).stem, Path(p)) for p in cfg["inputs"]]
    root, entries = _manifest_entries(cfg)
    out = []
    for e in entries:
        if which in ("clean", "both"):
            out.append((f"{e.id}_clean", root / e.out_clean_path))
        if which in ("noisy", "both"):
            out.append((f"{e.id}_noisy", root / e.out_noisy_path))
    return out


def cmd_extract(cfg, out, jobs):
    inputs = _audio_inputs(cfg, cfg["which"])
    names = [n for n, _ in inputs]
    if len(set(names)) != len(names):
        raise ConfigError("input file names must have distinct stems")
    (out / "taps").mkdir(exist_ok=True)
    ext = "csv" if cfg["format"] == "csv" else "bin"
    frames = _pmap(_extract_one, [(str(p), str(out / "taps" / f"{n}.{ext}"), cfg["format"])
                                  for n, p in inputs], jobs)
    return {"files": len(inputs), "frames": int(sum(frames)), "dir": str(out / "taps")}


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _train_config(cfg, lr=None):
    from .estimator import TrainConfig

    return TrainConfig(lr=cfg["lr"] if lr is None else lr, epochs=cfg["epochs"], batch=cfg["batch"],
                       bptt_chunk=cfg["bptt_chunk"], seed=cfg["seed"], val_fraction=cfg["val_fraction"],
                       hidden=cfg["hidden"], layers=cfg["layers"]).validate()


def cmd_train_tap(cfg, out, jobs):
    from .estimator import save_estimator, train_estimator, write_history_csv
    from .features import extract_taps
    from .signal import ensure_rate, load_wav

    inputs = _audio_inputs(cfg, cfg["which"])
    waves = [ensure_rate(load_wav(p, downmix=True)) for _, p in inputs]
    targets = _pmap(extract_taps, waves, jobs)
    model, history = train_estimator(waves, _train_config(cfg), targets=targets)
    save_estimator(model, out / "estimator.tapk", rng_seed=cfg["seed"])
    write_history_csv(history, out / "history.csv")
    best = min(history, key=lambda r: r["val_mae"])
    return {"checkpoint": str(out / "estimator.tapk"), "clips": len(waves),
            "initial_train_mae": history[0]["train_mae"], "final_train_mae": history[-1]["train_mae"],
            "best_val_mae": best["val_mae"], "best_epoch": best["epoch"]}


def _fmt_num(v):
    return repr(float(v)).replace("-", "m")


def cmd_train_enhancer(cfg, out, jobs):
    from .enhancer import JointLossConfig, save_enhancer, train_enhancer, write_history_csv
    from .estimator import load_estimator
    from .signal import load_wav

    root, entries = _manifest_entries(cfg)
    pairs = [(load_wav(root / e.out_noisy_path), load_wav(root / e.out_clean_path)) for e in entries]
    needs_est = any(lam > 0 for lam in cfg["lambda_tap"])
    est = load_estimator(cfg["estimator"]) if cfg.get("estimator") else None
    if needs_est and est is None:
        raise ConfigError("lambda_tap > 0 needs an estimator checkpoint")
    if not cfg["lr"] or not cfg["lambda_tap"]:
        raise ConfigError("lr and lambda_tap lists must be non-empty")
    runs = []
    for lr in cfg["lr"]:
        for lam in cfg["lambda_tap"]:
            jcfg = JointLossConfig(base_loss=cfg["base_loss"], lambda_tap=lam,
                                   estimator_path=cfg.get("estimator"), tap_target=cfg["tap_target"])
            tcfg = _train_config(cfg, lr)
            model, history = train_enhancer(pairs, jcfg, tcfg, est, hidden=cfg["hidden"], layers=cfg["layers"])
            sub = out / f"lr{_fmt_num(lr)}_lambda{_fmt_num(lam)}"
            sub.mkdir(exist_ok=True)
            save_enhancer(model, sub / "enhancer.tapk", rng_seed=cfg["seed"])
            write_history_csv(history, sub / "history.csv")
            final_val = [r for r in history if r["split"] == "val"][-1]
            runs.append({"lr": lr, "lambda_tap": lam, "dir": sub.name,
                         "final_val_l_base": final_val["l_base"], "final_val_l_tap": final_val["l_tap"],
                         "final_val_l_total": final_val["l_total"]})
            logger.info("run %s done: %s", sub.name, final_val)
    (out / "sweep.json").write_text(json.dumps(runs, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"runs": runs}


# ---------------------------------------------------------------------------
# enhance / eval
# ---------------------------------------------------------------------------


def _enhance_one(args):
    from .enhancer import enhance
    from .signal import ensure_rate, load_wav, save_wav

    src, dst, model = args
    y = enhance(ensure_rate(load_wav(src, downmix=True)), model)
    return save_wav(y, dst)


def cmd_enhance(cfg, out, jobs):
    from .enhancer import load_enhancer

    model = load_enhancer(_need(cfg, "enhancer"))
    inputs = _audio_inputs(cfg, "noisy")
    (out / "enhanced").mkdir(exist_ok=True)
    clipped = _pmap(_enhance_one, [(str(p), str(out / "enhanced" / f"{n}.wav"), model)
                                   for n, p in inputs], jobs)
    return {"files": len(inputs), "clipped_samples": int(sum(clipped)), "dir": str(out / "enhanced")}


def _parse_systems(specs):
    systems = []
    for s in specs:
        name, sep, path = s.partition("=")
        if not sep or not name or not path:
            raise ConfigError(f"enhancer spec must be name=path, got {s!r}")
        if name == "source" or name in (n for n, _ in systems):
            raise ConfigError(f"duplicate or reserved system name {name!r}")
        systems.append((name, path))
    return systems


def _eval_one(args):
    from .enhancer import enhance
    from .features import extract_taps
    from .metrics import acoustic_mae, stoi
    from .report import EvalRecord
    from .signal import load_wav

    entry_id, noisy_path, clean_path, models, stats, labels = args
    noisy, clean = load_wav(noisy_path), load_wav(clean_path)
    a_clean = extract_taps(clean)
    records = []
    for name, model in [("source", None)] + models:
        y = noisy if model is None else enhance(noisy, model)
        mae = acoustic_mae(a_clean, extract_taps(y), stats)
        records.append(EvalRecord(clip_id=entry_id, system=name, stoi=stoi(clean, y),
                                  mae=[float(v) for v in mae], **labels))
    return records


def cmd_eval(cfg, out, jobs):
    from .corpus import MixtureManifest
    from .enhancer import load_enhancer
    from .estimator import load_estimator
    from .features import compute_stats, extract_taps
    from .metrics import improvement_table, write_improvement_csv
    from .report import write_records
    from .signal import load_wav

    root, entries = _manifest_entries(cfg)
    systems = _parse_systems(cfg["enhancers"])
    models = [(name, load_enhancer(path)) for name, path in systems]
    if cfg.get("estimator"):
        stats = load_estimator(cfg["estimator"]).stats
        stats_source = "estimator"
    else:
        path = Path(cfg["manifest"])
        m = MixtureManifest.load(path)
        ref = m.by_split("train") or m.entries
        stats = compute_stats(extract_taps(load_wav(root / e.out_clean_path)) for e in ref)
        stats_source = "manifest-train-clean"
    labels = {"platform": cfg["platform"], "receiver": cfg["receiver"], "denoise_mode": cfg["denoise_mode"]}
    work = [(e.id, str(root / e.out_noisy_path), str(root / e.out_clean_path), models, stats, labels)
            for e in entries]
    records = [r for batch in _pmap(_eval_one, work, jobs) for r in batch]
    write_records(records, out / "eval.jsonl")

    summary = {"clips": len(entries), "stats_source": stats_source, "systems": {}}
    by_system = {}
    for r in records:
        by_system.setdefault(r.system, []).append(r)
    for name, rs in by_system.items():
        summary["systems"][name] = {"stoi": float(np.mean([r.stoi for r in rs])),
                                    "mae_mean": float(np.mean([np.mean(r.mae) for r in rs]))}
    base = np.mean([r.mae for r in by_system["source"]], axis=0)
    for name, _ in systems:
        rows = improvement_table(base, np.mean([r.mae for r in by_system[name]], axis=0))
        write_improvement_csv(rows, out / f"improvement_{name}.csv")
    return summary


# ---------------------------------------------------------------------------
# report / gradcheck
# ---------------------------------------------------------------------------


def cmd_report(cfg, out, jobs):
    from .report import Layout, assemble_report, read_records

    if not cfg["records"]:
        raise ConfigError("missing required setting 'records'")
    records = [r for path in cfg["records"] for r in read_records(path)]
    layout = Layout(systems=tuple(cfg["systems"]) if cfg["systems"] else None)
    doc = assemble_report(records, layout)
    text = doc.to_text()
    (out / "report.txt").write_text(text, encoding="utf-8")
    (out / "report.json").write_text(doc.to_json(), encoding="utf-8")
    return {"records": len(records), "report": str(out / "report.txt"), "text": text}


def cmd_gradcheck(cfg, out, jobs):
    from .gradcheck import run_scope

    reports = run_scope(cfg["scope"], seed=cfg["seed"])
    result = {name: {"max_rel_err": float(r.max_rel_err), "tol": float(r.tol), "n_checked": int(r.n_checked),
                     "passed": bool(r.passed)} for name, r in reports.items()}
    (out / "gradcheck.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    failed = sorted(n for n, r in reports.items() if not r.passed)
    return {"checks": result, "failed": failed}


COMMANDS = {"synth": cmd_synth, "extract": cmd_extract, "train-tap": cmd_train_tap,
            "train-enhancer": cmd_train_enhancer, "enhance": cmd_enhance, "eval": cmd_eval,
            "report": cmd_report, "gradcheck": cmd_gradcheck}


def _print_summary(command, cfg, result, as_json):
    if as_json:
        print(json.dumps({"command": command, "seed": cfg["seed"], **result}, sort_keys=True, default=str))
        return
    print(f"seed {cfg['seed']}")
    if command == "report":
        print(result["text"], end="")
    elif command == "gradcheck":
        for name, r in result["checks"].items():
            print(f"{name:<28} max_rel_err {r['max_rel_err']:.3e}  tol {r['tol']:.0e}  "
                  f"{'PASS' if r['passed'] else 'FAIL'}")
    else:
        for k, v in result.items():
            print(f"{k} {json.dumps(v, sort_keys=True) if isinstance(v, (list, dict)) else v}")


def _fail(kind, message, as_json):
    message = " ".join(str(message).split())
    if as_json:
        print(json.dumps({"error": kind, "message": message}))
    else:
        print(f"tapkit: error: {kind}: {message}", file=sys.stderr)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    as_json = "--json" in argv
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        _fail("UsageError", exc, as_json)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    command = args.command
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        file_values = load_file(args.config, command) if args.config else {}
        overrides = {k: v for k, v in vars(args).items() if k not in EXECUTION_FLAGS}
        cfg = resolve(command, file_values, overrides)
        out = Path(args.out or Path("runs") / command)
        out.mkdir(parents=True, exist_ok=True)
        write_lock(out, command, cfg)
        result = COMMANDS[command](cfg, out, args.jobs)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        logger.debug("failure", exc_info=True)
        _fail(type(exc).__name__, exc, as_json)
        return 1
    _print_summary(command, cfg, result, as_json)
    if command == "gradcheck" and result["failed"]:
        _fail("GradCheckFailed", f"failed: {', '.join(result['failed'])}", as_json)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
