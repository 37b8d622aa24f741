"""Run configuration: per-subcommand keys, TOML files and ``config.lock``.

Values resolve in the order defaults < ``--config`` file < command-line flags.
The resolved set (minus execution-only settings such as ``jobs``) is written
to ``config.lock`` in the run directory and can be fed back with ``--config``
to repeat the run.  Keys with no value are omitted since TOML has no null.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

try:
    import tomllib as tomli
except ImportError:  # Python < 3.11
    import tomli


class ConfigError(ValueError):
    pass


_TRAIN = {"lr": 1e-3, "epochs": 30, "batch": 1, "bptt_chunk": 128, "val_fraction": 0.2}

# default None means "optional, no default"; the type then comes from _TYPES
KEYS = {
    "synth": {"seed": 0, "clean_dir": None, "noise_dir": None, "count": 50, "duration_s": 4.0,
              "snr_min_db": 0.0, "snr_max_db": 20.0, "channel": "none", "test_fraction": 0.2,
              "source_count": 8, "source_duration_s": 12.0},
    "extract": {"seed": 0, "inputs": [], "manifest": None, "split": "all", "which": "clean",
                "format": "csv"},
    "train-tap": {"seed": 0, "manifest": None, "split": "train", "which": "both",
                  "hidden": 32, "layers": 1, **_TRAIN},
    "train-enhancer": {"seed": 0, "manifest": None, "estimator": None, "split": "train",
                       **_TRAIN, "lr": [1e-3], "lambda_tap": [1.0], "base_loss": "l1_waveform",
                       "tap_target": "estimator", "hidden": 32, "layers": 1},
    "enhance": {"seed": 0, "enhancer": None, "inputs": [], "manifest": None, "split": "test"},
    "eval": {"seed": 0, "manifest": None, "split": "test", "estimator": None, "enhancers": [],
             "platform": "desk", "receiver": "direct", "denoise_mode": "low"},
    "report": {"seed": 0, "records": [], "systems": []},
    "gradcheck": {"seed": 0, "scope": "all"},
}
_TYPES = {"clean_dir": str, "noise_dir": str, "manifest": str, "estimator": str, "enhancer": str}
CHOICES = {
    "channel": ("none", "phone", "cloud"),
    "split": ("all", "train", "test"),
    "which": ("clean", "noisy", "both"),
    "format": ("csv", "bin"),
    "base_loss": ("l1_waveform", "l2_spectral_magnitude"),
    "tap_target": ("estimator", "extractor"),
    "denoise_mode": ("low", "auto"),
    "scope": ("all", "dense", "gru", "bptt", "mae", "taploss", "joint"),
}


def key_type(command, key):
    default = KEYS[command][key]
    if default is None:
        return _TYPES[key]
    return type(default)


def element_type(command, key):
    default = KEYS[command][key]
    return type(default[0]) if default else str


def coerce(command, key, value):
    """Check and normalize one value against the key's type."""
    if key not in KEYS[command]:
        raise ConfigError(f"unknown key {key!r} for {command}")
    t = key_type(command, key)
    if t is list:
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, list):
            raise ConfigError(f"{key} must be a list")
        et = element_type(command, key)
        return [_scalar(key, et, v) for v in value]
    value = _scalar(key, t, value)
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigError(f"{key} must be one of {CHOICES[key]}, got {value!r}")
    return value


def _scalar(key, t, v):
    try:
        if t is bool or isinstance(v, bool):
            raise TypeError
        if t is int:
            if isinstance(v, float) and not v.is_integer():
                raise TypeError
            return int(v)
        if t is float:
            out = float(v)
            if not math.isfinite(out):
                raise ConfigError(f"{key} must be finite")
            return out
        return str(v)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot interpret {v!r} as {t.__name__}") from exc


def load_file(path, command):
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    file_command = data.pop("command", command)
    if file_command != command:
        raise ConfigError(f"{path} is a config for {file_command!r}, not {command!r}")
    unknown = sorted(set(data) - set(KEYS[command]))
    if unknown:
        raise ConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    return {k: coerce(command, k, v) for k, v in data.items()}


def resolve(command, file_values=None, overrides=None):
    cfg = dict(KEYS[command])
    cfg.update(file_values or {})
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = coerce(command, k, v)
    return {k: (list(v) if isinstance(v, list) else v) for k, v in cfg.items()}


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v, ensure_ascii=False)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize {v!r}")


def dumps_lock(command, cfg) -> str:
    lines = [f"command = {_toml_value(command)}"]
    for k in sorted(cfg):
        if cfg[k] is not None:
            lines.append(f"{k} = {_toml_value(cfg[k])}")
    return "\n".join(lines) + "\n"


def write_lock(run_dir, command, cfg):
    path = Path(run_dir) / "config.lock"
    path.write_text(dumps_lock(command, cfg), encoding="utf-8")
    return path
