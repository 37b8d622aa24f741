import os
import shutil
from pathlib import Path

import pytest

from tapkit.cli import main

# a small end-to-end run: (run directory, flags)
PIPELINE = [
    ("synth", ["--count", "6", "--duration-s", "1", "--source-count", "3",
               "--source-duration-s", "2", "--seed", "3"]),
    ("extract", ["--manifest", "synth/manifest.jsonl", "--which", "both"]),
    ("train-tap", ["--manifest", "synth/manifest.jsonl", "--epochs", "2", "--hidden", "4"]),
    ("train-enhancer", ["--manifest", "synth/manifest.jsonl", "--estimator", "train-tap/estimator.tapk",
                        "--epochs", "1", "--hidden", "4", "--lr", "1e-3,1e-2", "--lambda-tap", "0,1"]),
    ("enhance", ["--manifest", "synth/manifest.jsonl",
                 "--enhancer", "train-enhancer/lr0.01_lambda1.0/enhancer.tapk"]),
    ("eval", ["--manifest", "synth/manifest.jsonl", "--estimator", "train-tap/estimator.tapk",
              "--enhancers", "toy=train-enhancer/lr0.01_lambda1.0/enhancer.tapk"]),
    ("report", ["--records", "eval/eval.jsonl"]),
]


def run_cli(workdir, argv):
    """Run the CLI with ``workdir`` as the current directory; returns the exit code."""
    old = os.getcwd()
    os.chdir(workdir)
    try:
        return main(argv)
    finally:
        os.chdir(old)


def run_pipeline(workdir, jobs=1, locks_from=None):
    """Run every pipeline step in ``workdir``.

    With ``locks_from`` each step is driven only by the config.lock that the
    same step wrote under that earlier run directory.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    for command, flags in PIPELINE:
        if locks_from is not None:
            flags = ["--config", str(Path(locks_from) / command / "config.lock")]
        code = run_cli(workdir, [command, *flags, "--out", command, "--jobs", str(jobs)])
        if code != 0:
            raise AssertionError(f"{command} exited with {code}")
    return workdir


def tree_bytes(root):
    root = Path(root)
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("pipeline") / "run")
