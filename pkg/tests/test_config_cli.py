import json

import pytest

from conftest import PIPELINE, run_cli, tree_bytes
from tapkit.config import ConfigError, KEYS, coerce, dumps_lock, load_file, resolve


class TestConfig:
    def test_defaults_and_overrides(self, tmp_path):
        (tmp_path / "c.toml").write_text('count = 3\nsnr_max_db = 5\n')
        cfg = resolve("synth", load_file(tmp_path / "c.toml", "synth"), {"count": 4, "seed": None})
        assert cfg["count"] == 4 and cfg["snr_max_db"] == 5.0 and cfg["seed"] == 0

    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.toml").write_text('cuont = 3\n')
        with pytest.raises(ConfigError, match="cuont"):
            load_file(tmp_path / "c.toml", "synth")

    def test_wrong_command(self, tmp_path):
        (tmp_path / "c.toml").write_text('command = "eval"\n')
        with pytest.raises(ConfigError, match="eval"):
            load_file(tmp_path / "c.toml", "synth")

    def test_coerce(self):
        assert coerce("train-enhancer", "lr", "1e-3, 1e-2") == [1e-3, 1e-2]
        assert coerce("synth", "count", 3.0) == 3
        for key, bad in (("count", 2.5), ("count", True), ("duration_s", "inf"), ("channel", "radio")):
            with pytest.raises(ConfigError):
                coerce("synth", key, bad)

    @pytest.mark.parametrize("command", sorted(KEYS))
    def test_lock_round_trip(self, tmp_path, command):
        cfg = resolve(command)
        (tmp_path / "config.lock").write_text(dumps_lock(command, cfg))
        back = resolve(command, load_file(tmp_path / "config.lock", command))
        assert back == cfg


class TestCli:
    def test_usage_error(self, tmp_path, capsys):
        assert run_cli(tmp_path, ["synth", "--count", "many"]) == 2
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1 and err[0].startswith("tapkit: error: UsageError:")

    def test_runtime_error_json(self, tmp_path, capsys):
        assert run_cli(tmp_path, ["report", "--json", "--out", "r"]) == 1
        doc = json.loads(capsys.readouterr().out.strip())
        assert doc["error"] == "ConfigError" and "records" in doc["message"]

    def test_missing_input(self, tmp_path, capsys):
        assert run_cli(tmp_path, ["train-tap", "--manifest", "nope.jsonl", "--out", "t"]) == 1
        assert capsys.readouterr().err.count("\n") == 1

    def test_synth_twice_identical(self, tmp_path, capsys):
        args = ["synth", "--count", "1", "--seed", "7", "--duration-s", "1", "--source-count", "2",
                "--source-duration-s", "1"]
        assert run_cli(tmp_path, args + ["--out", "a"]) == 0
        assert run_cli(tmp_path, args + ["--out", "b"]) == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
        assert "seed 7" in capsys.readouterr().out

    def test_pipeline_artifacts(self, pipeline_run):
        for command, _ in PIPELINE:
            assert (pipeline_run / command / "config.lock").is_file(), command
        assert len(list((pipeline_run / "extract" / "taps").glob("*.csv"))) == 12
        sweep = json.loads((pipeline_run / "train-enhancer" / "sweep.json").read_text())
        assert [(r["lr"], r["lambda_tap"]) for r in sweep] == [(1e-3, 0.0), (1e-3, 1.0), (1e-2, 0.0), (1e-2, 1.0)]
        for r in sweep:
            assert (pipeline_run / "train-enhancer" / r["dir"] / "history.csv").is_file()
        assert (pipeline_run / "eval" / "improvement_toy.csv").is_file()
        text = (pipeline_run / "report" / "report.txt").read_text()
        assert "Toy" in text and "Source" in text
        header = (pipeline_run / "train-tap" / "history.csv").read_text().splitlines()[0]
        assert header == "epoch,train_mae,val_mae"

    def test_lock_omits_execution_flags(self, pipeline_run):
        lock = (pipeline_run / "synth" / "config.lock").read_text()
        assert lock.startswith('command = "synth"\n')
        assert "jobs" not in lock and "out" not in lock.split("=")[0]

    def test_inputs_not_mutated(self, pipeline_run):
        before = tree_bytes(pipeline_run / "synth")
        assert run_cli(pipeline_run, ["extract", "--manifest", "synth/manifest.jsonl", "--out", "x2"]) == 0
        assert tree_bytes(pipeline_run / "synth") == before

    def test_report_table1(self, tmp_path, capsys):
        from pathlib import Path
        fixture = Path(__file__).parent / "fixtures" / "table1.jsonl"
        assert run_cli(tmp_path, ["report", "--records", str(fixture), "--out", "r"]) == 0
        out = capsys.readouterr().out
        row = next(ln for ln in out.splitlines() if ln.startswith("Google Meets  Phone"))
        assert row.split("|")[1].split()[0] == "1.549" and row.split("|")[2].split()[0] == "0.748"

    def test_gradcheck_scope(self, tmp_path, capsys):
        assert run_cli(tmp_path, ["gradcheck", "--scope", "dense", "--out", "g"]) == 0
        assert "PASS" in capsys.readouterr().out
        doc = json.loads((tmp_path / "g" / "gradcheck.json").read_text())
        assert doc["dense"]["passed"]
