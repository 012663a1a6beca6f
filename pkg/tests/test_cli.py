"""
End-to-end tests for the ssmnd command line.
"""

import csv
import json
import os

import jsonschema
import pytest

from checkpoint_store import CheckpointStore
from config import get_settings
from main import dispatch


def run(capsys, *argv):
    code = dispatch(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def error_of(err: str) -> dict:
    return json.loads(err.strip().splitlines()[-1])


# ---------- Fixtures ----------


@pytest.fixture
def runs_dir(tmp_path, monkeypatch):
    """Point SSMND_RUNS_DIR at a temporary directory with a fresh settings cache."""
    monkeypatch.setenv("SSMND_RUNS_DIR", str(tmp_path / "runs"))
    monkeypatch.delenv("SSMND_THREADS", raising=False)
    get_settings.cache_clear()
    yield tmp_path / "runs"
    get_settings.cache_clear()


@pytest.fixture
def tiny_files(tmp_path):
    """Model and train configs small enough to train in a second."""
    model = {
        "name": "cli-tiny",
        "rank": 2,
        "input_shape": [4, 4],
        "in_channels": 1,
        "patch": [1, 1],
        "d_model": 4,
        "n_layers": 2,
        "d_state": 2,
        "arrangement": "W+",
    }
    train = {"lr": 1e-2, "epochs": 2, "warmup_epochs": 1, "batch_size": 8, "microbatch": 4}
    plan = {"frames": 2, "t_patch": 1, "t_period": 2}
    paths = {}
    for name, payload in (("model", model), ("train", train), ("plan", plan)):
        paths[name] = tmp_path / f"{name}.json"
        paths[name].write_text(json.dumps(payload), encoding="utf-8")
    return paths


def train_args(files, out, seed="0"):
    return [
        "--seed", seed,
        "train",
        "--model", str(files["model"]),
        "--train", str(files["train"]),
        "--task", "causal-trap-2d",
        "--grid", "4", "4",
        "--n-samples", "24",
        "--out", str(out),
    ]


# ---------- Test 1: Listing commands ----------


class TestListing:
    """orderings and paramcount."""

    def test_three_d_orderings(self, capsys):
        code, out, _ = run(capsys, "orderings", "--rank", "3")
        assert code == 0
        lines = out.strip().splitlines()
        assert len(lines) == 12
        assert len({line.split("\t")[0] for line in lines}) == 12

    def test_design_space(self, capsys):
        code, out, _ = run(capsys, "orderings", "--rank", "3", "--design-space")
        assert code == 0
        lines = out.strip().splitlines()
        assert len(lines) == 48
        assert len(set(lines)) == 48

    def test_paramcount(self, capsys):
        code, out, _ = run(capsys, "paramcount", "--model", "mamba2d-s")
        assert code == 0
        report = json.loads(out)
        assert abs(report["params"] - 24e6) / 24e6 < 0.15
        assert 0.8 <= report["two_layer_to_vit_block"] <= 1.2
        assert report["tokens"] == 784

    def test_paramcount_patch_override(self, capsys):
        _, out, _ = run(capsys, "paramcount", "--model", "mamba2d-s", "--patch", "16", "16")
        assert json.loads(out)["tokens"] == 196


# ---------- Test 2: bench ----------


class TestBench:
    """FLOP curves from the command line."""

    def test_curve(self, capsys, tmp_path):
        path = tmp_path / "curve.csv"
        code, out, _ = run(capsys, "bench", "--range", "196:12544", "--points", "6", "--out", str(path))
        assert code == 0
        summary = json.loads(out)
        assert summary["crossover_tokens"] == pytest.approx(7984.0)
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        assert int(rows[0]["tokens"]) == 196
        assert int(rows[-1]["tokens"]) == 12544
        assert set(rows[0]) == {"tokens", "vit", "mamba"}

    def test_tokens_per_patch(self, capsys):
        _, out, _ = run(capsys, "bench", "--arch", "mamba", "--patch", "16", "8", "4")
        assert json.loads(out)["tokens_per_patch"] == {"16": 196, "8": 784, "4": 3136}


# ---------- Test 3: Errors ----------


class TestErrors:
    """Exit codes and structured error output."""

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as exc_info:
            dispatch(["serve"])
        assert exc_info.value.code == 2

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as exc_info:
            dispatch(["orderings", "--rank", "2", "--verbose"])
        assert exc_info.value.code == 2

    def test_missing_preset(self, capsys):
        code, out, err = run(capsys, "paramcount", "--model", "no-such-model")
        assert code == 1
        assert out == ""
        payload = error_of(err)
        assert payload["field"] == "model"
        assert payload["run_id"].startswith("paramcount_")

    def test_validation_error_names_the_field(self, capsys):
        code, _, err = run(capsys, "bench", "--points", "1")
        assert code == 1
        assert error_of(err)["field"] == "points"

    def test_bad_rank(self, capsys):
        code, _, err = run(capsys, "orderings", "--rank", "0")
        assert code == 1
        assert "rank" in error_of(err)["error"]


# ---------- Test 4: Runs ----------


class TestRuns:
    """train -> eval -> erf -> inflate on a tiny model."""

    def test_pipeline(self, capsys, tmp_path, tiny_files):
        run_dir = tmp_path / "run"
        code, out, _ = run(capsys, *train_args(tiny_files, run_dir))
        assert code == 0
        assert json.loads(out)["diverged"] is False
        for name in ("model.json", "train.json", "task.json", "metrics.json", "metrics.csv"):
            assert (run_dir / name).is_file(), name
        assert (run_dir / "checkpoint" / "weights.bin").is_file()
        metrics = json.loads((run_dir / "metrics.json").read_text())
        schema_path = os.path.join(get_settings().schemas_dir, "run-metrics.schema.json")
        with open(schema_path, "r", encoding="utf-8") as f:
            jsonschema.validate(metrics, json.load(f))
        assert [e["epoch"] for e in metrics["epochs"]] == [0, 1]
        snapshot = json.loads((run_dir / "model.json").read_text())
        assert snapshot["readout"] == "position"
        assert snapshot["n_classes"] == 2

        ckpt = str(run_dir / "checkpoint")
        code, out, _ = run(capsys, "eval", "--ckpt", ckpt, "--task", "causal-trap-2d", "--grid", "4", "4", "--n-samples", "50")
        assert code == 0
        result = json.loads(out)
        assert result["n_samples"] == 50
        assert 0.0 <= result["accuracy"] <= 1.0

        pgm, csv_path = tmp_path / "map.pgm", tmp_path / "map.csv"
        code, out, _ = run(capsys, "erf", "--ckpt", ckpt, "--out", f"{pgm},{csv_path}")
        assert code == 0
        report = json.loads(out)
        assert report["probe"] == [2, 2]
        assert report["support"] == 11
        with open(csv_path, newline="") as f:
            rows = list(csv.DictReader(f))
        after = [float(r["sensitivity"]) for r in rows if int(r["h"]) * 4 + int(r["w"]) > 10]
        assert after == [0.0] * 5
        assert pgm.read_bytes().startswith(b"P5\n4 4\n255\n")

        inflated = tmp_path / "inflated"
        code, out, _ = run(
            capsys, "inflate", "--in", ckpt, "--out", str(inflated), "--plan", str(tiny_files["plan"])
        )
        assert code == 0
        assert json.loads(out)["n_layers"] == 4
        model3d = json.loads((inflated / "model.json").read_text())
        assert model3d["input_shape"] == [2, 4, 4]

    def test_same_seed_same_artifacts(self, capsys, tmp_path, tiny_files):
        assert run(capsys, *train_args(tiny_files, tmp_path / "a"))[0] == 0
        assert run(capsys, *train_args(tiny_files, tmp_path / "b"))[0] == 0
        for name in ("checkpoint/weights.bin", "checkpoint/manifest.json", "metrics.csv", "model.json", "train.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name

    def test_eval_grid_mismatch(self, capsys, tmp_path, tiny_files):
        run(capsys, *train_args(tiny_files, tmp_path / "run"))
        code, _, err = run(
            capsys,
            "eval", "--ckpt", str(tmp_path / "run" / "checkpoint"),
            "--task", "causal-trap-2d", "--grid", "5", "5",
        )
        assert code == 1
        assert error_of(err)["field"] == "grid"

    def test_erf_rejects_unknown_suffix(self, capsys, tmp_path, tiny_files):
        run(capsys, *train_args(tiny_files, tmp_path / "run"))
        code, _, err = run(
            capsys, "erf", "--ckpt", str(tmp_path / "run" / "checkpoint"), "--out", str(tmp_path / "map.png")
        )
        assert code == 1
        assert error_of(err)["field"] == "out"

    def test_three_d_task_uses_its_own_grid(self, capsys, tmp_path, runs_dir):
        model = {
            "name": "cli-tiny-3d",
            "rank": 3,
            "input_shape": [4, 4, 4],
            "in_channels": 2,
            "patch": [2, 2, 2],
            "d_model": 4,
            "n_layers": 1,
            "d_state": 2,
            "arrangement": "nd-ssm",
        }
        model_path = tmp_path / "model3d.json"
        model_path.write_text(json.dumps(model), encoding="utf-8")
        train_path = tmp_path / "train3d.json"
        train_path.write_text(json.dumps({"epochs": 1, "warmup_epochs": 0, "batch_size": 8}), encoding="utf-8")
        run_dir = tmp_path / "run3d"
        code, _, err = run(
            capsys,
            "train", "--model", str(model_path), "--train", str(train_path),
            "--task", "temporal-pointer-3d", "--n-samples", "20", "--out", str(run_dir),
        )
        assert code == 0, err
        assert json.loads((run_dir / "task.json").read_text())["grid"] == [4, 4, 4]
        assert json.loads((run_dir / "model.json").read_text())["input_shape"] == [4, 4, 4]

        code, out, _ = run(
            capsys, "eval", "--ckpt", str(run_dir / "checkpoint"), "--task", "temporal-pointer-3d", "--n-samples", "16"
        )
        assert code == 0
        assert json.loads(out)["n_samples"] == 16


    def test_erf_probe_out_of_range(self, capsys, tmp_path, tiny_files):
        run(capsys, *train_args(tiny_files, tmp_path / "run"))
        code, _, err = run(
            capsys,
            "erf", "--ckpt", str(tmp_path / "run" / "checkpoint"),
            "--out", str(tmp_path / "map.csv"), "--probe", "9", "9",
        )
        assert code == 1
        assert error_of(err)["field"] == "probe"

# ---------- Test 5: Checkpoint store and settings ----------


class TestStoredCheckpoints:
    """Named checkpoints under SSMND_RUNS_DIR and per-invocation settings."""

    def test_train_defaults_to_runs_dir_and_stores_by_name(self, capsys, runs_dir, tiny_files):
        args = train_args(tiny_files, "unused")
        args = args[: args.index("--out")] + ["--name", "trap"]
        code, out, _ = run(capsys, *args)
        assert code == 0
        report = json.loads(out)
        assert report["out"] == str(runs_dir / report["run_id"])
        assert (runs_dir / report["run_id"] / "checkpoint" / "weights.bin").is_file()
        assert CheckpointStore(runs_dir).list_all() == ["trap"]

        code, out, _ = run(capsys, "eval", "--ckpt", "trap", "--task", "causal-trap-2d", "--grid", "4", "4", "--n-samples", "20")
        assert code == 0
        assert json.loads(out)["n_samples"] == 20

        code, out, _ = run(capsys, "inflate", "--in", "trap", "--name", "trap-3d", "--plan", str(tiny_files["plan"]))
        assert code == 0
        assert json.loads(out)["n_layers"] == 4
        assert CheckpointStore(runs_dir).list_all() == ["trap", "trap-3d"]
        config3d, _ = CheckpointStore(runs_dir).get("trap-3d")
        assert config3d.input_shape == [2, 4, 4]

    def test_unknown_stored_name(self, capsys, runs_dir):
        code, _, err = run(capsys, "erf", "--ckpt", "nothing-here", "--out", "map.csv")
        assert code == 1
        assert error_of(err)["field"] == "ckpt"

    def test_inflate_needs_a_destination(self, capsys, runs_dir, tiny_files):
        code, _, err = run(capsys, "inflate", "--in", "trap", "--plan", str(tiny_files["plan"]))
        assert code == 1
        assert error_of(err)["field"] == "out"

    def test_threads_flag_does_not_leak_into_cached_settings(self, capsys, runs_dir):
        assert get_settings().threads == 1
        code, _, _ = run(capsys, "--threads", "3", "orderings", "--rank", "2")
        assert code == 0
        assert get_settings().threads == 1
