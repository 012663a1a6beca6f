"""
Tests for process settings, the JSON document models and run ids.
"""

import os

import pytest
from pydantic import ValidationError

from config import get_settings
from core.errors import ConfigError
from core.tasks import generate
from models import DELTA_SCALE_SWEEP, BenchRequest, InflationPlan, ModelConfig, TaskConfig
from orchestrator import RunOrchestrator, make_run_id


@pytest.fixture
def fresh_settings():
    get_settings.cache_clear()
    yield get_settings
    get_settings.cache_clear()


# ---------- Test 1: Settings ----------


class TestSettings:
    """Environment variables feed the cached Settings."""

    def test_defaults(self, monkeypatch, fresh_settings):
        for name in ("SSMND_THREADS", "SSMND_LOG_LEVEL", "SSMND_RUNS_DIR", "SSMND_CHECKPOINT_DTYPE"):
            monkeypatch.delenv(name, raising=False)
        settings = fresh_settings()
        assert settings.threads == 1
        assert settings.log_level == "INFO"
        assert settings.checkpoint_dtype == "float32"
        assert os.path.isfile(os.path.join(settings.presets_dir, "mamba2d-s.json"))
        assert os.path.isfile(os.path.join(settings.schemas_dir, "checkpoint-manifest.schema.json"))

    def test_environment(self, monkeypatch, fresh_settings):
        monkeypatch.setenv("SSMND_THREADS", "4")
        monkeypatch.setenv("SSMND_LOG_LEVEL", "debug")
        monkeypatch.setenv("SSMND_RUNS_DIR", "/tmp/ssmnd-runs")
        monkeypatch.setenv("SSMND_CHECKPOINT_DTYPE", "float64")
        settings = fresh_settings()
        assert (settings.threads, settings.log_level) == (4, "DEBUG")
        assert settings.runs_dir == "/tmp/ssmnd-runs"
        assert settings.checkpoint_dtype == "float64"

    @pytest.mark.parametrize("raw,expected", [("0", 1), ("-3", 1), ("many", 1), ("", 1)])
    def test_bad_thread_counts(self, monkeypatch, fresh_settings, raw, expected):
        monkeypatch.setenv("SSMND_THREADS", raw)
        assert fresh_settings().threads == expected

    def test_unknown_dtype_falls_back(self, monkeypatch, fresh_settings):
        monkeypatch.setenv("SSMND_CHECKPOINT_DTYPE", "bfloat16")
        assert fresh_settings().checkpoint_dtype == "float32"

    def test_cached(self, fresh_settings):
        assert fresh_settings() is fresh_settings()


# ---------- Test 2: Documents ----------


class TestDocuments:
    """Validation of the JSON configs."""

    def test_every_model_preset_validates(self, presets_dir):
        orchestrator = RunOrchestrator(get_settings())
        for name in sorted(os.listdir(presets_dir)):
            stem = name[: -len(".json")]
            if stem.startswith(("train-", "inflate-")):
                continue
            config = orchestrator.load_model_config(stem)
            assert config.rank == len(config.input_shape)

    def test_train_and_plan_presets(self):
        orchestrator = RunOrchestrator(get_settings())
        assert orchestrator.load_train_config("train-tiny").lr == 1e-3
        assert orchestrator.load_plan("inflate-hmdb").frames == 32

    def test_overrides_win(self):
        orchestrator = RunOrchestrator(get_settings())
        config = orchestrator.load_model_config("2d-tiny", n_layers=2, patch=None)
        assert config.n_layers == 2
        assert config.patch == [1, 1]

    def test_unknown_ref(self):
        with pytest.raises(ConfigError):
            RunOrchestrator(get_settings()).load_model_config("no-such-preset")

    def test_invalid_json(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json", encoding="utf-8")
        with pytest.raises(ConfigError):
            RunOrchestrator(get_settings()).load_model_config(str(bad))

    def test_rejections(self):
        with pytest.raises(ValidationError):
            TaskConfig(name="imagenet")
        with pytest.raises(ValidationError):
            InflationPlan(frames=4, pos_policy="tile")
        with pytest.raises(ValidationError):
            InflationPlan(frames=4, delta_scale=0.0)
        with pytest.raises(ValidationError):
            ModelConfig(rank=2, input_shape=[8, 8], patch=[1, 1], d_model=4, n_layers=1, factorization="3d")
        with pytest.raises(ValidationError):
            BenchRequest(archs=["rnn"])

    @pytest.mark.parametrize("name, grid", [("causal-trap-2d", (8, 8)), ("temporal-pointer-3d", (4, 4, 4))])
    def test_task_grid_defaults_to_the_task(self, name, grid):
        task = TaskConfig(name=name)
        assert task.grid is None
        assert generate(task.name, 2, task.seed, task.grid).grid == grid

    @pytest.mark.parametrize("scale", DELTA_SCALE_SWEEP)
    def test_delta_scale_sweep_round_trips(self, scale):
        plan = InflationPlan(frames=4, delta_scale=scale)
        restored = InflationPlan.model_validate_json(plan.model_dump_json())
        assert restored.delta_scale == scale
        assert restored.on_delta_scale_sweep

    def test_off_sweep_delta_scale_is_accepted_but_flagged(self):
        plan = InflationPlan(frames=4, delta_scale=3.7)
        assert plan.delta_scale == 3.7
        assert not plan.on_delta_scale_sweep


# ---------- Test 3: Run ids ----------


class TestRunIds:
    """Run ids depend on inputs only."""

    def test_deterministic(self):
        assert make_run_id("train", 0, "a=1") == make_run_id("train", 0, "a=1")

    def test_sensitive_to_inputs(self):
        ids = {make_run_id("train", 0, "a=1"), make_run_id("train", 1, "a=1"), make_run_id("eval", 0, "a=1")}
        assert len(ids) == 3

    def test_format(self):
        run_id = make_run_id("bench", 3)
        prefix, digest = run_id.split("_")
        assert prefix == "bench"
        assert len(digest) == 12
        int(digest, 16)
