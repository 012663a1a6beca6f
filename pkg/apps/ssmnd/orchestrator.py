"""
Run Orchestrator
Coordinates the multi-step pipelines behind each CLI command.

Checkpoints are addressed by directory or, for bare names, through the CheckpointStore
under the configured runs directory.

train pipeline:
1. Generate the synthetic task
2. Build the model (task pins input shape, channels, classes, readout)
3. Train
4. Save the final checkpoint
5. Write metrics and config snapshots
"""

import csv
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from checkpoint_store import CheckpointStore, load_checkpoint, save_checkpoint
from config import Settings
from core import analysis, inflation, orderings, tasks, training
from core.errors import CheckpointError, ConfigError
from core.model import SsmNdModel, vit_block_params
from models import (
    DELTA_SCALE_SWEEP,
    BenchRequest,
    InflationPlan,
    ModelConfig,
    RunMetrics,
    TaskConfig,
    TrainConfig,
)

logger = logging.getLogger("ssmnd.orchestrator")


def make_run_id(command: str, seed: int, *parts: Any) -> str:
    """Deterministic id from the command and its inputs; never from the clock."""
    text = json.dumps([command, seed, [str(p) for p in parts]])
    return f"{command}_{hashlib.sha1(text.encode('utf-8')).hexdigest()[:12]}"


def _write_json(path: Path, payload: Any) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


class RunOrchestrator:
    """Resolves configs and runs the pipelines behind each subcommand."""

    def __init__(self, settings: Settings):
        self.settings = settings
        self.store = CheckpointStore(settings.runs_dir)

    # ---------- Checkpoints ----------

    def default_run_dir(self, run_id: str) -> Path:
        return Path(self.settings.runs_dir) / run_id

    def open_checkpoint(self, ref: Union[str, Path]) -> tuple[ModelConfig, dict[str, np.ndarray]]:
        """Load a checkpoint directory, or a stored checkpoint when `ref` is a bare name."""
        ref = str(ref)
        if os.path.isdir(ref) or not CheckpointStore.is_valid_name(ref):
            return load_checkpoint(ref)
        stored = self.store.get(ref)
        if stored is None:
            raise CheckpointError(f"no checkpoint directory or stored checkpoint named '{ref}'", field="ckpt")
        return stored

    # ---------- Config resolution ----------

    def _load_document(self, ref: Union[str, dict], kind: str) -> dict:
        if isinstance(ref, dict):
            return ref
        candidates = [ref, os.path.join(self.settings.presets_dir, f"{ref}.json")]
        for path in candidates:
            if os.path.isfile(path):
                with open(path, "r", encoding="utf-8") as f:
                    try:
                        return json.load(f)
                    except json.JSONDecodeError as exc:
                        raise ConfigError(f"{path} is not valid JSON: {exc}", field=kind) from exc
        raise ConfigError(f"no {kind} config file or preset named '{ref}'", field=kind)

    def load_model_config(self, ref: Union[str, dict], **overrides: Any) -> ModelConfig:
        data = {**self._load_document(ref, "model"), **{k: v for k, v in overrides.items() if v is not None}}
        return ModelConfig.model_validate(data)

    def load_train_config(self, ref: Union[str, dict, None], **overrides: Any) -> TrainConfig:
        data = {} if ref is None else self._load_document(ref, "train")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return TrainConfig.model_validate(data)

    def load_plan(self, ref: Union[str, dict]) -> InflationPlan:
        return InflationPlan.model_validate(self._load_document(ref, "plan"))

    # ---------- train ----------

    def run_train(
        self,
        model_ref: Union[str, dict],
        task: TaskConfig,
        train_ref: Union[str, dict, None],
        out_dir: Union[str, Path],
        seed: int,
        run_id: str,
        name: Optional[str] = None,
    ) -> RunMetrics:
        log = logging.LoggerAdapter(logger, {"run_id": run_id})
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        train_config = self.load_train_config(train_ref, seed=seed)

        log.info(f"Step 1/5: generating {task.name} ({task.n_samples} samples)")
        data = tasks.generate(task.name, task.n_samples, task.seed, task.grid)
        task = task.model_copy(update={"grid": list(data.grid)})
        train_set, val_set = data.split(train_config.val_fraction)

        log.info("Step 2/5: building model")
        model_config = self.load_model_config(model_ref, **data.model_fields())
        model = SsmNdModel(model_config)
        log.info(f"Model {model_config.name}: {model.param_count()} parameters, grid {model.grid}")

        log.info(f"Step 3/5: training for {train_config.epochs} epochs")
        result = training.train(model, train_set, val_set, train_config, threads=self.settings.threads)
        if result.diverged:
            log.warning("Training diverged; metrics record the epochs completed before it")

        log.info("Step 4/5: saving checkpoint")
        save_checkpoint(out / "checkpoint", model_config, result.params, self.settings.checkpoint_dtype)
        if name:
            self.store.save(name, model_config, result.params, self.settings.checkpoint_dtype)
            log.info(f"Stored checkpoint as '{name}'")

        log.info("Step 5/5: writing metrics and config snapshots")
        metrics = RunMetrics(
            run_id=run_id,
            task=task.name,
            epochs=result.history,
            final_val_acc=result.final_val_acc,
            diverged=result.diverged,
            param_count=model.param_count(),
        )
        _write_json(out / "model.json", model_config.model_dump(mode="json"))
        _write_json(out / "train.json", train_config.model_dump(mode="json"))
        _write_json(out / "task.json", task.model_dump(mode="json"))
        _write_json(out / "metrics.json", metrics.model_dump(mode="json"))
        with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "lr", "train_loss", "train_acc", "val_acc"])
            for m in result.history:
                writer.writerow([m.epoch, repr(m.lr), repr(m.train_loss), repr(m.train_acc), repr(m.val_acc)])
        log.info(f"Run complete: final val_acc={metrics.final_val_acc:.3f}")
        return metrics

    # ---------- eval ----------

    def run_eval(self, ckpt: Union[str, Path], task: TaskConfig, run_id: str) -> dict:
        log = logging.LoggerAdapter(logger, {"run_id": run_id})
        log.info(f"Step 1/2: loading checkpoint {ckpt}")
        config, params = self.open_checkpoint(ckpt)
        model = SsmNdModel(config)
        log.info(f"Step 2/2: evaluating on {task.name}")
        data = tasks.generate(task.name, task.n_samples, task.seed, task.grid)
        if list(data.grid) != list(config.input_shape):
            raise ConfigError(f"task grid {data.grid} does not match model input {config.input_shape}", field="grid")
        acc = training.evaluate(model, params, data)
        log.info(f"Top-1 accuracy: {acc:.4f}")
        return {"run_id": run_id, "task": task.name, "n_samples": len(data), "accuracy": acc}

    # ---------- erf ----------

    def run_erf(
        self,
        ckpt: Union[str, Path],
        outputs: list[str],
        seed: int,
        run_id: str,
        probe: Optional[list[int]] = None,
    ) -> analysis.ErfMap:
        log = logging.LoggerAdapter(logger, {"run_id": run_id})
        log.info(f"Step 1/3: loading checkpoint {ckpt}")
        config, params = self.open_checkpoint(ckpt)
        model = SsmNdModel(config)

        log.info("Step 2/3: back-propagating from the probe token")
        rng = np.random.default_rng(seed)
        x = rng.normal(size=tuple(config.input_shape) + (config.in_channels,))
        erf_map = analysis.erf(model, params, x, probe=probe)

        log.info(f"Step 3/3: writing {', '.join(outputs)}")
        for path in outputs:
            suffix = Path(path).suffix.lower()
            if suffix == ".csv":
                erf_map.to_csv(path)
            elif suffix == ".pgm":
                erf_map.to_pgm(path)
            else:
                raise ConfigError(f"erf output must end in .csv or .pgm, got '{path}'", field="out")
        return erf_map

    # ---------- bench ----------

    def run_bench(self, request: BenchRequest, out: Optional[str], run_id: str) -> dict:
        log = logging.LoggerAdapter(logger, {"run_id": run_id})
        rows = analysis.bench_curve(request)
        if out:
            analysis.write_curve_csv(rows, out)
            log.info(f"Wrote {len(rows)} curve points to {out}")
        summary = {"run_id": run_id, "points": len(rows), "lo": request.lo, "hi": request.hi}
        if set(request.archs) == {"vit", "mamba"}:
            summary["crossover_tokens"] = analysis.crossover(request)
        return summary

    # ---------- inflate ----------

    def run_inflate(
        self,
        ckpt_in: Union[str, Path],
        plan_ref: Union[str, dict],
        ckpt_out: Union[str, Path, None],
        run_id: str,
        name: Optional[str] = None,
    ) -> ModelConfig:
        log = logging.LoggerAdapter(logger, {"run_id": run_id})
        if ckpt_out is None and not name:
            raise ConfigError("inflate needs an output directory or a store name", field="out")
        config2d, params2d = self.open_checkpoint(ckpt_in)
        plan = self.load_plan(plan_ref)
        log.info(
            f"Inflating {config2d.name}: t_patch={plan.t_patch}, policy={plan.pos_policy}, "
            f"delta_scale={plan.delta_scale}"
        )
        if not plan.on_delta_scale_sweep:
            log.warning(f"delta_scale={plan.delta_scale} is outside the tested sweep {DELTA_SCALE_SWEEP}")
        config3d, params3d = inflation.inflate_model(config2d, params2d, plan)
        if ckpt_out is not None:
            save_checkpoint(ckpt_out, config3d, params3d, self.settings.checkpoint_dtype)
        if name:
            self.store.save(name, config3d, params3d, self.settings.checkpoint_dtype)
            log.info(f"Stored checkpoint as '{name}'")
        return config3d

    # ---------- orderings / paramcount ----------

    def list_orderings(self, rank: int, design_space: bool = False) -> list[str]:
        if design_space:
            return [" ".join(o.name() for o in cycle) for cycle in orderings.alternating_design_space(rank)]
        return [f"{o.name()}\t{o.explicit()}" for o in orderings.enumerate_orderings(rank)]

    def param_count(self, model_ref: Union[str, dict], patch: Optional[list[int]] = None) -> dict:
        config = self.load_model_config(model_ref, patch=patch)
        model = SsmNdModel(config)
        layer_pair = sum(layer.param_count() for layer in model.backbone.layers[:2])
        report = {
            "model": config.name,
            "params": model.param_count(),
            "tokens": model.n_tokens,
            "vit_block_params": vit_block_params(config.d_model),
        }
        if len(model.backbone.layers) >= 2:
            report["two_layer_to_vit_block"] = layer_pair / vit_block_params(config.d_model)
        return report
