"""
ssmnd command line
Entry point with logging setup, subcommand dispatch and error handling.
"""

import argparse
import dataclasses
import json
import logging
import sys
from typing import Any, Optional, Sequence

from dotenv import load_dotenv
from pydantic import ValidationError

from config import get_settings
from core.analysis import token_count
from core.errors import SsmNdError
from models import BenchRequest, TaskConfig
from orchestrator import RunOrchestrator, make_run_id

COMMANDS = ("train", "eval", "erf", "bench", "inflate", "orderings", "paramcount")

logger = logging.getLogger("ssmnd.cli")


# ---------- Logging ----------
def configure_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(
        logging.Formatter(
            "%(asctime)s [%(levelname)s] %(name)s [%(run_id)s] %(message)s",
            datefmt="%Y-%m-%dT%H:%M:%S",
            defaults={"run_id": "-"},
        )
    )
    logging.basicConfig(level=level, handlers=[handler], force=True)


# ---------- Parser ----------
def _csv_list(text: str) -> list[str]:
    return [part for part in text.split(",") if part]


def _length_range(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(v) for v in text.split(":"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got '{text}'") from exc
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssmnd", description="Multi-dimensional selective SSM toolkit")
    parser.add_argument("--seed", type=int, default=0, help="Seed for every random draw")
    parser.add_argument("--threads", type=int, default=None, help="Worker cap (overrides SSMND_THREADS)")
    parser.add_argument("--log-level", default=None, help="Logging level (overrides SSMND_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    def task_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--task", required=True, help="causal-trap-2d | cross-parity-2d | temporal-pointer-3d")
        p.add_argument("--grid", type=int, nargs="+", default=None, help="Task grid extents")
        p.add_argument("--n-samples", type=int, default=1000)
        p.add_argument("--task-seed", type=int, default=None, help="Defaults to --seed")

    p = sub.add_parser("train", help="Train a model on a synthetic task")
    p.add_argument("--model", required=True, help="Model JSON path or preset name")
    p.add_argument("--train", default=None, help="Train JSON path or preset name")
    p.add_argument("--out", default=None, help="Run directory (default: <runs_dir>/<run_id>)")
    p.add_argument("--name", default=None, help="Also keep the checkpoint in the store under this name")
    task_args(p)

    p = sub.add_parser("eval", help="Top-1 accuracy of a checkpoint on a synthetic task")
    p.add_argument("--ckpt", required=True, help="Checkpoint directory or stored name")
    task_args(p)

    p = sub.add_parser("erf", help="Effective receptive field of a checkpoint")
    p.add_argument("--ckpt", required=True, help="Checkpoint directory or stored name")
    p.add_argument("--out", type=_csv_list, required=True, help="Comma-separated .pgm/.csv outputs")
    p.add_argument("--probe", type=int, nargs="+", default=None, help="Probe token coordinates")

    p = sub.add_parser("bench", help="FLOP curves of ViT and Mamba stacks")
    p.add_argument("--arch", type=_csv_list, default=["vit", "mamba"])
    p.add_argument("--range", type=_length_range, default=(196, 12544), dest="length_range")
    p.add_argument("--points", type=int, default=32)
    p.add_argument("--d-model", type=int, default=768)
    p.add_argument("--vit-layers", type=int, default=12)
    p.add_argument("--mamba-layers", type=int, default=24)
    p.add_argument("--image", type=int, nargs="+", default=None, help="Input extents for --patch")
    p.add_argument("--patch", type=int, nargs="+", default=None, help="Patch sizes to report tokens for")
    p.add_argument("--out", default=None, help="Curve CSV path")

    p = sub.add_parser("inflate", help="Inflate a 2-D checkpoint to 3-D")
    p.add_argument("--in", dest="ckpt_in", required=True, help="2-D checkpoint directory or stored name")
    p.add_argument("--out", dest="ckpt_out", default=None, help="3-D checkpoint directory")
    p.add_argument("--name", default=None, help="Keep the 3-D checkpoint in the store under this name")
    p.add_argument("--plan", required=True, help="InflationPlan JSON path or preset name")

    p = sub.add_parser("orderings", help="List scan orderings")
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--design-space", action="store_true", help="List alternating cycle configurations")

    p = sub.add_parser("paramcount", help="Exact trainable parameter count")
    p.add_argument("--model", required=True)
    p.add_argument("--patch", type=int, nargs="+", default=None, help="Override patch sizes")
    return parser


# ---------- Commands ----------
def _task(args: argparse.Namespace) -> TaskConfig:
    fields: dict[str, Any] = {
        "name": args.task,
        "n_samples": args.n_samples,
        "seed": args.seed if args.task_seed is None else args.task_seed,
    }
    if args.grid:
        fields["grid"] = args.grid
    return TaskConfig.model_validate(fields)


def _emit(payload: Any) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def run_command(args: argparse.Namespace, orchestrator: RunOrchestrator, run_id: str) -> None:
    if args.command == "train":
        out = args.out or orchestrator.default_run_dir(run_id)
        metrics = orchestrator.run_train(args.model, _task(args), args.train, out, args.seed, run_id, name=args.name)
        _emit(
            {
                "run_id": run_id,
                "out": str(out),
                "final_val_acc": metrics.final_val_acc,
                "diverged": metrics.diverged,
            }
        )
    elif args.command == "eval":
        _emit(orchestrator.run_eval(args.ckpt, _task(args), run_id))
    elif args.command == "erf":
        erf_map = orchestrator.run_erf(args.ckpt, args.out, args.seed, run_id, probe=args.probe)
        _emit({"run_id": run_id, "probe": list(erf_map.probe), "support": int(erf_map.support().sum())})
    elif args.command == "bench":
        lo, hi = args.length_range
        request = BenchRequest(
            archs=args.arch,
            lo=lo,
            hi=hi,
            points=args.points,
            d_model=args.d_model,
            vit_layers=args.vit_layers,
            mamba_layers=args.mamba_layers,
        )
        summary = orchestrator.run_bench(request, args.out, run_id)
        if args.patch:
            image = args.image or [224, 224]
            summary["tokens_per_patch"] = {
                str(p): token_count(image, [p] * len(image)) for p in args.patch
            }
        _emit(summary)
    elif args.command == "inflate":
        config3d = orchestrator.run_inflate(args.ckpt_in, args.plan, args.ckpt_out, run_id, name=args.name)
        _emit({"run_id": run_id, "model": config3d.name, "n_layers": config3d.n_layers})
    elif args.command == "orderings":
        for line in orchestrator.list_orderings(args.rank, args.design_space):
            print(line)
    elif args.command == "paramcount":
        _emit(orchestrator.param_count(args.model, patch=args.patch))


def _fail(message: str, field: Optional[str], run_id: str) -> int:
    print(json.dumps({"error": message, "field": field, "run_id": run_id}), file=sys.stderr)
    return 1


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Parse argv, run one command and return the process exit code."""
    load_dotenv()
    args = build_parser().parse_args(argv)
    settings = get_settings()
    if args.threads is not None:
        settings = dataclasses.replace(settings, threads=max(1, args.threads))
    configure_logging((args.log_level or settings.log_level).upper())

    run_id = make_run_id(args.command, args.seed, *[f"{k}={v}" for k, v in sorted(vars(args).items())])
    log = logging.LoggerAdapter(logger, {"run_id": run_id})
    log.info(f"{args.command} started (seed={args.seed}, threads={settings.threads})")

    try:
        run_command(args, RunOrchestrator(settings), run_id)
    except ValidationError as exc:
        first = exc.errors()[0]
        field = ".".join(str(p) for p in first["loc"]) or None
        log.error(f"Invalid configuration: {first['msg']} ({field})")
        return _fail(first["msg"], field, run_id)
    except SsmNdError as exc:
        log.error(f"{type(exc).__name__}: {exc}")
        return _fail(str(exc), exc.field, run_id)
    except Exception as exc:
        log.error(f"Unhandled error: {exc}", exc_info=True)
        return _fail("internal error", None, run_id)
    log.info(f"{args.command} finished")
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
