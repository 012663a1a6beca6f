"""
Desk-scale training loop: AdamW, warmup + cosine schedule, label smoothing, optional
mixup and EMA, global-norm clipping and deterministic micro-batch accumulation.

Every random draw is keyed on (seed, epoch, step, micro-batch) so the final weights do
not depend on how many worker threads computed the micro-batches.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from core.errors import ConfigError
from core.model import SsmNdModel, to_leaves
from core.tasks import Dataset
from core.tensor import Tape, backward, log_softmax, reduce_sum
from models import EpochMetrics, TrainConfig

logger = logging.getLogger("ssmnd.core.training")


# ---------- Loss ----------


def soft_targets(labels: np.ndarray, n_classes: int, smoothing: float = 0.0) -> np.ndarray:
    onehot = np.eye(n_classes)[np.asarray(labels, dtype=np.int64)]
    return (1.0 - smoothing) * onehot + smoothing / n_classes


def cross_entropy(logits, targets: np.ndarray):
    """Mean over the batch of -sum_c q_c log p_c for soft targets q."""
    batch = targets.shape[0]
    return reduce_sum(log_softmax(logits, axis=-1) * (-targets / batch))


# ---------- Schedule ----------


def schedule_lr(
    step: int, total_steps: int, warmup_steps: int, base: float, warmup_lr: float, floor: float
) -> float:
    """Linear warmup from warmup_lr to base, then cosine from base down to floor."""
    if base == 0.0:
        return 0.0
    if warmup_steps > 0 and step < warmup_steps:
        return warmup_lr + (base - warmup_lr) * step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * progress))


def group_multiplier(name: str, groups: dict[str, float]) -> float:
    """Multiplier of the longest matching name prefix, 1.0 when none matches."""
    best, scale = -1, 1.0
    for prefix, mult in groups.items():
        if name.startswith(prefix) and len(prefix) > best:
            best, scale = len(prefix), mult
    return scale


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: Optional[float]) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


# ---------- Optimizer ----------


class AdamW:
    """Adam with decoupled weight decay; decay applies to matrices only, not norms or biases."""

    def __init__(self, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lrs: dict[str, float]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            lr = lrs[name]
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1.0 - self.beta1) * g if m is None else self.beta1 * m + (1.0 - self.beta1) * g
            v = (1.0 - self.beta2) * g * g if v is None else self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            p = params[name]
            if self.weight_decay and p.ndim >= 2:
                p = p - lr * self.weight_decay * p
            params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------- Evaluation ----------


def predict_logits(model: SsmNdModel, params: dict[str, np.ndarray], x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    chunks = [model.predict(params, x[i : i + batch_size]) for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(chunks, axis=0)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


def evaluate(model: SsmNdModel, params: dict[str, np.ndarray], dataset: Dataset, batch_size: int = 64) -> float:
    """Top-1 accuracy in [0, 1]."""
    return accuracy(predict_logits(model, params, dataset.x, batch_size), dataset.y)


# ---------- Training ----------


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[EpochMetrics] = field(default_factory=list)
    diverged: bool = False

    @property
    def final_val_acc(self) -> float:
        return self.history[-1].val_acc if self.history else 0.0


def _microbatch_grads(
    model: SsmNdModel,
    params: dict[str, np.ndarray],
    x: np.ndarray,
    targets: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
) -> tuple[float, int, dict[str, np.ndarray]]:
    tape = Tape()
    leaves = to_leaves(tape, params)
    logits = model.forward(leaves, x, train=True, rng=rng)
    loss = cross_entropy(logits, targets)
    grads = backward(tape, loss)
    correct = int(np.sum(np.argmax(logits.value, axis=-1) == labels))
    out = {}
    for name, leaf in leaves.items():
        g = grads.raw(leaf)
        out[name] = np.zeros_like(params[name]) if g is None else g
    return float(loss.value), correct, out


def train(
    model: SsmNdModel,
    train_set: Dataset,
    val_set: Dataset,
    config: TrainConfig,
    threads: int = 1,
    on_epoch: Optional[Callable[[EpochMetrics], None]] = None,
) -> TrainResult:
    """Train from a fresh init keyed on config.seed; stops early if the loss diverges."""
    if model.config.head != "classification":
        raise ConfigError("training supports classification heads only", field="head")
    if train_set.n_classes != model.config.n_classes:
        raise ConfigError(
            f"task has {train_set.n_classes} classes, model head has {model.config.n_classes}",
            field="n_classes",
        )
    if config.randaug is not None:
        logger.info("randaug settings recorded; synthetic tasks are not image-like so it is not applied")

    params = model.init_params(config.seed)
    ema = {k: v.copy() for k, v in params.items()} if config.ema else None
    optimizer = AdamW(config.betas, config.eps, config.weight_decay)
    multipliers = {name: group_multiplier(name, config.param_group_lr) for name in params}

    n = len(train_set)
    batch = min(config.batch_size, n)
    steps_per_epoch = math.ceil(n / batch)
    total_steps = config.epochs * steps_per_epoch
    warmup_steps = config.warmup_epochs * steps_per_epoch
    result = TrainResult(params=params)
    step = 0

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for epoch in range(config.epochs):
            order = np.random.default_rng([config.seed, epoch]).permutation(n)
            loss_sum, correct, seen = 0.0, 0, 0
            lr = 0.0
            for start in range(0, n, batch):
                index = order[start : start + batch]
                x, labels = train_set.x[index], train_set.y[index]
                targets = soft_targets(labels, train_set.n_classes, config.label_smoothing)
                if config.mixup > 0:
                    mix_rng = np.random.default_rng([config.seed, epoch, step, 1 << 20])
                    lam = mix_rng.beta(config.mixup, config.mixup)
                    perm = mix_rng.permutation(len(index))
                    x = lam * x + (1.0 - lam) * x[perm]
                    targets = lam * targets + (1.0 - lam) * targets[perm]

                chunks = list(range(0, len(index), config.microbatch))
                jobs = [
                    pool.submit(
                        _microbatch_grads,
                        model,
                        params,
                        x[c : c + config.microbatch],
                        targets[c : c + config.microbatch],
                        labels[c : c + config.microbatch],
                        np.random.default_rng([config.seed, epoch, step, i]),
                    )
                    for i, c in enumerate(chunks)
                ]
                grads: dict[str, np.ndarray] = {}
                batch_loss = 0.0
                for c, job in zip(chunks, jobs):
                    mb_loss, mb_correct, mb_grads = job.result()
                    weight = min(config.microbatch, len(index) - c) / len(index)
                    batch_loss += weight * mb_loss
                    correct += mb_correct
                    for name, g in mb_grads.items():
                        grads[name] = weight * g if name not in grads else grads[name] + weight * g
                seen += len(index)

                if not math.isfinite(batch_loss):
                    logger.warning(f"loss diverged at epoch {epoch} step {step}; stopping")
                    result.diverged = True
                    break
                loss_sum += batch_loss * len(index)

                clip_global_norm(grads, config.grad_clip)
                lr = schedule_lr(step, total_steps, warmup_steps, config.lr, config.warmup_lr, config.floor_lr)
                optimizer.step(params, grads, {k: lr * multipliers[k] for k in params})
                if ema is not None:
                    for k in params:
                        ema[k] = config.ema_decay * ema[k] + (1.0 - config.ema_decay) * params[k]
                step += 1

            if result.diverged:
                break
            eval_params = ema if ema is not None else params
            metrics = EpochMetrics(
                epoch=epoch,
                lr=lr,
                train_loss=loss_sum / max(seen, 1),
                train_acc=correct / max(seen, 1),
                val_acc=evaluate(model, eval_params, val_set),
            )
            result.history.append(metrics)
            logger.info(
                f"epoch {epoch + 1}/{config.epochs}: loss={metrics.train_loss:.4f} "
                f"train_acc={metrics.train_acc:.3f} val_acc={metrics.val_acc:.3f} lr={lr:.2e}"
            )
            if on_epoch is not None:
                on_epoch(metrics)

    result.params = ema if ema is not None else params
    return result
