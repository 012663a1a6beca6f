"""
Effective receptive fields and the closed-form FLOP model.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from core.errors import TokenIndexError
from core.model import SsmNdModel
from core.tensor import Tape, backward
from models import BenchRequest, FlopCoefficients

logger = logging.getLogger("ssmnd.core.analysis")


# ---------- Effective receptive field ----------


@dataclass
class ErfMap:
    """Sensitivity of one output token to every input token, on the token grid, in [0, 1]."""

    values: np.ndarray
    probe: tuple[int, ...]

    @property
    def grid(self) -> tuple[int, ...]:
        return self.values.shape

    def support(self) -> np.ndarray:
        return self.values != 0

    def image(self) -> np.ndarray:
        """2-D view for rendering: frames of a 3-D map are stacked vertically."""
        if self.values.ndim == 1:
            return self.values[None, :]
        return self.values.reshape(-1, self.values.shape[-1])

    def to_csv(self, path: Union[str, Path]) -> None:
        path = Path(path)
        axes = ["t", "h", "w"][-self.values.ndim :] if self.values.ndim <= 3 else [
            f"a{i}" for i in range(self.values.ndim)
        ]
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(axes + ["sensitivity"])
            for index in np.ndindex(*self.values.shape):
                writer.writerow(list(index) + [repr(float(self.values[index]))])

    def to_pgm(self, path: Union[str, Path]) -> None:
        """8-bit binary PGM (P5), 255 == maximum sensitivity."""
        img = np.rint(self.image() * 255.0).astype(np.uint8)
        header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
        Path(path).write_bytes(header + img.tobytes())


def center_probe(grid: Sequence[int]) -> tuple[int, ...]:
    return tuple(g // 2 for g in grid)


def erf(
    model: SsmNdModel,
    params: dict[str, np.ndarray],
    x: np.ndarray,
    probe: Optional[Union[int, Sequence[int]]] = None,
    depth: Optional[int] = None,
) -> ErfMap:
    """
    Back-propagate ones from every channel of the probe token's output features to the
    patch tokens of a single input; |gradient| is summed over token channels and
    divided by its maximum.
    """
    grid = model.grid
    if probe is None:
        probe = center_probe(grid)
    if isinstance(probe, (int, np.integer)):
        if not 0 <= int(probe) < model.n_tokens:
            raise TokenIndexError(f"probe {probe} outside {model.n_tokens} tokens", field="probe")
        probe = tuple(int(i) for i in np.unravel_index(int(probe), grid))
    probe = tuple(int(i) for i in probe)
    if len(probe) != len(grid) or any(not 0 <= p < g for p, g in zip(probe, grid)):
        raise TokenIndexError(f"probe {probe} outside token grid {grid}", field="probe")

    x = np.asarray(x)
    if x.ndim == len(model.config.input_shape) + 1:
        x = x[None]
    if x.shape[0] != 1:
        raise ValueError(f"erf takes a single input, got batch of {x.shape[0]}")
    tape = Tape()
    tokens = tape.leaf(model.embed_input(x), name="tokens")
    out = model.features(params, tokens, depth=depth)
    seed = np.zeros(out.shape)
    seed[0, int(np.ravel_multi_index(probe, grid)), :] = 1.0
    grads = backward(tape, out, seed)
    g = grads.raw(tokens)
    if g is None:
        g = np.zeros(tokens.shape)
    sensitivity = np.abs(g[0]).sum(axis=-1).reshape(grid)
    peak = sensitivity.max()
    if peak > 0:
        sensitivity = sensitivity / peak
    logger.debug(f"erf probe {probe}: {(sensitivity > 0).sum()} of {sensitivity.size} tokens reached")
    return ErfMap(values=sensitivity, probe=probe)


# ---------- FLOP model ----------


def vit_flops(
    n_tokens: int, d_model: int, layers: int, coefficients: Optional[FlopCoefficients] = None
) -> float:
    c = coefficients or FlopCoefficients()
    return layers * (c.vit_dense * n_tokens * d_model**2 + c.vit_attention * n_tokens**2 * d_model)


def mamba_flops(
    n_tokens: int,
    d_model: int,
    layers: int,
    expand: int = 2,
    d_state: int = 16,
    d_conv: int = 4,
    coefficients: Optional[FlopCoefficients] = None,
) -> float:
    c = coefficients or FlopCoefficients()
    per_channel = (
        c.mamba_proj * expand * d_model + c.mamba_scan * expand * d_state + c.mamba_conv * expand * d_conv
    )
    return layers * n_tokens * d_model * per_channel


def flops(arch: str, n_tokens: int, d_model: int, layers: int, **kwargs) -> float:
    if min(n_tokens, d_model, layers) < 1:
        raise ValueError("sequence length, width and depth must be positive")
    if arch == "vit":
        return vit_flops(n_tokens, d_model, layers, kwargs.get("coefficients"))
    if arch == "mamba":
        return mamba_flops(n_tokens, d_model, layers, **kwargs)
    raise ValueError(f"unknown architecture '{arch}'")


def crossover(request: BenchRequest) -> float:
    """Sequence length above which the Mamba stack is cheaper than the ViT stack."""
    c, d = request.coefficients, request.d_model
    mamba_per_token = mamba_flops(
        1, d, request.mamba_layers, request.expand, request.d_state, request.d_conv, c
    )
    vit_linear = request.vit_layers * c.vit_dense * d * d
    vit_quadratic = request.vit_layers * c.vit_attention * d
    return max(0.0, (mamba_per_token - vit_linear) / vit_quadratic)


def bench_lengths(request: BenchRequest) -> list[int]:
    """Geometric grid of sequence lengths spanning [lo, hi] with both endpoints."""
    points = np.geomspace(request.lo, request.hi, request.points)
    lengths = sorted({int(round(p)) for p in points} | {request.lo, request.hi})
    return lengths


def bench_curve(request: BenchRequest) -> list[dict]:
    rows = []
    for n in bench_lengths(request):
        row: dict = {"tokens": n}
        if "vit" in request.archs:
            row["vit"] = vit_flops(n, request.d_model, request.vit_layers, request.coefficients)
        if "mamba" in request.archs:
            row["mamba"] = mamba_flops(
                n,
                request.d_model,
                request.mamba_layers,
                request.expand,
                request.d_state,
                request.d_conv,
                request.coefficients,
            )
        rows.append(row)
    return rows


def write_curve_csv(rows: list[dict], path: Union[str, Path]) -> None:
    fields = list(rows[0].keys()) if rows else ["tokens"]
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(float(v)) if k != "tokens" else v) for k, v in row.items()})


def token_count(extents: Sequence[int], patch: Sequence[int]) -> int:
    """Tokens produced by patching `extents` (e.g. 224 x 224 at patch 16 -> 196)."""
    return int(np.prod([e // p for e, p in zip(extents, patch)]))
