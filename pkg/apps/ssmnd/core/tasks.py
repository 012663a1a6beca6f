"""
Synthetic directional tasks.

causal-trap-2d       binary grid; the label is the bottom-right cell. A model that reads
                     out at token 0 after only L+ scans can never see it.
cross-parity-2d      channels (bits, marker); one marker cell; the label is the parity of
                     the bits in the marker's row and column together. Any single row
                     carries no information about the label.
temporal-pointer-3d  channels (content, marker); one lit cell per frame and one marked
                     frame; the label is the position of the lit cell in the marked frame.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from core.errors import TaskError

logger = logging.getLogger("ssmnd.core.tasks")

TASKS = ("causal-trap-2d", "cross-parity-2d", "temporal-pointer-3d")


@dataclass
class Dataset:
    name: str
    x: np.ndarray  # (n, *grid, channels)
    y: np.ndarray  # (n,) int64
    n_classes: int
    readout: str = "mean"
    readout_index: int = 0

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def grid(self) -> tuple[int, ...]:
        return self.x.shape[1:-1]

    @property
    def channels(self) -> int:
        return self.x.shape[-1]

    def subset(self, index: np.ndarray) -> "Dataset":
        return Dataset(self.name, self.x[index], self.y[index], self.n_classes, self.readout, self.readout_index)

    def split(self, val_fraction: float) -> tuple["Dataset", "Dataset"]:
        """Leading samples train, trailing samples validate; generation order is already random."""
        n_val = max(1, int(round(len(self) * val_fraction)))
        if n_val >= len(self):
            raise TaskError(f"{len(self)} samples cannot hold a validation split of {n_val}")
        cut = len(self) - n_val
        return self.subset(np.arange(cut)), self.subset(np.arange(cut, len(self)))

    def model_fields(self) -> dict:
        """ModelConfig fields this dataset pins down."""
        return {
            "input_shape": list(self.grid),
            "in_channels": self.channels,
            "n_classes": self.n_classes,
            "readout": self.readout,
            "readout_index": self.readout_index,
        }


def balanced_labels(rng: np.random.Generator, n: int, n_classes: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % n_classes).astype(np.int64)


def _causal_trap(rng: np.random.Generator, n: int, grid: tuple[int, ...]) -> Dataset:
    if len(grid) != 2:
        raise TaskError(f"causal-trap-2d needs a 2-D grid, got {grid}", field="grid")
    y = balanced_labels(rng, n, 2)
    x = rng.integers(0, 2, size=(n,) + grid + (1,)).astype(np.float64)
    x[:, -1, -1, 0] = y
    return Dataset("causal-trap-2d", x, y, 2, readout="position", readout_index=0)


def _cross_parity(rng: np.random.Generator, n: int, grid: tuple[int, ...]) -> Dataset:
    if len(grid) != 2:
        raise TaskError(f"cross-parity-2d needs a 2-D grid, got {grid}", field="grid")
    h, w = grid
    y = balanced_labels(rng, n, 2)
    bits = rng.integers(0, 2, size=(n, h, w))
    rows = rng.integers(0, h, size=n)
    cols = rng.integers(0, w, size=n)
    x = np.zeros((n, h, w, 2))
    for i in range(n):
        r, c = rows[i], cols[i]
        cross = [(r, j) for j in range(w)] + [(k, c) for k in range(h) if k != r]
        parity = sum(bits[i, a, b] for a, b in cross) % 2
        if parity != y[i]:
            # flipping one uniformly chosen cross bit keeps the bits uniform given the parity
            a, b = cross[rng.integers(0, len(cross))]
            bits[i, a, b] ^= 1
        x[i, :, :, 0] = bits[i]
        x[i, r, c, 1] = 1.0
    return Dataset("cross-parity-2d", x, y, 2)


def _temporal_pointer(rng: np.random.Generator, n: int, grid: tuple[int, ...]) -> Dataset:
    if len(grid) != 3:
        raise TaskError(f"temporal-pointer-3d needs a 3-D grid, got {grid}", field="grid")
    t, h, w = grid
    n_classes = h * w
    y = balanced_labels(rng, n, n_classes)
    lit = rng.integers(0, n_classes, size=(n, t))
    marked = rng.integers(0, t, size=n)
    lit[np.arange(n), marked] = y
    x = np.zeros((n, t, h, w, 2))
    frame = np.arange(t)
    for i in range(n):
        x[i, frame, lit[i] // w, lit[i] % w, 0] = 1.0
        x[i, marked[i], :, :, 1] = 1.0
    return Dataset("temporal-pointer-3d", x, y, n_classes)


_GENERATORS = {
    "causal-trap-2d": _causal_trap,
    "cross-parity-2d": _cross_parity,
    "temporal-pointer-3d": _temporal_pointer,
}

_DEFAULT_GRID = {"causal-trap-2d": (8, 8), "cross-parity-2d": (8, 8), "temporal-pointer-3d": (4, 4, 4)}


def generate(name: str, n: int, seed: int, grid: Optional[Sequence[int]] = None) -> Dataset:
    """Deterministic dataset of n samples for a named task."""
    if name not in _GENERATORS:
        raise TaskError(f"unknown task '{name}' (choose from {', '.join(TASKS)})", field="name")
    if n < 1:
        raise TaskError(f"n must be >= 1, got {n}", field="n_samples")
    grid = tuple(int(g) for g in (grid or _DEFAULT_GRID[name]))
    if any(g < 1 for g in grid):
        raise TaskError(f"grid extents must be >= 1, got {grid}", field="grid")
    rng = np.random.default_rng(seed)
    data = _GENERATORS[name](rng, n, grid)
    logger.debug(f"generated {name}: {n} samples on grid {grid}")
    return data
