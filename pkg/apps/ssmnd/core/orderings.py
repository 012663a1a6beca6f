"""
Scan orderings: the bijections between an N-d index grid and a 1-D sequence.

An ordering is an axis permutation plus a direction. Applying it permutes the axes,
flattens row-major (so the last permuted axis is traversed with stride 1) and, for
the minus direction, reverses the flattened sequence.

Shorthand tokens name the axis that is traversed continuously: for T x H x W data
H == (TWH), W == (THW), T == (HWT); for H x W data H == (WH), W == (HW). L is the
identity permutation. Explicit forms such as `(TWH)+` are accepted everywhere.
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from core.errors import InvalidOrdering, ShapeError
from core.tensor import NdArray, Var, check_permutation, flip, inverse_permutation, permute, reshape

CANONICAL_AXES = {1: "W", 2: "HW", 3: "THW"}

_SHORT_RE = re.compile(r"^([A-Z])([+-])$")
_EXPLICIT_RE = re.compile(r"^\(([A-Z0-9 ]+)\)([+-])$")


def axis_letters(rank: int) -> str:
    if rank < 1:
        raise InvalidOrdering(f"rank must be >= 1, got {rank}")
    if rank in CANONICAL_AXES:
        return CANONICAL_AXES[rank]
    if rank > 10:
        raise InvalidOrdering(f"rank {rank} is not supported")
    return "".join(str(i) for i in range(rank))


def axis_last(rank: int, axis: int) -> tuple[int, ...]:
    """Permutation keeping canonical order except that `axis` moves to the end."""
    return tuple(a for a in range(rank) if a != axis) + (axis,)


@dataclass(frozen=True)
class ScanOrdering:
    """Axis permutation (k1..kN) plus a traversal direction (+1 or -1)."""

    perm: tuple[int, ...]
    direction: int = 1

    def __post_init__(self):
        if self.direction not in (1, -1):
            raise InvalidOrdering(f"direction must be +1 or -1, got {self.direction}")
        check_permutation(self.perm, len(self.perm))

    @property
    def rank(self) -> int:
        return len(self.perm)

    @property
    def reversed(self) -> bool:
        return self.direction < 0

    @property
    def continuous_axis(self) -> int:
        return self.perm[-1]

    def flipped(self) -> "ScanOrdering":
        return ScanOrdering(self.perm, -self.direction)

    def explicit(self) -> str:
        letters = axis_letters(self.rank)
        sign = "+" if self.direction > 0 else "-"
        return "(" + "".join(letters[p] for p in self.perm) + ")" + sign

    def name(self) -> str:
        """Shorthand token when one exists, explicit form otherwise."""
        if self.perm == axis_last(self.rank, self.continuous_axis):
            sign = "+" if self.direction > 0 else "-"
            return axis_letters(self.rank)[self.continuous_axis] + sign
        return self.explicit()

    def __str__(self) -> str:
        return self.name()


def parse_ordering(token: str, rank: int) -> ScanOrdering:
    """Parse `H+`, `L-`, `(TWH)+` ... for data of the given rank."""
    text = token.strip().replace("−", "-")
    letters = axis_letters(rank)
    match = _SHORT_RE.match(text)
    if match:
        letter, sign = match.groups()
        direction = 1 if sign == "+" else -1
        if letter == "L":
            return ScanOrdering(tuple(range(rank)), direction)
        if letter not in letters:
            raise InvalidOrdering(f"axis '{letter}' does not exist for rank {rank} ({letters})")
        return ScanOrdering(axis_last(rank, letters.index(letter)), direction)
    match = _EXPLICIT_RE.match(text)
    if match:
        body, sign = match.groups()
        body = body.replace(" ", "")
        if sorted(body) != sorted(letters):
            raise InvalidOrdering(f"'{token}' is not a permutation of axes {letters}")
        return ScanOrdering(tuple(letters.index(c) for c in body), 1 if sign == "+" else -1)
    raise InvalidOrdering(f"cannot parse scan ordering '{token}'")


def enumerate_orderings(rank: int) -> list[ScanOrdering]:
    """All 2 * rank! orderings, each permutation forward then reversed."""
    axis_letters(rank)
    return [
        ScanOrdering(perm, direction)
        for perm in itertools.permutations(range(rank))
        for direction in (1, -1)
    ]


def ordering_count(rank: int) -> int:
    return 2 * math.factorial(rank)


def alternating_axes(rank: int) -> tuple[int, ...]:
    """Axis visiting order of the alternating cycle: H, W for 2-D and H, W, T for 3-D."""
    if rank == 3:
        return (1, 2, 0)
    return tuple(range(rank))


def alternating_cycle(rank: int) -> list[ScanOrdering]:
    """H+ H- W+ W- (T+ T-)."""
    cycle = []
    for axis in alternating_axes(rank):
        forward = ScanOrdering(axis_last(rank, axis), 1)
        cycle.extend([forward, forward.flipped()])
    return cycle


def alternating_design_space(rank: int = 3) -> list[tuple[ScanOrdering, ...]]:
    """
    Every alternating cycle obtainable by choosing, per axis, which permutation ends
    in that axis (TWH+ vs WTH+ for H+), and the visiting order of the axes.
    For rank 3 that is 2^3 * 3! = 48 cycles of length 6.
    """
    if rank < 1:
        raise InvalidOrdering(f"rank must be >= 1, got {rank}")
    ending_in = [
        [perm for perm in itertools.permutations(range(rank)) if perm[-1] == axis]
        for axis in range(rank)
    ]
    space = []
    for choice in itertools.product(*ending_in):
        for axis_order in itertools.permutations(range(rank)):
            cycle: list[ScanOrdering] = []
            for axis in axis_order:
                cycle.append(ScanOrdering(choice[axis], 1))
                cycle.append(ScanOrdering(choice[axis], -1))
            space.append(tuple(cycle))
    return space


# ---------- Applying orderings to bare arrays ----------


def apply(a: NdArray, ordering: ScanOrdering) -> NdArray:
    """Flatten `a` into the 1-D sequence visited by `ordering`."""
    if a.ndim != ordering.rank:
        raise InvalidOrdering(f"ordering {ordering} has rank {ordering.rank}, array has rank {a.ndim}")
    seq = a.permute(ordering.perm).reshape((a.size,))
    return seq.reverse_flat() if ordering.reversed else seq


def invert(seq: NdArray, ordering: ScanOrdering, shape: Sequence[int]) -> NdArray:
    """Inverse of apply(): scatter a 1-D sequence back onto the grid of `shape`."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != ordering.rank:
        raise InvalidOrdering(f"ordering {ordering} has rank {ordering.rank}, shape is {shape}")
    if seq.size != int(np.prod(shape, dtype=np.int64)):
        raise ShapeError(f"sequence of length {seq.size} cannot fill shape {shape}")
    flat = seq.reshape((seq.size,))
    if ordering.reversed:
        flat = flat.reverse_flat()
    permuted_shape = tuple(shape[p] for p in ordering.perm)
    return flat.reshape(permuted_shape).permute(inverse_permutation(ordering.perm))


def sequence_index(grid: Sequence[int], ordering: ScanOrdering) -> np.ndarray:
    """position -> canonical (L+) flat index of the token visited at that position."""
    size = int(np.prod(grid, dtype=np.int64))
    ids = NdArray(np.arange(size, dtype=np.float64).reshape(tuple(grid)))
    return apply(ids, ordering).numpy().astype(np.int64)


def sequence_position(grid: Sequence[int], ordering: ScanOrdering) -> np.ndarray:
    """canonical flat index -> position in the ordering's sequence."""
    index = sequence_index(grid, ordering)
    position = np.empty_like(index)
    position[index] = np.arange(index.size)
    return position


# ---------- Applying orderings to token tensors on the tape ----------


def flatten_tokens(x: Var, grid: Sequence[int], ordering: ScanOrdering) -> Var:
    """(B, L, C) tokens in canonical order -> (B, L, C) in the ordering's sequence order."""
    grid = tuple(grid)
    if len(grid) != ordering.rank:
        raise InvalidOrdering(f"ordering {ordering} has rank {ordering.rank}, grid is {grid}")
    batch, length, channels = x.shape
    out = x
    if ordering.perm != tuple(range(ordering.rank)):
        out = reshape(out, (batch,) + grid + (channels,))
        axes = (0,) + tuple(p + 1 for p in ordering.perm) + (ordering.rank + 1,)
        out = reshape(permute(out, axes), (batch, length, channels))
    if ordering.reversed:
        out = flip(out, 1)
    return out


def unflatten_tokens(seq: Var, grid: Sequence[int], ordering: ScanOrdering) -> Var:
    """Inverse of flatten_tokens."""
    grid = tuple(grid)
    batch, length, channels = seq.shape
    out = flip(seq, 1) if ordering.reversed else seq
    if ordering.perm != tuple(range(ordering.rank)):
        permuted = tuple(grid[p] for p in ordering.perm)
        out = reshape(out, (batch,) + permuted + (channels,))
        inv = inverse_permutation(ordering.perm)
        axes = (0,) + tuple(p + 1 for p in inv) + (ordering.rank + 1,)
        out = reshape(permute(out, axes), (batch, length, channels))
    return out


def parse_orderings(tokens: Optional[Sequence[str]], rank: int) -> list[ScanOrdering]:
    return [parse_ordering(t, rank) for t in (tokens or [])]
