"""
Block-level wiring of Mamba layers.

An arrangement is an ordered list of groups. A chain group holds one layer; a parallel
group holds several layers that read the same input and whose residual deltas are
summed before a single residual add. Presets are cycles of groups repeated until the
requested layer count, the final cycle truncated.

Arrangement grammar (whitespace separated, brackets mark parallel groups):

    H+ H- W+ W- T+ T-            alternating chain
    [H+ H-][W+ W-][T+ T-]        bi-directional pairs
    bi:H+ bi:W+                  Bi-SSM layers
    nd:H+,H-,W+,W-               one ND-SSM layer scanning four orderings
    mh:H+,H-,W+,W-               one multi-head layer
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional, Sequence

import numpy as np

from core.errors import ArrangementError, FactorizationError, InvalidOrdering, ShapeError
from core.layers import LayerKind, LayerVariant, MambaLayer
from core.orderings import (
    ScanOrdering,
    alternating_axes,
    alternating_cycle,
    axis_last,
    parse_ordering,
)
from core.tensor import Var

logger = logging.getLogger("ssmnd.core.blocks")

DEFAULT_T_PERIOD = 4

_KIND_PREFIX = {"bi": LayerKind.BI, "nd": LayerKind.ND, "mh": LayerKind.MULTIHEAD}
_PREFIX_OF = {v: k for k, v in _KIND_PREFIX.items()}


class Factorization(str, Enum):
    MONO = "mono"
    TWO_PLUS_ONE = "2d+1d"
    TWO_PLUS_THREE = "2d+3d"
    ONE_PLUS_ONE_PLUS_ONE = "1d+1d+1d"


@dataclass(frozen=True)
class LayerGroup:
    members: tuple[LayerVariant, ...]

    @property
    def parallel(self) -> bool:
        return len(self.members) > 1


@dataclass(frozen=True)
class ArrangementSpec:
    rank: int
    groups: tuple[LayerGroup, ...]
    factorization: Factorization = Factorization.MONO

    @property
    def n_layers(self) -> int:
        return sum(len(g.members) for g in self.groups)

    def layer_variants(self) -> list[LayerVariant]:
        return [m for g in self.groups for m in g.members]

    def describe(self) -> str:
        """Grammar string that parses back to exactly these groups."""
        parts = []
        for group in self.groups:
            tokens = " ".join(_format_member(m) for m in group.members)
            parts.append(f"[{tokens}]" if group.parallel else tokens)
        return " ".join(parts)


def _format_member(variant: LayerVariant) -> str:
    names = ",".join(o.name() for o in variant.orderings)
    if variant.kind == LayerKind.ONE_D:
        return names
    return f"{_PREFIX_OF[variant.kind]}:{names}"


# ---------- Grammar ----------


def _parse_member(token: str, rank: int) -> LayerVariant:
    kind = LayerKind.ONE_D
    body = token
    if ":" in token:
        prefix, body = token.split(":", 1)
        if prefix not in _KIND_PREFIX:
            raise ArrangementError(f"unknown layer kind '{prefix}' in '{token}'", field="arrangement")
        kind = _KIND_PREFIX[prefix]
    try:
        orderings = tuple(parse_ordering(t, rank) for t in body.split(",") if t)
        return LayerVariant(kind, orderings)
    except InvalidOrdering as exc:
        raise ArrangementError(str(exc), field="arrangement") from exc


def parse_arrangement(text: str, rank: int) -> list[LayerGroup]:
    """Parse the grammar into one cycle of groups."""
    spaced = text.replace("[", " [ ").replace("]", " ] ")
    groups: list[LayerGroup] = []
    pending: Optional[list[LayerVariant]] = None
    for token in spaced.split():
        if token == "[":
            if pending is not None:
                raise ArrangementError(f"nested '[' in '{text}'", field="arrangement")
            pending = []
        elif token == "]":
            if not pending:
                raise ArrangementError(f"empty or unopened group in '{text}'", field="arrangement")
            groups.append(LayerGroup(tuple(pending)))
            pending = None
        else:
            member = _parse_member(token, rank)
            if pending is None:
                groups.append(LayerGroup((member,)))
            else:
                pending.append(member)
    if pending is not None:
        raise ArrangementError(f"unclosed '[' in '{text}'", field="arrangement")
    if not groups:
        raise ArrangementError("arrangement is empty", field="arrangement")
    return groups


# ---------- Presets ----------


def _one(ordering: ScanOrdering, kind: LayerKind = LayerKind.ONE_D) -> LayerGroup:
    return LayerGroup((LayerVariant(kind, (ordering,)),))


def _pair(ordering: ScanOrdering) -> list[LayerVariant]:
    return [
        LayerVariant(LayerKind.ONE_D, (ordering,)),
        LayerVariant(LayerKind.ONE_D, (ordering.flipped(),)),
    ]


def _forward_axes(rank: int) -> list[ScanOrdering]:
    return [ScanOrdering(axis_last(rank, a), 1) for a in alternating_axes(rank)]


def preset_cycle(name: str, rank: int, t_period: int = DEFAULT_T_PERIOD) -> list[LayerGroup]:
    identity = ScanOrdering(tuple(range(rank)), 1)
    axes = _forward_axes(rank)
    cycle = tuple(alternating_cycle(rank))
    if name == "alternating":
        return [_one(o) for o in cycle]
    if name == "bi":
        return [LayerGroup(tuple(_pair(o))) for o in axes]
    if name == "quad":
        if rank == 2:
            return [LayerGroup(tuple(_pair(axes[0]) + _pair(axes[1])))]
        if rank == 3:
            return [
                LayerGroup(tuple(_pair(axes[0]) + _pair(axes[1]))),
                LayerGroup(tuple(_pair(axes[2]))),
            ]
        raise ArrangementError("quad needs 2-D or 3-D data", field="arrangement")
    if name == "hex":
        if rank != 3:
            raise ArrangementError("hex needs 3-D data (six orderings)", field="arrangement")
        return [LayerGroup(tuple(m for o in axes for m in _pair(o)))]
    if name == "uni":
        return [_one(identity)]
    if name == "uni-bi":
        return [_one(identity), _one(identity.flipped())]
    if name == "bi-ssm":
        return [_one(identity, LayerKind.BI)]
    if name == "bi-ssm-axes":
        return [LayerGroup(tuple(LayerVariant(LayerKind.BI, (o,)) for o in axes))]
    if name == "alt-bi-ssm":
        return [_one(o, LayerKind.BI) for o in axes]
    if name == "nd-ssm":
        return [LayerGroup((LayerVariant(LayerKind.ND, cycle),))]
    if name == "multihead":
        return [LayerGroup((LayerVariant(LayerKind.MULTIHEAD, cycle),))]
    if name == "inflated":
        if rank != 3:
            raise ArrangementError("the inflated schedule needs 3-D data", field="arrangement")
        if t_period < 1:
            raise ArrangementError(f"t_period must be >= 1, got {t_period}", field="t_period")
        spatial = [_one(o) for o in cycle[:4]]
        temporal = [_one(axes[2]), _one(axes[2].flipped())]
        groups: list[LayerGroup] = []
        # one temporal pair after every t_period spatial layers; the cycle closes when both line up
        span = math.lcm(t_period, len(spatial))
        for i in range(span):
            groups.append(spatial[i % len(spatial)])
            if (i + 1) % t_period == 0:
                groups.extend(temporal)
        return groups
    raise ArrangementError(f"unknown arrangement preset '{name}'", field="arrangement")


PRESETS = (
    "alternating",
    "bi",
    "quad",
    "hex",
    "uni",
    "uni-bi",
    "bi-ssm",
    "bi-ssm-axes",
    "alt-bi-ssm",
    "nd-ssm",
    "multihead",
    "inflated",
)


def build(
    preset: str,
    rank: int,
    n_layers: int,
    factorization: Factorization = Factorization.MONO,
    t_period: int = DEFAULT_T_PERIOD,
) -> ArrangementSpec:
    """Resolve a preset name or a grammar string into a concrete arrangement."""
    if n_layers < 1:
        raise ArrangementError(f"n_layers must be >= 1, got {n_layers}", field="n_layers")
    factorization = Factorization(factorization)
    if factorization != Factorization.MONO and rank != 3:
        raise FactorizationError(
            f"factorization '{factorization.value}' needs 3-D data, got rank {rank}",
            field="factorization",
        )
    cycle = preset_cycle(preset, rank, t_period) if preset in PRESETS else parse_arrangement(preset, rank)
    groups: list[LayerGroup] = []
    remaining = n_layers
    i = 0
    while remaining > 0:
        group = cycle[i % len(cycle)]
        if len(group.members) > remaining:
            group = LayerGroup(group.members[:remaining])
        groups.append(group)
        remaining -= len(group.members)
        i += 1
    spec = ArrangementSpec(rank, tuple(groups), factorization)
    logger.debug(f"arrangement '{preset}' rank {rank}: {spec.describe()}")
    return spec


# ---------- Depth ----------


@dataclass
class ArrangementDag:
    """Layers as nodes; an edge from every layer of a group to every layer of the next."""

    n_nodes: int
    edges: list[tuple[int, int]] = field(default_factory=list)

    @classmethod
    def from_spec(cls, spec: ArrangementSpec) -> "ArrangementDag":
        dag = cls(spec.n_layers)
        start = 0
        previous: list[int] = []
        for group in spec.groups:
            current = list(range(start, start + len(group.members)))
            dag.edges.extend((p, c) for p in previous for c in current)
            previous = current
            start += len(group.members)
        return dag

    def longest_path(self) -> int:
        depth = [1] * self.n_nodes
        # node ids are already in topological order
        for src, dst in sorted(self.edges):
            depth[dst] = max(depth[dst], depth[src] + 1)
        return max(depth, default=0)


def effective_depth(spec: ArrangementSpec) -> int:
    return ArrangementDag.from_spec(spec).longest_path()


# ---------- Factorization ----------


def _trailing_axes(policy: Factorization, ordering: ScanOrdering) -> int:
    rank = ordering.rank
    temporal = ordering.continuous_axis == 0
    if policy == Factorization.MONO:
        return rank
    if policy == Factorization.ONE_PLUS_ONE_PLUS_ONE:
        return 1
    if policy == Factorization.TWO_PLUS_ONE:
        return 1 if temporal else 2
    return 3 if temporal else 2


def segment_length(grid: Sequence[int], ordering: ScanOrdering, policy: Factorization) -> int:
    """Length of each independent sub-sequence this ordering is split into."""
    policy = Factorization(policy)
    grid = tuple(grid)
    if policy != Factorization.MONO and len(grid) != 3:
        raise FactorizationError(
            f"factorization '{policy.value}' needs a 3-D grid, got {grid}", field="factorization"
        )
    if len(grid) != ordering.rank:
        raise FactorizationError(f"ordering {ordering} does not fit grid {grid}")
    permuted = [grid[p] for p in ordering.perm]
    k = _trailing_axes(policy, ordering)
    return int(np.prod(permuted[len(permuted) - k :]))


@dataclass(frozen=True)
class SubSequences:
    ordering: ScanOrdering
    count: int
    length: int
    boundaries: tuple[int, ...]


def factorize_grid(
    grid: Sequence[int],
    policy: Factorization,
    orderings: Optional[Sequence[ScanOrdering]] = None,
) -> list[SubSequences]:
    """How each ordering's scan splits under `policy`; defaults to the forward axis scans."""
    grid = tuple(grid)
    total = int(np.prod(grid))
    if orderings is None:
        orderings = _forward_axes(len(grid))
    plans = []
    for ordering in orderings:
        seg = segment_length(grid, ordering, policy)
        plans.append(
            SubSequences(ordering, total // seg, seg, tuple(range(seg, total, seg)))
        )
    return plans


def sequence_count(grid: Sequence[int], policy: Factorization, batch: int = 1) -> int:
    """Largest number of independent sequences any layer of the policy scans."""
    return batch * max(p.count for p in factorize_grid(grid, policy))


# ---------- Execution ----------


@dataclass
class Backbone:
    """The arrangement instantiated as MambaLayer objects over a fixed token grid."""

    spec: ArrangementSpec
    groups: list[list[MambaLayer]]
    grid: tuple[int, ...]

    @classmethod
    def build(
        cls,
        spec: ArrangementSpec,
        d_model: int,
        grid: Sequence[int],
        prefix: str = "layers",
        layer_options: Optional[dict] = None,
        option_overrides: Optional[Mapping[int, dict]] = None,
    ) -> "Backbone":
        grid = tuple(grid)
        if len(grid) != spec.rank:
            raise ShapeError(f"arrangement rank {spec.rank} does not match grid {grid}")
        options = dict(layer_options or {})
        overrides = option_overrides or {}
        identity = ScanOrdering(tuple(range(spec.rank)), 1)
        groups: list[list[MambaLayer]] = []
        index = 0
        for group in spec.groups:
            layers = []
            for variant in group.members:
                segments = {}
                if spec.factorization != Factorization.MONO:
                    for o in variant.orderings + (identity,):
                        segments[o] = segment_length(grid, o, spec.factorization)
                kwargs = {**options, **overrides.get(index, {})}
                layers.append(
                    MambaLayer(
                        d_model=d_model,
                        variant=variant,
                        prefix=f"{prefix}.{index}.",
                        segments=segments,
                        **kwargs,
                    )
                )
                index += 1
            groups.append(layers)
        return cls(spec, groups, grid)

    @property
    def layers(self) -> list[MambaLayer]:
        return [layer for group in self.groups for layer in group]

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        for layer in self.layers:
            params.update(layer.init_params(rng))
        return params

    def param_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers)

    def forward(
        self,
        params: Mapping[str, Var],
        x: Var,
        depth: Optional[int] = None,
        drop_path: float = 0.0,
        rng: Optional[np.random.Generator] = None,
    ) -> Var:
        """Run all groups (or the first `depth` groups) over canonical tokens (B, L, D)."""
        for group in self.groups[:depth]:
            total = None
            for layer in group:
                delta = layer.branch(params, x, self.grid)
                total = delta if total is None else total + delta
            if drop_path > 0:
                if rng is None:
                    raise ValueError("drop-path in training mode needs an rng")
                keep = rng.random((x.shape[0], 1, 1)) >= drop_path
                total = total * (keep.astype(np.float64) / (1.0 - drop_path))
            x = x + total
        return x
