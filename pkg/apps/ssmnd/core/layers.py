"""
The Mamba layer and its directional variants.

Every variant is pre-norm -> in-projection (signal | gate) -> causal depthwise conv +
SiLU -> one or more selective scans -> gate with SiLU(gate) -> out-projection, and the
layer output is the residual input plus that branch.

    one_d      one scan in the layer's ordering
    bi         forward scan plus a scan over the reversed sequence, summed
    nd         conv once in L+ order, one scan per ordering, summed on the grid
    multihead  conv once in L+ order, channels split into one head per ordering
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional

import numpy as np

from core.errors import HeadSplitError, InvalidOrdering, ShapeError
from core.orderings import ScanOrdering, flatten_tokens, unflatten_tokens
from core.ssm import DEFAULT_STATE, SsmParams, selective_scan
from core.tensor import (
    DEFAULT_DTYPE,
    Var,
    concat,
    conv1d_causal,
    exp,
    flip,
    neg,
    rms_norm,
    silu,
    slice_axis,
    softplus,
)

logger = logging.getLogger("ssmnd.core.layers")

CONV_WIDTH = 4
EXPAND = 2


class LayerKind(str, Enum):
    ONE_D = "one_d"
    BI = "bi"
    ND = "nd"
    MULTIHEAD = "multihead"


@dataclass(frozen=True)
class LayerVariant:
    kind: LayerKind
    orderings: tuple[ScanOrdering, ...]

    def __post_init__(self):
        if not self.orderings:
            raise InvalidOrdering("a layer needs at least one ordering")
        if self.kind in (LayerKind.ONE_D, LayerKind.BI) and len(self.orderings) != 1:
            raise InvalidOrdering(f"{self.kind.value} layers take exactly one ordering")
        ranks = {o.rank for o in self.orderings}
        if len(ranks) != 1:
            raise InvalidOrdering(f"orderings of mixed rank {sorted(ranks)}")

    @property
    def rank(self) -> int:
        return self.orderings[0].rank

    @property
    def n_scans(self) -> int:
        if self.kind == LayerKind.BI:
            return 2
        if self.kind in (LayerKind.ND, LayerKind.MULTIHEAD):
            return len(self.orderings)
        return 1

    def label(self) -> str:
        names = "".join(o.name() for o in self.orderings)
        return names if self.kind == LayerKind.ONE_D else f"{self.kind.value}({names})"


def segment_ids(length: int, segment: Optional[int]) -> Optional[np.ndarray]:
    if segment is None or segment >= length:
        return None
    return np.arange(length) // segment


def keep_from_segments(segments: Optional[np.ndarray]) -> Optional[np.ndarray]:
    """Zero where a position starts a new segment, so the scan state is reset there."""
    if segments is None:
        return None
    keep = np.ones(segments.shape[0], dtype=DEFAULT_DTYPE)
    keep[1:][segments[1:] != segments[:-1]] = 0.0
    return keep


@dataclass
class MambaLayer:
    """One residual Mamba layer; parameters live in a flat dict under `prefix`."""

    d_model: int
    variant: LayerVariant
    prefix: str = ""
    d_state: int = DEFAULT_STATE
    expand: int = EXPAND
    d_conv: int = CONV_WIDTH
    euler_b: bool = False
    d_skip: bool = True
    scan_mode: str = "sequential"
    zero_out_proj: bool = False
    delta_scale: float = 1.0
    segments: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant.kind == LayerKind.MULTIHEAD and self.d_inner % len(self.variant.orderings):
            raise HeadSplitError(
                f"inner width {self.d_inner} is not divisible by {len(self.variant.orderings)} heads",
                field="orderings",
            )

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def ssm_width(self) -> int:
        if self.variant.kind == LayerKind.MULTIHEAD:
            return self.d_inner // len(self.variant.orderings)
        return self.d_inner

    def key(self, name: str) -> str:
        return f"{self.prefix}{name}"

    # ---------- parameters ----------

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        d, di = self.d_model, self.d_inner
        params = {
            self.key("norm_w"): np.ones(d, dtype=DEFAULT_DTYPE),
            self.key("in_proj"): rng.normal(0.0, d**-0.5, size=(d, 2 * di)),
            self.key("conv_w"): rng.normal(0.0, self.d_conv**-0.5, size=(di, self.d_conv)),
            self.key("conv_b"): np.zeros(di, dtype=DEFAULT_DTYPE),
        }
        if self.zero_out_proj:
            params[self.key("out_proj")] = np.zeros((di, d), dtype=DEFAULT_DTYPE)
        else:
            params[self.key("out_proj")] = rng.normal(0.0, di**-0.5, size=(di, d))
        for i in range(self.variant.n_scans):
            ssm = SsmParams.init(rng, self.ssm_width, self.d_state, delta_scale=self.delta_scale)
            ssm_params = ssm.to_dict(self.key(f"ssm{i}"))
            if not self.d_skip:
                ssm_params.pop(self.key(f"ssm{i}.D"))
            params.update(ssm_params)
        return params

    def param_count(self) -> int:
        d, di, n, w = self.d_model, self.d_inner, self.d_state, self.ssm_width
        per_ssm = 2 * w * n + w * n + 2 * w + (w if self.d_skip else 0)
        return d + 2 * d * di + di * self.d_conv + di + di * d + self.variant.n_scans * per_ssm

    # ---------- forward ----------

    def _ssm(self, params: Mapping[str, Var], index: int, c: Var, keep: Optional[np.ndarray]) -> Var:
        q = self.key(f"ssm{index}.")
        delta = softplus(c * params[q + "dt_w"] + params[q + "dt_b"])
        b_t = c @ params[q + "x_proj_B"]
        c_t = c @ params[q + "x_proj_C"]
        a = neg(exp(params[q + "A_log"]))
        d_skip = params[q + "D"] if self.d_skip else None
        return selective_scan(
            c, delta, a, b_t, c_t, d_skip, keep=keep, mode=self.scan_mode, euler_b=self.euler_b
        )

    def _conv(self, params: Mapping[str, Var], u: Var, segments: Optional[np.ndarray]) -> Var:
        return silu(conv1d_causal(u, params[self.key("conv_w")], params[self.key("conv_b")], segments))

    def _segments_for(self, ordering: ScanOrdering, length: int) -> Optional[np.ndarray]:
        return segment_ids(length, self.segments.get(ordering))

    def _scan_in_order(
        self, params: Mapping[str, Var], index: int, c: Var, grid: tuple, ordering: ScanOrdering
    ) -> Var:
        length = c.shape[1]
        seq = flatten_tokens(c, grid, ordering)
        keep = keep_from_segments(self._segments_for(ordering, length))
        return unflatten_tokens(self._ssm(params, index, seq, keep), grid, ordering)

    def branch(self, params: Mapping[str, Var], x: Var, grid: tuple) -> Var:
        """The residual delta for tokens x of shape (B, L, D) laid out canonically on `grid`."""
        grid = tuple(grid)
        if x.ndim != 3 or x.shape[-1] != self.d_model:
            raise ShapeError(f"layer expects (B, L, {self.d_model}) tokens, got {x.shape}")
        if int(np.prod(grid)) != x.shape[1]:
            raise ShapeError(f"grid {grid} does not hold {x.shape[1]} tokens")
        if len(grid) != self.variant.rank:
            raise InvalidOrdering(
                f"layer orderings have rank {self.variant.rank}, grid {grid} has rank {len(grid)}"
            )
        length, di = x.shape[1], self.d_inner
        h = rms_norm(x, params[self.key("norm_w")])
        xz = h @ params[self.key("in_proj")]
        u = slice_axis(xz, -1, 0, di)
        gate = slice_axis(xz, -1, di, 2 * di)

        kind = self.variant.kind
        if kind in (LayerKind.ONE_D, LayerKind.BI):
            ordering = self.variant.orderings[0]
            segments = self._segments_for(ordering, length)
            keep = keep_from_segments(segments)
            c = self._conv(params, flatten_tokens(u, grid, ordering), segments)
            y = self._ssm(params, 0, c, keep)
            if kind == LayerKind.BI:
                keep_rev = None if keep is None else keep_from_segments(segments[::-1])
                y = y + flip(self._ssm(params, 1, flip(c, 1), keep_rev), 1)
            y = unflatten_tokens(y, grid, ordering)
        else:
            identity = ScanOrdering(tuple(range(len(grid))), 1)
            c = self._conv(params, u, self._segments_for(identity, length))
            if kind == LayerKind.ND:
                y = None
                for i, ordering in enumerate(self.variant.orderings):
                    part = self._scan_in_order(params, i, c, grid, ordering)
                    y = part if y is None else y + part
            else:
                width = self.ssm_width
                heads = [
                    self._scan_in_order(
                        params, i, slice_axis(c, -1, i * width, (i + 1) * width), grid, ordering
                    )
                    for i, ordering in enumerate(self.variant.orderings)
                ]
                y = heads[0] if len(heads) == 1 else concat(heads, -1)
        y = y * silu(gate)
        return y @ params[self.key("out_proj")]

    def forward(self, params: Mapping[str, Var], x: Var, grid: tuple) -> Var:
        return x + self.branch(params, x, grid)
