"""
Selective state-space kernel.

    z_t   = delta_t * A                      (per channel d, state n)
    Abar  = exp(z_t)
    Bbar  = phi(z_t) * delta_t * B_t,        phi(z) = (exp(z) - 1) / z
    h_t   = Abar_t * h_{t-1} + Bbar_t * x_t, h_0 = 0
    y_t   = <C_t, h_t> + D_skip * x_t

Shapes: x, delta are (..., L, D); B_t, C_t are (..., L, N); A is (D, N); D_skip is (D,).
Leading axes are batch axes and are processed in one vectorised pass.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from core.errors import InvalidBoundary, InvalidDelta, ShapeError
from core.tensor import DEFAULT_DTYPE, Node, Operand, Var, _emit, _value, register_vjp

logger = logging.getLogger("ssmnd.core.ssm")

SERIES_THRESHOLD = 1e-4
DEFAULT_STATE = 16
DT_MIN = 1e-3
DT_MAX = 1e-1


# ---------- Parameters ----------


def init_a_log(d_inner: int, d_state: int) -> np.ndarray:
    """log|A| so that A[:, n] = -(n + 1)."""
    row = np.log(np.arange(1, d_state + 1, dtype=DEFAULT_DTYPE))
    return np.tile(row, (d_inner, 1))


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=DEFAULT_DTYPE)
    return y + np.log(-np.expm1(-y))


def init_dt_bias(
    rng: np.random.Generator,
    d_inner: int,
    dt_min: float = DT_MIN,
    dt_max: float = DT_MAX,
    delta_scale: float = 1.0,
) -> np.ndarray:
    """Bias whose softplus is a log-uniform step in [dt_min, dt_max], times delta_scale."""
    if delta_scale <= 0:
        raise InvalidDelta(f"delta_scale must be positive, got {delta_scale}", field="delta_scale")
    u = rng.random(d_inner)
    dt = np.exp(u * (np.log(dt_max) - np.log(dt_min)) + np.log(dt_min))
    return inverse_softplus(dt * delta_scale)


@dataclass
class SsmParams:
    """One selective SSM over an inner width D with state size N."""

    a_log: np.ndarray  # (D, N)
    d_skip: np.ndarray  # (D,)
    w_b: np.ndarray  # (D, N)
    w_c: np.ndarray  # (D, N)
    dt_w: np.ndarray  # (D,)
    dt_b: np.ndarray  # (D,)

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.a_log)

    @property
    def d_inner(self) -> int:
        return self.a_log.shape[0]

    @property
    def d_state(self) -> int:
        return self.a_log.shape[1]

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        d_inner: int,
        d_state: int = DEFAULT_STATE,
        delta_scale: float = 1.0,
    ) -> "SsmParams":
        std = d_inner**-0.5
        return cls(
            a_log=init_a_log(d_inner, d_state),
            d_skip=np.ones(d_inner, dtype=DEFAULT_DTYPE),
            w_b=rng.normal(0.0, std, size=(d_inner, d_state)),
            w_c=rng.normal(0.0, std, size=(d_inner, d_state)),
            dt_w=rng.normal(0.0, std, size=d_inner),
            dt_b=init_dt_bias(rng, d_inner, delta_scale=delta_scale),
        )

    def to_dict(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}.A_log": self.a_log,
            f"{prefix}.D": self.d_skip,
            f"{prefix}.x_proj_B": self.w_b,
            f"{prefix}.x_proj_C": self.w_c,
            f"{prefix}.dt_w": self.dt_w,
            f"{prefix}.dt_b": self.dt_b,
        }

    @classmethod
    def from_dict(cls, params: dict, prefix: str) -> "SsmParams":
        return cls(
            a_log=np.asarray(params[f"{prefix}.A_log"]),
            d_skip=np.asarray(params[f"{prefix}.D"]),
            w_b=np.asarray(params[f"{prefix}.x_proj_B"]),
            w_c=np.asarray(params[f"{prefix}.x_proj_C"]),
            dt_w=np.asarray(params[f"{prefix}.dt_w"]),
            dt_b=np.asarray(params[f"{prefix}.dt_b"]),
        )


# ---------- Discretization ----------


def phi(z: np.ndarray) -> np.ndarray:
    """(exp(z) - 1) / z with the three-term series near zero."""
    z = np.asarray(z, dtype=DEFAULT_DTYPE)
    small = np.abs(z) < SERIES_THRESHOLD
    safe = np.where(small, 1.0, z)
    exact = np.expm1(safe) / safe
    series = 1.0 + z / 2.0 + z * z / 6.0
    return np.where(small, series, exact)


def phi_prime(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=DEFAULT_DTYPE)
    small = np.abs(z) < SERIES_THRESHOLD
    safe = np.where(small, 1.0, z)
    exact = (safe * np.exp(safe) - np.expm1(safe)) / (safe * safe)
    series = 0.5 + z / 3.0
    return np.where(small, series, exact)


@dataclass
class DiscretizedStep:
    """Abar and Bbar, both (..., L, D, N)."""

    abar: np.ndarray
    bbar: np.ndarray
    z: np.ndarray


def _check_delta(delta: np.ndarray) -> None:
    if not np.all(delta > 0):
        raise InvalidDelta("delta must be strictly positive", field="delta")


def discretize(A, B_t, delta, euler_b: bool = False) -> DiscretizedStep:
    """Zero-order hold of (A, B_t) with step delta; euler_b uses Bbar = delta * B."""
    A = np.asarray(A, dtype=DEFAULT_DTYPE)
    B_t = np.asarray(B_t, dtype=DEFAULT_DTYPE)
    delta = np.asarray(delta, dtype=DEFAULT_DTYPE)
    _check_delta(delta)
    z = delta[..., None] * A
    scale = 1.0 if euler_b else phi(z)
    bbar = scale * delta[..., None] * B_t[..., None, :]
    return DiscretizedStep(abar=np.exp(z), bbar=bbar, z=z)


# ---------- Scans ----------


def _check_scan_shapes(abar: np.ndarray, bx: np.ndarray, C_t: np.ndarray, x: np.ndarray) -> None:
    if abar.shape != bx.shape:
        raise ShapeError(f"Abar {abar.shape} and Bbar*x {bx.shape} differ")
    length = abar.shape[-3]
    if C_t.shape[-2] != length or x.shape[-2] != length:
        raise ShapeError(
            f"sequence lengths differ: Abar {length}, C {C_t.shape[-2]}, x {x.shape[-2]}"
        )


def _apply_resets(abar: np.ndarray, keep: Optional[np.ndarray]) -> np.ndarray:
    if keep is None:
        return abar
    return abar * keep[:, None, None]


def states_sequential(abar: np.ndarray, bx: np.ndarray) -> np.ndarray:
    """All hidden states h_1..h_L, (..., L, D, N)."""
    hs = np.empty_like(bx)
    h = np.zeros_like(bx[..., 0, :, :])
    for t in range(bx.shape[-3]):
        h = abar[..., t, :, :] * h + bx[..., t, :, :]
        hs[..., t, :, :] = h
    return hs


def states_parallel(abar: np.ndarray, bx: np.ndarray) -> np.ndarray:
    """
    Work-efficient prefix scan over the affine maps h -> a*h + b.

    Elements compose as (a1, b1) then (a2, b2) == (a1*a2, a2*b1 + b2). The tree is an
    up-sweep of pairwise reductions followed by a down-sweep distributing exclusive
    prefixes; the sequence is padded to a power of two with the identity (1, 0).
    """
    length = bx.shape[-3]
    a = np.moveaxis(abar, -3, 0)
    b = np.moveaxis(bx, -3, 0)
    size = 1
    while size < length:
        size *= 2
    pa = np.ones((size,) + a.shape[1:], dtype=a.dtype)
    pb = np.zeros((size,) + b.shape[1:], dtype=b.dtype)
    pa[:length] = a
    pb[:length] = b

    step = 1
    while step < size:
        right = np.arange(2 * step - 1, size, 2 * step)
        left = right - step
        pb[right] = pa[right] * pb[left] + pb[right]
        pa[right] = pa[left] * pa[right]
        step *= 2

    pa[size - 1] = 1.0
    pb[size - 1] = 0.0
    step = size // 2
    while step >= 1:
        right = np.arange(2 * step - 1, size, 2 * step)
        left = right - step
        total_a, total_b = pa[left].copy(), pb[left].copy()
        pa[left], pb[left] = pa[right], pb[right]
        pb[right] = total_a * pb[right] + total_b
        pa[right] = pa[right] * total_a
        step //= 2

    # pb now holds h_{t-1} for every t; one more step gives the inclusive states
    hs = a * pb[:length] + b
    return np.moveaxis(hs, 0, -3)


def readout(hs: np.ndarray, C_t: np.ndarray, D_skip: Optional[np.ndarray], x: np.ndarray) -> np.ndarray:
    y = (hs * C_t[..., None, :]).sum(axis=-1)
    if D_skip is not None:
        y = y + np.asarray(D_skip) * x
    return y


def scan_sequential(abar, bx, C_t, D_skip, x, keep: Optional[np.ndarray] = None) -> np.ndarray:
    """y for h_t = Abar_t h_{t-1} + (Bbar x)_t, step by step."""
    abar, bx = np.asarray(abar, dtype=DEFAULT_DTYPE), np.asarray(bx, dtype=DEFAULT_DTYPE)
    C_t, x = np.asarray(C_t, dtype=DEFAULT_DTYPE), np.asarray(x, dtype=DEFAULT_DTYPE)
    _check_scan_shapes(abar, bx, C_t, x)
    hs = states_sequential(_apply_resets(abar, keep), bx)
    return readout(hs, C_t, D_skip, x)


def scan_parallel(abar, bx, C_t, D_skip, x, keep: Optional[np.ndarray] = None) -> np.ndarray:
    """Same result as scan_sequential, computed with the tree schedule."""
    abar, bx = np.asarray(abar, dtype=DEFAULT_DTYPE), np.asarray(bx, dtype=DEFAULT_DTYPE)
    C_t, x = np.asarray(C_t, dtype=DEFAULT_DTYPE), np.asarray(x, dtype=DEFAULT_DTYPE)
    _check_scan_shapes(abar, bx, C_t, x)
    hs = states_parallel(_apply_resets(abar, keep), bx)
    return readout(hs, C_t, D_skip, x)


# ---------- Boundaries ----------


def check_boundaries(boundaries: Sequence[int], length: int) -> tuple[int, ...]:
    cuts = tuple(int(b) for b in boundaries)
    for prev, cur in zip((0,) + cuts, cuts):
        if not (1 <= cur < length) or cur <= prev:
            raise InvalidBoundary(
                f"boundaries must be strictly increasing within [1, {length}), got {list(cuts)}",
                field="boundaries",
            )
    return cuts


def reset_mask(length: int, boundaries: Sequence[int]) -> np.ndarray:
    """1 everywhere except 0 at each boundary position (where a new sub-sequence starts)."""
    keep = np.ones(length, dtype=DEFAULT_DTYPE)
    keep[list(check_boundaries(boundaries, length))] = 0.0
    return keep


def boundaries_from_segment(length: int, segment: int) -> list[int]:
    if segment < 1 or length % segment:
        raise InvalidBoundary(f"segment length {segment} does not divide {length}")
    return list(range(segment, length, segment))


# ---------- Full selective scan (forward + analytic backward) ----------


@dataclass
class ScanState:
    """Everything the backward sweep needs from one forward pass."""

    x: np.ndarray
    delta: np.ndarray
    A: np.ndarray
    B_t: np.ndarray
    C_t: np.ndarray
    D_skip: Optional[np.ndarray]
    z: np.ndarray
    abar: np.ndarray
    hs: np.ndarray
    keep: Optional[np.ndarray] = None
    euler_b: bool = False


@dataclass
class ScanGrads:
    x: np.ndarray
    delta: np.ndarray
    A: np.ndarray
    B_t: np.ndarray
    C_t: np.ndarray
    D_skip: Optional[np.ndarray] = field(default=None)


def scan_forward(
    x,
    delta,
    A,
    B_t,
    C_t,
    D_skip=None,
    keep: Optional[np.ndarray] = None,
    mode: str = "sequential",
    euler_b: bool = False,
) -> tuple[np.ndarray, ScanState]:
    """Discretize, scan, read out; returns y and the state saved for scan_backward."""
    x = np.asarray(x, dtype=DEFAULT_DTYPE)
    delta = np.asarray(delta, dtype=DEFAULT_DTYPE)
    B_t = np.asarray(B_t, dtype=DEFAULT_DTYPE)
    C_t = np.asarray(C_t, dtype=DEFAULT_DTYPE)
    A = np.asarray(A, dtype=DEFAULT_DTYPE)
    if delta.shape != x.shape:
        raise ShapeError(f"delta {delta.shape} does not match x {x.shape}")
    if A.shape[0] != x.shape[-1] or B_t.shape[-1] != A.shape[1] or C_t.shape != B_t.shape:
        raise ShapeError(f"A {A.shape}, B {B_t.shape}, C {C_t.shape} inconsistent with x {x.shape}")
    step = discretize(A, B_t, delta, euler_b=euler_b)
    abar = _apply_resets(step.abar, keep)
    bx = step.bbar * x[..., None]
    _check_scan_shapes(abar, bx, C_t, x)
    if mode == "parallel":
        hs = states_parallel(abar, bx)
    elif mode == "sequential":
        hs = states_sequential(abar, bx)
    else:
        raise ValueError(f"unknown scan mode '{mode}'")
    d_skip = None if D_skip is None else np.asarray(D_skip, dtype=DEFAULT_DTYPE)
    y = readout(hs, C_t, d_skip, x)
    state = ScanState(x, delta, A, B_t, C_t, d_skip, step.z, abar, hs, keep, euler_b)
    return y, state


def scan_backward(state: ScanState, gy) -> ScanGrads:
    """Reverse-time adjoint sweep: gh_t = C_t gy_t + Abar_{t+1} gh_{t+1}."""
    gy = np.asarray(gy, dtype=DEFAULT_DTYPE)
    length = state.x.shape[-2]
    gh = np.empty_like(state.hs)
    carry = np.zeros_like(state.hs[..., 0, :, :])
    for t in range(length - 1, -1, -1):
        carry = gy[..., t, :, None] * state.C_t[..., t, None, :] + carry
        gh[..., t, :, :] = carry
        carry = state.abar[..., t, :, :] * carry

    h_prev = np.zeros_like(state.hs)
    h_prev[..., 1:, :, :] = state.hs[..., :-1, :, :]
    g_abar = gh * h_prev

    delta_e = state.delta[..., None]
    x_e = state.x[..., None]
    b_e = state.B_t[..., None, :]
    scale = 1.0 if state.euler_b else phi(state.z)

    g_c = (gy[..., None] * state.hs).sum(axis=-2)
    g_x = (gh * scale * delta_e * b_e).sum(axis=-1)
    g_b = (gh * scale * delta_e * x_e).sum(axis=-2)
    g_delta = (gh * scale * b_e * x_e).sum(axis=-1)

    # z feeds both Abar = exp(z) (where not reset) and phi(z)
    g_z = g_abar * state.abar
    if not state.euler_b:
        g_z = g_z + gh * delta_e * b_e * x_e * phi_prime(state.z)
    g_delta = g_delta + (g_z * state.A).sum(axis=-1)
    d_inner, d_state = state.A.shape
    g_a = (g_z * delta_e).reshape(-1, d_inner, d_state).sum(axis=0)

    g_d = None
    if state.D_skip is not None:
        g_x = g_x + gy * state.D_skip
        g_d = (gy * state.x).reshape(-1, d_inner).sum(axis=0)
    return ScanGrads(x=g_x, delta=g_delta, A=g_a, B_t=g_b, C_t=g_c, D_skip=g_d)


def selective_scan(
    x: Operand,
    delta: Operand,
    A: Operand,
    B_t: Operand,
    C_t: Operand,
    D_skip: Optional[Operand] = None,
    keep: Optional[np.ndarray] = None,
    mode: str = "sequential",
    euler_b: bool = False,
) -> Var:
    """Tape op for the whole discretize + scan + readout, differentiated analytically."""
    y, state = scan_forward(
        _value(x),
        _value(delta),
        _value(A),
        _value(B_t),
        _value(C_t),
        None if D_skip is None else _value(D_skip),
        keep=keep,
        mode=mode,
        euler_b=euler_b,
    )
    inputs = (x, delta, A, B_t, C_t) + (() if D_skip is None else (D_skip,))
    return _emit("selective_scan", inputs, y, state=state)


@register_vjp("selective_scan")
def _selective_scan_vjp(node: Node, g: np.ndarray):
    grads = scan_backward(node.saved["state"], g)
    out = [grads.x, grads.delta, grads.A, grads.B_t, grads.C_t]
    if grads.D_skip is not None:
        out.append(grads.D_skip)
    return out


def scan_factorized(
    x,
    delta,
    A,
    B_t,
    C_t,
    D_skip=None,
    boundaries: Sequence[int] = (),
    euler_b: bool = False,
) -> np.ndarray:
    """Independent scans over [0, b1), [b1, b2), ... concatenated along the sequence."""
    x = np.asarray(x, dtype=DEFAULT_DTYPE)
    length = x.shape[-2]
    cuts = check_boundaries(boundaries, length)
    edges = (0,) + cuts + (length,)
    delta, B_t, C_t = (np.asarray(v, dtype=DEFAULT_DTYPE) for v in (delta, B_t, C_t))
    pieces = []
    for start, stop in zip(edges, edges[1:]):
        y, _ = scan_forward(
            x[..., start:stop, :],
            delta[..., start:stop, :],
            A,
            B_t[..., start:stop, :],
            C_t[..., start:stop, :],
            D_skip,
            euler_b=euler_b,
        )
        pieces.append(y)
    logger.debug(f"factorized scan: {len(pieces)} sub-sequences over length {length}")
    return np.concatenate(pieces, axis=-2)
