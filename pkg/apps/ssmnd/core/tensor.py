"""
Dense N-d arrays and a tape-based reverse-mode differentiation engine.

NdArray is the immutable value type passed between modules. Var is a handle to a
value recorded on a Tape; every differentiable op appends exactly one node holding
its op id, input node ids and whatever forward values its VJP needs. backward()
walks the tape in reverse and returns the vector-Jacobian products.

The op set is closed: elementwise add/mul/neg/exp/softplus/silu, matmul, depthwise
causal 1-D convolution, permute, flip/reverse_flat, reshape, slice/concat,
sum/mean, embedding lookup, plus rms_norm and log_softmax. Modules that need
something else register their own verified VJP (the selective scan does).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Mapping, Optional, Sequence, Union

import numpy as np

from core.errors import InvalidPermutation, MissingSeed, ShapeError

logger = logging.getLogger("ssmnd.core.tensor")

DEFAULT_DTYPE = np.float64
CHECKPOINT_DTYPES = {"float32": np.float32, "float64": np.float64}


# ---------- Shape algebra ----------


def row_major_strides(shape: Sequence[int]) -> tuple[int, ...]:
    """Element strides of a row-major array: stride[i] = prod(shape[i+1:])."""
    strides = []
    acc = 1
    for extent in reversed(shape):
        strides.append(acc)
        acc *= extent
    return tuple(reversed(strides))


def check_permutation(perm: Sequence[int], rank: int) -> tuple[int, ...]:
    perm = tuple(int(p) for p in perm)
    if len(perm) != rank:
        raise InvalidPermutation(f"permutation {perm} has length {len(perm)}, array rank is {rank}")
    if sorted(perm) != list(range(rank)):
        raise InvalidPermutation(f"{perm} is not a permutation of 0..{rank - 1}")
    return perm


def inverse_permutation(perm: Sequence[int]) -> tuple[int, ...]:
    inv = [0] * len(perm)
    for i, p in enumerate(perm):
        inv[p] = i
    return tuple(inv)


def pairwise_sum(values: np.ndarray) -> float:
    """Sum of all elements with pairwise (cascade) summation."""
    flat = np.ascontiguousarray(values, dtype=np.float64).reshape(-1)
    # numpy reduces contiguous float arrays pairwise along the fast axis
    return float(np.add.reduce(flat))


# ---------- NdArray ----------


class NdArray:
    """Immutable dense row-major array of positive extents."""

    __slots__ = ("_array",)

    def __init__(self, data: Any, dtype: Any = None):
        arr = np.array(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE, order="C")
        if any(extent <= 0 for extent in arr.shape):
            raise ShapeError(f"extents must be positive, got {arr.shape}")
        arr.setflags(write=False)
        self._array = arr

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "NdArray":
        """Wrap an array without copying when it is already C-contiguous."""
        out = cls.__new__(cls)
        view = np.ascontiguousarray(arr).view()
        view.setflags(write=False)
        out._array = view
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def ndim(self) -> int:
        return self._array.ndim

    @property
    def size(self) -> int:
        return int(self._array.size)

    @property
    def dtype(self) -> np.dtype:
        return self._array.dtype

    @property
    def strides(self) -> tuple[int, ...]:
        """Element (not byte) strides."""
        return row_major_strides(self.shape)

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the scalars."""
        return self._array.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self._array

    def astype(self, dtype: Any) -> "NdArray":
        return NdArray(self._array, dtype=dtype)

    def permute(self, perm: Sequence[int]) -> "NdArray":
        perm = check_permutation(perm, self.ndim)
        return NdArray.wrap(np.ascontiguousarray(np.transpose(self._array, perm)))

    def reverse_flat(self) -> "NdArray":
        return NdArray.wrap(self._array.reshape(-1)[::-1].reshape(self.shape).copy())

    def reshape(self, shape: Sequence[int]) -> "NdArray":
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape, dtype=np.int64)) != self.size:
            raise ShapeError(f"cannot reshape {self.shape} into {shape}")
        return NdArray.wrap(self._array.reshape(shape))

    def sum(self) -> float:
        return pairwise_sum(self._array)

    def bit_equal(self, other: "NdArray") -> bool:
        return (
            self.shape == other.shape
            and self.dtype == other.dtype
            and self._array.tobytes() == other._array.tobytes()
        )

    def __array__(self, dtype: Any = None, copy: Any = None) -> np.ndarray:
        return self._array if dtype is None else self._array.astype(dtype)

    def __repr__(self) -> str:
        return f"NdArray(shape={self.shape}, dtype={self.dtype.name})"


# ---------- Tape ----------


@dataclass
class Node:
    """One recorded op: id of the op, its input node ids, saved forward values."""

    op: str
    inputs: tuple[Optional[int], ...]
    saved: dict = field(default_factory=dict)
    shape: tuple[int, ...] = ()


VjpFn = Callable[[Node, np.ndarray], Sequence[Optional[np.ndarray]]]
_VJPS: dict[str, VjpFn] = {}


def register_vjp(op: str) -> Callable[[VjpFn], VjpFn]:
    """Register the vector-Jacobian product for an op id."""

    def decorator(fn: VjpFn) -> VjpFn:
        _VJPS[op] = fn
        return fn

    return decorator


def supported_ops() -> list[str]:
    return sorted(_VJPS)


class Tape:
    """Single-threaded record of differentiable ops, in topological order."""

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []
        self._leaf_names: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value: Any, name: Optional[str] = None) -> "Var":
        arr = np.array(value, dtype=DEFAULT_DTYPE)
        if not self.record:
            return Var(None, None, arr)
        node_id = len(self.nodes)
        self.nodes.append(Node("leaf", (), {"name": name}, arr.shape))
        if name is not None:
            self._leaf_names[name] = node_id
        return Var(self, node_id, arr)

    def leaf_id(self, name: str) -> int:
        return self._leaf_names[name]

    def push(self, op: str, inputs: Sequence[Any], out: np.ndarray, /, **saved: Any) -> "Var":
        if not self.record:
            return Var(None, None, out)
        ids = tuple(x.id if isinstance(x, Var) else None for x in inputs)
        if all(i is None for i in ids):
            return Var(None, None, out)
        node_id = len(self.nodes)
        self.nodes.append(Node(op, ids, saved, out.shape))
        return Var(self, node_id, out)


class Var:
    """A value living on a tape (or a constant when id is None)."""

    __slots__ = ("tape", "id", "value")
    __array_priority__ = 100

    def __init__(self, tape: Optional[Tape], node_id: Optional[int], value: np.ndarray):
        self.tape = tape
        self.id = node_id
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def array(self) -> NdArray:
        return NdArray.wrap(self.value)

    def __add__(self, other: Any) -> "Var":
        return add(self, other)

    def __radd__(self, other: Any) -> "Var":
        return add(other, self)

    def __sub__(self, other: Any) -> "Var":
        return add(self, neg(other))

    def __rsub__(self, other: Any) -> "Var":
        return add(other, neg(self))

    def __mul__(self, other: Any) -> "Var":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Var":
        return mul(other, self)

    def __neg__(self) -> "Var":
        return neg(self)

    def __matmul__(self, other: Any) -> "Var":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Var(id={self.id}, shape={self.shape})"


Operand = Union[Var, np.ndarray, float, int]


def _value(x: Operand) -> np.ndarray:
    if isinstance(x, Var):
        return x.value
    if isinstance(x, NdArray):
        return x.numpy()
    return np.asarray(x, dtype=DEFAULT_DTYPE)


def _tape_of(*xs: Any) -> Optional[Tape]:
    for x in xs:
        if isinstance(x, Var) and x.tape is not None:
            return x.tape
    return None


def _emit(op: str, inputs: Sequence[Any], out: np.ndarray, /, **saved: Any) -> Var:
    tape = _tape_of(*inputs)
    if tape is None:
        return Var(None, None, out)
    return tape.push(op, inputs, out, **saved)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus_np(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


# ---------- Elementwise ops ----------


def add(a: Operand, b: Operand) -> Var:
    av, bv = _value(a), _value(b)
    return _emit("add", (a, b), av + bv, a_shape=av.shape, b_shape=bv.shape)


@register_vjp("add")
def _add_vjp(node: Node, g: np.ndarray):
    return unbroadcast(g, node.saved["a_shape"]), unbroadcast(g, node.saved["b_shape"])


def mul(a: Operand, b: Operand) -> Var:
    av, bv = _value(a), _value(b)
    return _emit("mul", (a, b), av * bv, a=av, b=bv)


@register_vjp("mul")
def _mul_vjp(node: Node, g: np.ndarray):
    a, b = node.saved["a"], node.saved["b"]
    return unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)


def neg(a: Operand) -> Var:
    return _emit("neg", (a,), -_value(a))


@register_vjp("neg")
def _neg_vjp(node: Node, g: np.ndarray):
    return (-g,)


def exp(a: Operand) -> Var:
    out = np.exp(_value(a))
    return _emit("exp", (a,), out, out=out)


@register_vjp("exp")
def _exp_vjp(node: Node, g: np.ndarray):
    return (g * node.saved["out"],)


def softplus(a: Operand) -> Var:
    av = _value(a)
    return _emit("softplus", (a,), softplus_np(av), x=av)


@register_vjp("softplus")
def _softplus_vjp(node: Node, g: np.ndarray):
    return (g * sigmoid(node.saved["x"]),)


def silu(a: Operand) -> Var:
    av = _value(a)
    s = sigmoid(av)
    return _emit("silu", (a,), av * s, x=av, s=s)


@register_vjp("silu")
def _silu_vjp(node: Node, g: np.ndarray):
    x, s = node.saved["x"], node.saved["s"]
    return (g * (s + x * s * (1.0 - s)),)


# ---------- Linear algebra ----------


def matmul(a: Operand, b: Operand) -> Var:
    av, bv = _value(a), _value(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {av.shape} @ {bv.shape}")
    return _emit("matmul", (a, b), np.matmul(av, bv), a=av, b=bv)


@register_vjp("matmul")
def _matmul_vjp(node: Node, g: np.ndarray):
    a, b = node.saved["a"], node.saved["b"]
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)


def _segment_masks(length: int, width: int, segments: Optional[np.ndarray]) -> list[np.ndarray]:
    """masks[j][t] is 1 when tap t-j is inside the sequence and in t's segment."""
    t = np.arange(length)
    masks = []
    for j in range(width):
        valid = t >= j
        if segments is not None and j > 0:
            same = np.zeros(length, dtype=bool)
            same[j:] = segments[j:] == segments[: length - j]
            valid &= same
        masks.append(valid.astype(DEFAULT_DTYPE))
    return masks


def conv1d_causal(
    x: Operand, weight: Operand, bias: Operand, segments: Optional[np.ndarray] = None
) -> Var:
    """
    Depthwise causal convolution over axis -2 of a (..., L, C) array.

    weight is (C, K); y[t, c] = bias[c] + sum_j weight[c, K-1-j] * x[t-j, c], with the
    sequence left-padded by K-1 zeros. When `segments` (length L) is given, taps that
    cross from one segment id into another are dropped.
    """
    xv, wv, bv = _value(x), _value(weight), _value(bias)
    length, channels = xv.shape[-2], xv.shape[-1]
    if wv.shape[0] != channels or bv.shape != (channels,):
        raise ShapeError(f"conv weight {wv.shape} / bias {bv.shape} do not match {channels} channels")
    width = wv.shape[1]
    masks = _segment_masks(length, width, segments)
    out = np.broadcast_to(bv, xv.shape).copy()
    for j in range(width):
        shifted = np.zeros_like(xv)
        shifted[..., j:, :] = xv[..., : length - j, :]
        out += shifted * masks[j][:, None] * wv[:, width - 1 - j]
    return _emit("conv1d_causal", (x, weight, bias), out, x=xv, w=wv, masks=masks)


@register_vjp("conv1d_causal")
def _conv_vjp(node: Node, g: np.ndarray):
    x, w, masks = node.saved["x"], node.saved["w"], node.saved["masks"]
    length, width = x.shape[-2], w.shape[1]
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    lead = tuple(range(g.ndim - 1))
    for j in range(width):
        gm = g * masks[j][:, None]
        gx[..., : length - j, :] += gm[..., j:, :] * w[:, width - 1 - j]
        shifted = np.zeros_like(x)
        shifted[..., j:, :] = x[..., : length - j, :]
        gw[:, width - 1 - j] = (gm * shifted).sum(axis=lead)
    gb = g.sum(axis=lead)
    return gx, gw, gb


# ---------- Shape ops ----------


def permute(a: Union[NdArray, Operand], perm: Sequence[int]):
    """Reorder axes: out.shape[i] == a.shape[perm[i]]."""
    if isinstance(a, NdArray):
        return a.permute(perm)
    av = _value(a)
    perm = check_permutation(perm, av.ndim)
    return _emit("permute", (a,), np.ascontiguousarray(np.transpose(av, perm)), perm=perm)


@register_vjp("permute")
def _permute_vjp(node: Node, g: np.ndarray):
    return (np.transpose(g, inverse_permutation(node.saved["perm"])),)


def reverse_flat(a: Union[NdArray, Operand]):
    """Reverse the flat row-major sequence; shape is preserved."""
    if isinstance(a, NdArray):
        return a.reverse_flat()
    av = _value(a)
    return _emit("reverse_flat", (a,), av.reshape(-1)[::-1].reshape(av.shape).copy())


@register_vjp("reverse_flat")
def _reverse_flat_vjp(node: Node, g: np.ndarray):
    return (g.reshape(-1)[::-1].reshape(g.shape),)


def flip(a: Operand, axis: int) -> Var:
    """Reverse one axis (the batched form of reverse_flat for sequence tensors)."""
    av = _value(a)
    return _emit("flip", (a,), np.flip(av, axis=axis).copy(), axis=axis)


@register_vjp("flip")
def _flip_vjp(node: Node, g: np.ndarray):
    return (np.flip(g, axis=node.saved["axis"]),)


def reshape(a: Union[NdArray, Operand], shape: Sequence[int]):
    if isinstance(a, NdArray):
        return a.reshape(shape)
    av = _value(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = av.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {av.shape} into {shape}") from exc
    return _emit("reshape", (a,), out, in_shape=av.shape)


@register_vjp("reshape")
def _reshape_vjp(node: Node, g: np.ndarray):
    return (g.reshape(node.saved["in_shape"]),)


def slice_axis(a: Operand, axis: int, start: int, stop: int) -> Var:
    av = _value(a)
    axis = axis % av.ndim
    if not 0 <= start < stop <= av.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for extent {av.shape[axis]}")
    index = [slice(None)] * av.ndim
    index[axis] = slice(start, stop)
    out = av[tuple(index)].copy()
    return _emit("slice", (a,), out, in_shape=av.shape, index=tuple(index))


@register_vjp("slice")
def _slice_vjp(node: Node, g: np.ndarray):
    full = np.zeros(node.saved["in_shape"], dtype=g.dtype)
    full[node.saved["index"]] = g
    return (full,)


def concat(parts: Sequence[Operand], axis: int) -> Var:
    values = [_value(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]
    return _emit("concat", tuple(parts), out, axis=axis, bounds=bounds)


@register_vjp("concat")
def _concat_vjp(node: Node, g: np.ndarray):
    return tuple(np.split(g, node.saved["bounds"], axis=node.saved["axis"]))


# ---------- Reductions ----------


def _normalize_axes(axis: Optional[Union[int, Sequence[int]]], ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def reduce_sum(a: Operand, axis: Optional[Union[int, Sequence[int]]] = None, keepdims: bool = False) -> Var:
    av = _value(a)
    axes = _normalize_axes(axis, av.ndim)
    if axis is None:
        out = np.asarray(pairwise_sum(av))
        if keepdims:
            out = out.reshape((1,) * av.ndim)
    else:
        out = av.sum(axis=axes, keepdims=keepdims)
    return _emit("sum", (a,), np.asarray(out), in_shape=av.shape, axes=axes, keepdims=keepdims)


@register_vjp("sum")
def _sum_vjp(node: Node, g: np.ndarray):
    in_shape, axes = node.saved["in_shape"], node.saved["axes"]
    if not node.saved["keepdims"]:
        g = np.expand_dims(g, axes) if axes else g
    return (np.broadcast_to(g, in_shape).copy(),)


def reduce_mean(a: Operand, axis: Optional[Union[int, Sequence[int]]] = None, keepdims: bool = False) -> Var:
    av = _value(a)
    axes = _normalize_axes(axis, av.ndim)
    count = int(np.prod([av.shape[i] for i in axes])) if axes else 1
    return mul(reduce_sum(a, axis, keepdims), 1.0 / count)


# ---------- Lookups and normalisation ----------


def take(table: Operand, indices: np.ndarray) -> Var:
    """Embedding lookup: rows of a (V, D) table."""
    tv = _value(table)
    idx = np.asarray(indices, dtype=np.int64)
    return _emit("take", (table,), tv[idx], idx=idx, table_shape=tv.shape)


@register_vjp("take")
def _take_vjp(node: Node, g: np.ndarray):
    full = np.zeros(node.saved["table_shape"], dtype=g.dtype)
    np.add.at(full, node.saved["idx"], g)
    return (full,)


def rms_norm(x: Operand, weight: Operand, eps: float = 1e-5) -> Var:
    xv, wv = _value(x), _value(weight)
    r = 1.0 / np.sqrt(np.mean(xv * xv, axis=-1, keepdims=True) + eps)
    xhat = xv * r
    return _emit("rms_norm", (x, weight), xhat * wv, xhat=xhat, r=r, w=wv)


@register_vjp("rms_norm")
def _rms_norm_vjp(node: Node, g: np.ndarray):
    xhat, r, w = node.saved["xhat"], node.saved["r"], node.saved["w"]
    gxhat = g * w
    gx = r * (gxhat - xhat * np.mean(gxhat * xhat, axis=-1, keepdims=True))
    gw = (g * xhat).reshape(-1, w.shape[-1]).sum(axis=0)
    return gx, gw


def log_softmax(x: Operand, axis: int = -1) -> Var:
    xv = _value(x)
    shifted = xv - xv.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return _emit("log_softmax", (x,), out, out=out, axis=axis)


@register_vjp("log_softmax")
def _log_softmax_vjp(node: Node, g: np.ndarray):
    out, axis = node.saved["out"], node.saved["axis"]
    return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)


# ---------- Backward ----------


class Gradients(Mapping[int, NdArray]):
    """Node id -> gradient, for every node reachable backwards from the root."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def _key(self, key: Union[int, Var]) -> int:
        return key.id if isinstance(key, Var) else key

    def __getitem__(self, key: Union[int, Var]) -> NdArray:
        return NdArray.wrap(self._grads[self._key(key)])

    def raw(self, key: Union[int, Var]) -> Optional[np.ndarray]:
        """The gradient array itself, or None when the node received no gradient."""
        return self._grads.get(self._key(key))

    def __contains__(self, key: object) -> bool:
        return isinstance(key, (int, Var)) and self._key(key) in self._grads

    def __iter__(self) -> Iterator[int]:
        return iter(self._grads)

    def __len__(self) -> int:
        return len(self._grads)


def backward(tape: Tape, root: Union[Var, int], seed: Optional[Any] = None) -> Gradients:
    """Reverse-mode sweep from `root`; the seed defaults to 1 for scalar roots."""
    root_id = root.id if isinstance(root, Var) else root
    if root_id is None:
        raise MissingSeed("root is a constant, nothing was recorded")
    root_node = tape.nodes[root_id]
    if seed is None:
        if int(np.prod(root_node.shape, dtype=np.int64)) != 1:
            raise MissingSeed(f"root has shape {root_node.shape}; supply a seed gradient")
        seed = np.ones(root_node.shape, dtype=DEFAULT_DTYPE)
    seed = np.asarray(seed, dtype=DEFAULT_DTYPE)
    if seed.shape != root_node.shape:
        raise ShapeError(f"seed shape {seed.shape} != root shape {root_node.shape}")

    grads: dict[int, np.ndarray] = {root_id: seed}
    for node_id in range(root_id, -1, -1):
        g = grads.get(node_id)
        if g is None:
            continue
        node = tape.nodes[node_id]
        if node.op == "leaf":
            continue
        input_grads = _VJPS[node.op](node, g)
        for input_id, input_grad in zip(node.inputs, input_grads):
            if input_id is None or input_grad is None:
                continue
            if input_id in grads:
                grads[input_id] = grads[input_id] + input_grad
            else:
                grads[input_id] = input_grad
    return Gradients(grads)
