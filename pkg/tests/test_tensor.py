"""
Tests for the array and tape layer: NdArray layout, permutations and reverse-mode
gradients checked against central finite differences.
"""

import math

import numpy as np
import pytest

from core.errors import InvalidPermutation, MissingSeed, ShapeError
from core.model import SsmNdModel, to_leaves
from core.tensor import (
    NdArray,
    Tape,
    backward,
    concat,
    conv1d_causal,
    flip,
    log_softmax,
    matmul,
    pairwise_sum,
    permute,
    reduce_mean,
    reduce_sum,
    reshape,
    reverse_flat,
    rms_norm,
    row_major_strides,
    silu,
    slice_axis,
    softplus,
    supported_ops,
    take,
)
from models import ModelConfig


def numeric_grad(fn, x, eps=1e-6):
    """Central differences of a scalar function of one array."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        plus, minus = x.copy(), x.copy()
        plus[idx] += eps
        minus[idx] -= eps
        grad[idx] = (fn(plus) - fn(minus)) / (2 * eps)
    return grad


def check_grad(build, x, atol=1e-6):
    """build(var) -> scalar Var; compares the tape gradient with finite differences."""
    tape = Tape()
    leaf = tape.leaf(x)
    grads = backward(tape, build(leaf))
    numeric = numeric_grad(lambda v: float(build(Tape().leaf(v)).value), x)
    np.testing.assert_allclose(grads.raw(leaf), numeric, atol=atol, rtol=1e-5)


# ---------- Test 1: NdArray ----------


class TestNdArray:
    """Layout, immutability and exact sums."""

    def test_row_major_strides(self):
        assert row_major_strides((2, 3, 4)) == (12, 4, 1)
        assert NdArray(np.zeros((5, 7))).strides == (7, 1)

    def test_rejects_zero_extent(self):
        with pytest.raises(ShapeError):
            NdArray(np.zeros((3, 0)))

    def test_is_read_only(self):
        a = NdArray([[1.0, 2.0]])
        with pytest.raises(ValueError):
            a.numpy()[0, 0] = 5.0

    def test_permute_matches_transpose(self, rng):
        x = rng.normal(size=(2, 3, 4))
        out = NdArray(x).permute((2, 0, 1))
        assert out.shape == (4, 2, 3)
        np.testing.assert_array_equal(out.numpy(), np.transpose(x, (2, 0, 1)))

    def test_permute_then_inverse_is_bit_identical(self, rng):
        a = NdArray(rng.normal(size=(3, 4, 5)))
        back = a.permute((1, 2, 0)).permute((2, 0, 1))
        assert back.bit_equal(a)

    def test_invalid_permutation(self):
        a = NdArray(np.zeros((2, 2, 2)))
        with pytest.raises(InvalidPermutation):
            a.permute((0, 0, 1))
        with pytest.raises(InvalidPermutation):
            a.permute((0, 1))

    def test_reverse_flat_is_an_involution(self, rng):
        a = NdArray(rng.normal(size=(3, 5)))
        assert reverse_flat(a).data[0] == a.data[-1]
        assert reverse_flat(reverse_flat(a)).bit_equal(a)

    def test_reshape_size_mismatch(self):
        with pytest.raises(ShapeError):
            NdArray(np.zeros((2, 3))).reshape((4, 2))

    def test_sum_of_permutation_is_unchanged(self):
        a = NdArray(np.arange(24, dtype=np.float64).reshape(2, 3, 4))
        assert a.sum() == 276.0
        assert a.permute((2, 1, 0)).sum() == a.sum()


# ---------- Test 2: Gradients ----------


class TestGradients:
    """Each registered op against finite differences."""

    def test_elementwise_chain(self, rng):
        x = rng.normal(size=(3, 4))
        check_grad(lambda v: reduce_sum(silu(v) * softplus(v) + v * v), x)

    def test_matmul(self, rng):
        w = rng.normal(size=(4, 5))
        check_grad(lambda v: reduce_sum(matmul(v, w) * matmul(v, w)), rng.normal(size=(2, 3, 4)))

    def test_conv1d_causal(self, rng):
        w = rng.normal(size=(3, 4))
        b = rng.normal(size=(3,))
        check_grad(lambda v: reduce_sum(conv1d_causal(v, w, b) * conv1d_causal(v, w, b)),
                   rng.normal(size=(2, 6, 3)))

    def test_conv1d_causal_respects_segments(self, rng):
        x = rng.normal(size=(1, 6, 2))
        w = rng.normal(size=(2, 4))
        b = np.zeros(2)
        whole = conv1d_causal(x, w, b).value
        split = conv1d_causal(x, w, b, segments=np.array([0, 0, 0, 1, 1, 1])).value
        second = conv1d_causal(x[:, 3:], w, b).value
        np.testing.assert_allclose(split[:, :3], whole[:, :3])
        np.testing.assert_allclose(split[:, 3:], second)

    def test_conv1d_causal_is_causal(self, rng):
        x = rng.normal(size=(1, 8, 2))
        w = rng.normal(size=(2, 4))
        b = rng.normal(size=(2,))
        y = conv1d_causal(x, w, b).value
        x2 = x.copy()
        x2[:, 5:] += 1.0
        y2 = conv1d_causal(x2, w, b).value
        np.testing.assert_array_equal(y[:, :5], y2[:, :5])

    def test_shape_ops(self, rng):
        x = rng.normal(size=(2, 3, 4))

        def build(v):
            p = permute(v, (2, 0, 1))
            r = reshape(flip(p, 0), (4, 6))
            s = slice_axis(r, 1, 1, 5)
            c = concat([s, r], axis=1)
            return reduce_sum(c * c * np.arange(40.0).reshape(4, 10))

        check_grad(build, x)

    def test_reduce_mean_axis(self, rng):
        check_grad(lambda v: reduce_sum(reduce_mean(v, axis=1) * reduce_mean(v, axis=1)),
                   rng.normal(size=(3, 5)))

    def test_take_accumulates_repeated_rows(self):
        tape = Tape()
        table = tape.leaf(np.ones((4, 2)))
        rows = take(table, np.array([1, 1, 3]))
        grads = backward(tape, reduce_sum(rows))
        np.testing.assert_array_equal(grads.raw(table), [[0, 0], [2, 2], [0, 0], [1, 1]])

    def test_rms_norm(self, rng):
        w = rng.normal(size=(5,))
        check_grad(lambda v: reduce_sum(rms_norm(v, w) * np.arange(10.0).reshape(2, 5)),
                   rng.normal(size=(2, 5)))

    def test_log_softmax(self, rng):
        target = np.eye(4)[[0, 3]]
        check_grad(lambda v: reduce_sum(log_softmax(v) * target), rng.normal(size=(2, 4)))


# ---------- Test 3: Backward contract ----------


class TestBackward:
    """Seeds, constants and unreachable nodes."""

    def test_non_scalar_root_needs_seed(self):
        tape = Tape()
        x = tape.leaf(np.ones(3))
        y = x * 2.0
        with pytest.raises(MissingSeed):
            backward(tape, y)
        grads = backward(tape, y, seed=np.array([1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(grads.raw(x), [2.0, 0.0, 4.0])

    def test_seed_shape_checked(self):
        tape = Tape()
        y = tape.leaf(np.ones(3)) * 1.0
        with pytest.raises(ShapeError):
            backward(tape, y, seed=np.ones(2))

    def test_unused_leaf_gets_no_gradient(self):
        tape = Tape()
        used = tape.leaf(np.ones(2))
        unused = tape.leaf(np.ones(2))
        grads = backward(tape, reduce_sum(used))
        assert grads.raw(unused) is None
        assert unused not in grads

    def test_constants_are_not_recorded(self):
        tape = Tape()
        x = tape.leaf(np.ones(2))
        before = len(tape)
        _ = silu(np.ones(2)) + 1.0
        assert len(tape) == before
        assert x.id == 0


# ---------- Test 4: Summation and op registry ----------


class TestPairwiseSum:
    """Cascade summation against exactly rounded sums."""

    @pytest.mark.parametrize("seed", range(5))
    def test_mixed_magnitudes_match_fsum(self, seed):
        rng = np.random.default_rng(seed)
        values = 10.0 ** rng.uniform(-8, 8, size=10_000) * rng.uniform(1, 2, size=10_000)
        exact = math.fsum(values)
        assert abs(pairwise_sum(values) - exact) <= 1e-12 * exact

    def test_signed_values_within_cascade_bound(self, rng):
        values = rng.normal(size=(40, 50, 3)) * 10.0 ** rng.integers(-6, 7, size=(40, 50, 3))
        exact = math.fsum(values.reshape(-1))
        scale = math.fsum(np.abs(values).reshape(-1))
        assert abs(pairwise_sum(values) - exact) <= 1e-12 * scale

    def test_reduce_sum_uses_it(self, rng):
        values = rng.normal(size=(7, 9))
        assert reduce_sum(values).value == pairwise_sum(values)


class TestOpRegistry:
    """Every op a model records has a registered VJP."""

    def test_model_ops_are_registered(self, rng):
        config = ModelConfig(
            rank=2,
            input_shape=[4, 4],
            in_channels=1,
            patch=[2, 2],
            d_model=4,
            n_layers=2,
            d_state=2,
            arrangement="nd-ssm",
            readout="position",
        )
        model = SsmNdModel(config)
        tape = Tape()
        params = to_leaves(tape, model.init_params(0))
        tokens = tape.leaf(model.embed_input(rng.normal(size=(2, 4, 4, 1))))
        loss = reduce_sum(log_softmax(model.forward_tokens(params, tokens)))
        recorded = {node.op for node in tape.nodes} - {"leaf"}
        assert recorded <= set(supported_ops())
        assert "selective_scan" in recorded
        assert backward(tape, loss).raw(tokens) is not None

    def test_registry_is_sorted_and_unique(self):
        ops = supported_ops()
        assert ops == sorted(set(ops))
        assert {"add", "mul", "matmul", "permute", "sum", "selective_scan"} <= set(ops)
