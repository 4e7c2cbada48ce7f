import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mohd.autodiff import (
    Tensor,
    add,
    build_tape,
    concat,
    log_softmax,
    matmul,
    mul,
    no_grad,
    rmsnorm,
    scatter_cols,
    scatter_rows,
    silu,
    softmax,
    take,
    take_pairs,
    tslice,
)
from mohd.gradcheck import grad_check


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])

    def test_hand_computed(self):
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
        out = matmul(Tensor(a), Tensor(b)).data
        assert np.abs(out - oracles.matmul_triple_loop(a, b)).max() < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="inner dimensions"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_batched_matches_per_slice(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 5, 2))
        out = matmul(Tensor(a), Tensor(b)).data
        for i in range(3):
            np.testing.assert_allclose(out[i], a[i] @ b[i], atol=1e-14)


class TestSoftmax:
    def test_symmetry(self):
        out = softmax(Tensor([0.0, 0.0, 0.0]), axis=-1)
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_no_overflow(self):
        out = softmax(Tensor([1000.0, 0.0]), axis=-1)
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)

    def test_against_direct_formula(self):
        out = softmax(Tensor([1.0, 2.0, 3.0]), axis=-1)
        ref = oracles.softmax_direct(np.array([1.0, 2.0, 3.0]))
        assert np.abs(out.data - ref).max() < 1e-12

    def test_empty_axis(self):
        with pytest.raises(ValueError, match="empty"):
            softmax(Tensor(np.ones((2, 0))), axis=-1)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    def test_sums_to_one(self, xs):
        out = softmax(Tensor(np.array(xs)), axis=-1)
        assert abs(out.data.sum() - 1.0) <= 1e-12


class TestSilu:
    def test_zero(self):
        assert silu(Tensor([0.0])).data[0] == 0.0

    def test_large_positive_asymptote(self):
        x = 40.0
        assert abs(silu(Tensor([x])).data[0] - x) < 1e-12

    def test_at_one(self):
        expected = 1.0 * (1.0 / (1.0 + np.exp(-1.0)))
        assert abs(silu(Tensor([1.0])).data[0] - expected) < 1e-15

    def test_against_direct_formula(self):
        x = np.random.default_rng(2).normal(size=16)
        assert np.abs(silu(Tensor(x)).data - oracles.silu_direct(x)).max() < 1e-12


class TestRMSNorm:
    def test_constant_vector(self):
        out = rmsnorm(Tensor([3.0, 3.0, 3.0, 3.0]), Tensor(np.ones(4)), eps=0.0)
        np.testing.assert_allclose(out.data, np.ones(4), atol=1e-15)

    def test_unit_rms(self):
        x = np.random.default_rng(3).normal(size=32)
        out = rmsnorm(Tensor(x), Tensor(np.ones(32)), eps=0.0).data
        assert abs(np.sqrt((out * out).mean()) - 1.0) < 1e-12

    def test_against_direct_formula(self):
        rng = np.random.default_rng(4)
        x, w = rng.normal(size=8), rng.normal(size=8)
        out = rmsnorm(Tensor(x), Tensor(w), eps=1e-5).data
        assert np.abs(out - oracles.rmsnorm_direct(x, w, 1e-5)).max() < 1e-12


class TestLogSoftmaxAndGathers:
    def test_log_softmax_matches_direct(self):
        x = np.random.default_rng(5).normal(size=(4, 9))
        out = log_softmax(Tensor(x), axis=-1).data
        np.testing.assert_allclose(out, oracles.log_softmax_direct(x), atol=1e-12)

    def test_take_and_scatter_roundtrip(self):
        x = Tensor(np.arange(12.0).reshape(3, 4))
        idx = np.array([2, 0])
        taken = take(x, idx, axis=-1)
        np.testing.assert_array_equal(taken.data, [[2, 0], [6, 4], [10, 8]])
        back = scatter_cols(taken, idx, 4)
        np.testing.assert_array_equal(back.data[:, [0, 2]], x.data[:, [0, 2]])
        assert (back.data[:, [1, 3]] == 0).all()

    def test_scatter_rows(self):
        x = Tensor(np.ones((2, 3)))
        out = scatter_rows(x, np.array([3, 1]), 5)
        assert out.data.sum() == 6.0
        assert (out.data[[0, 2, 4]] == 0).all()

    def test_take_pairs(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        out = take_pairs(x, np.array([2, 0]))
        np.testing.assert_array_equal(out.data, [2.0, 3.0])


class TestTape:
    def test_backward_twice_is_an_error(self):
        x = Tensor([2.0], requires_grad=True)
        y = mul(x, x).sum()
        y.backward()
        with pytest.raises(RuntimeError, match="already ran"):
            y.backward()

    def test_backward_requires_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            mul(x, x).backward()

    def test_tape_is_topologically_ordered(self):
        x = Tensor([1.0], requires_grad=True)
        a = mul(x, 2.0)
        b = add(a, x)
        c = mul(b, a)
        loss = c.sum()
        tape = build_tape(loss)
        position = {id(t): i for i, t in enumerate(tape)}
        for node in tape:
            for parent in node._parents:
                assert position[id(parent)] < position[id(node)]

    def test_diamond_graph_accumulates(self):
        # L = (2x) * (2x + x) = 6x^2, dL/dx = 12x
        x = Tensor([3.0], requires_grad=True)
        a = mul(x, 2.0)
        loss = mul(a, add(a, x)).sum()
        loss.backward()
        assert abs(x.grad[0] - 36.0) < 1e-12

    def test_no_grad_suppresses_graph(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = mul(x, x)
        assert not y.requires_grad and y._backward_fn is None

    def test_forward_deterministic(self):
        rng = np.random.default_rng(6)
        a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        r1 = silu(matmul(Tensor(a), Tensor(b))).data
        r2 = silu(matmul(Tensor(a), Tensor(b))).data
        np.testing.assert_array_equal(r1, r2)


class TestOpGradients:
    """Every differentiable op passes the central-difference oracle."""

    def _check(self, f, *shapes, seed=0, tol=1e-6):
        rng = np.random.default_rng(seed)
        params = [Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
        assert grad_check(f, params, h=1e-5) < tol

    def test_matmul(self):
        self._check(lambda ps: matmul(ps[0], ps[1]).sum(), (3, 4), (4, 2))

    def test_batched_matmul(self):
        self._check(lambda ps: matmul(ps[0], ps[1]).sum(), (2, 3, 4), (2, 4, 2))

    def test_softmax(self):
        self._check(lambda ps: mul(softmax(ps[0], axis=-1), ps[1]).sum(), (3, 5), (3, 5))

    def test_log_softmax(self):
        self._check(
            lambda ps: mul(log_softmax(ps[0], axis=-1), ps[1]).sum(), (3, 5), (3, 5)
        )

    def test_silu(self):
        self._check(lambda ps: silu(ps[0]).sum(), (4, 4))

    def test_rmsnorm(self):
        self._check(lambda ps: rmsnorm(ps[0], ps[1], 1e-5).sum(), (3, 8), (8,))

    def test_div_and_power(self):
        self._check(
            lambda ps: (ps[0] ** 2.0 / add(mul(ps[1], ps[1]), 1.0)).sum(), (3, 3), (3, 3)
        )

    def test_take_with_repeats(self):
        idx = np.array([0, 2, 2, 1])
        self._check(lambda ps: mul(take(ps[0], idx, axis=0), 1.5).sum(), (3, 4))

    def test_take_pairs(self):
        idx = np.array([1, 0, 3])
        self._check(lambda ps: take_pairs(ps[0], idx).sum(), (3, 4))

    def test_scatter_and_slice(self):
        idx = np.array([4, 1])
        self._check(
            lambda ps: mul(scatter_cols(ps[0], idx, 6), 2.0).sum()
            + tslice(ps[0], (slice(None), 0)).sum(),
            (3, 2),
        )

    def test_concat_and_mean(self):
        self._check(
            lambda ps: concat([ps[0], ps[1]], axis=1).mean(), (2, 3), (2, 2)
        )

    def test_broadcast_add_mul(self):
        self._check(
            lambda ps: mul(add(ps[0], ps[1]), ps[2]).sum(), (3, 4), (4,), (3, 1)
        )
