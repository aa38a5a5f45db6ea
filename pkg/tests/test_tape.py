"""Gradient and semantics checks for the autodiff tape."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridlm import tape
from hybridlm.tape import Tensor, Parameter

from oracles import finite_difference, assert_grads_match


def rand(rng, *shape):
    return rng.standard_normal(shape)


def check_op(build, shapes, seed, rtol=1e-5, max_probes=40):
    """``build(tensors) -> Tensor``; sums output to a scalar and checks grads."""
    rng = np.random.default_rng(seed)
    arrays = [rand(rng, *s) for s in shapes]

    def run(arrs):
        ts = [Tensor(a, requires_grad=True) for a in arrs]
        out = build(ts)
        # weighted sum makes the probe sensitive to every output coordinate
        w = np.arange(1, out.data.size + 1, dtype=np.float64).reshape(out.data.shape) / out.data.size
        loss = tape.tsum(tape.mul(out, Tensor(w)))
        return loss, ts

    loss, ts = run(arrays)
    loss.backward()

    def scalar(arrs):
        l, _ = run(arrs)
        return float(l.data)

    numeric, masks = finite_difference(scalar, arrays, max_probes=max_probes,
                                       rng=np.random.default_rng(seed + 1))
    for i, (t, num, mask) in enumerate(zip(ts, numeric, masks)):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        assert_grads_match(analytic, num, mask, rtol=rtol, label=f"arg{i}")


class TestArithmetic:
    def test_add_broadcast(self):
        check_op(lambda ts: tape.add(ts[0], ts[1]), [(3, 4), (4,)], seed=1)

    def test_mul_broadcast(self):
        check_op(lambda ts: tape.mul(ts[0], ts[1]), [(2, 3, 4), (3, 1)], seed=2)

    def test_div(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4)) + 3.0

        def build(ts):
            return tape.div(ts[0], ts[1])

        def run(arrs):
            ts = [Tensor(x, requires_grad=True) for x in arrs]
            l = tape.tsum(build(ts))
            return l, ts

        loss, ts = run([a, b])
        loss.backward()
        numeric, masks = finite_difference(lambda arrs: float(run(arrs)[0].data), [a, b])
        for t, n, m in zip(ts, numeric, masks):
            assert_grads_match(t.grad, n, m, rtol=1e-5)

    def test_matmul_2d(self):
        check_op(lambda ts: tape.matmul(ts[0], ts[1]), [(3, 5), (5, 2)], seed=4)

    def test_matmul_batched_broadcast(self):
        # stacked left operand against a shared right matrix
        check_op(lambda ts: tape.matmul(ts[0], ts[1]), [(2, 3, 4), (4, 3)], seed=5)

    def test_matmul_rejects_vectors(self):
        with pytest.raises(tape.ShapeError):
            tape.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))

    def test_operator_sugar_matches_functions(self):
        a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        b = Tensor(np.array([3.0, 4.0]), requires_grad=True)
        out = (a + b) * a - b / a
        expect = (a.data + b.data) * a.data - b.data / a.data
        np.testing.assert_allclose(out.data, expect, rtol=1e-12)


class TestNonlinearities:
    def test_relu(self):
        check_op(lambda ts: tape.relu(ts[0]), [(4, 5)], seed=6)

    def test_tanh(self):
        check_op(lambda ts: tape.tanh(ts[0]), [(4, 5)], seed=7)

    def test_sigmoid(self):
        check_op(lambda ts: tape.sigmoid(ts[0]), [(4, 5)], seed=8)

    def test_exp_log_roundtrip_grad(self):
        rng = np.random.default_rng(9)
        x = np.abs(rng.standard_normal((3, 3))) + 0.5

        def run(arrs):
            t = Tensor(arrs[0], requires_grad=True)
            l = tape.tsum(tape.log(tape.exp(t)))
            return l, [t]

        loss, ts = run([x])
        loss.backward()
        # d/dx log(exp(x)) = 1
        np.testing.assert_allclose(ts[0].grad, np.ones_like(x), rtol=1e-10)


class TestShapeOps:
    def test_reshape(self):
        check_op(lambda ts: tape.reshape(ts[0], (6, 2)), [(3, 4)], seed=10)

    def test_transpose(self):
        check_op(lambda ts: tape.transpose(ts[0], (2, 0, 1)), [(2, 3, 4)], seed=11)

    def test_concat(self):
        check_op(lambda ts: tape.concat(ts, axis=1), [(2, 3), (2, 2)], seed=12)

    def test_slice(self):
        check_op(lambda ts: ts[0][1:3], [(5, 4)], seed=13)

    def test_slice_gradient_is_scatter(self):
        x = Tensor(np.arange(12, dtype=np.float64).reshape(3, 4), requires_grad=True)
        tape.tsum(x[1]).backward()
        expect = np.zeros((3, 4))
        expect[1] = 1.0
        np.testing.assert_array_equal(x.grad, expect)


class TestReductions:
    def test_sum_axis(self):
        check_op(lambda ts: tape.tsum(ts[0], axis=1), [(3, 4, 2)], seed=14)

    def test_sum_keepdims(self):
        check_op(lambda ts: tape.tsum(ts[0], axis=-1, keepdims=True), [(3, 4)], seed=15)

    def test_mean(self):
        check_op(lambda ts: tape.tmean(ts[0], axis=0), [(5, 3)], seed=16)


class TestSoftmaxFamily:
    def test_log_softmax_grad(self):
        check_op(lambda ts: tape.log_softmax(ts[0]), [(3, 7)], seed=17)

    def test_softmax_grad(self):
        check_op(lambda ts: tape.softmax(ts[0]), [(3, 7)], seed=18)

    def test_log_softmax_normalizes(self):
        rng = np.random.default_rng(19)
        x = Tensor(rng.standard_normal((4, 9)))
        lp = tape.log_softmax(x)
        np.testing.assert_allclose(np.exp(lp.data).sum(axis=-1), 1.0, atol=1e-12)

    def test_normalize_grad(self):
        check_op(lambda ts: tape.normalize(ts[0]), [(3, 8)], seed=20)

    def test_normalize_moments(self):
        rng = np.random.default_rng(21)
        x = Tensor(rng.standard_normal((5, 16)) * 3 + 2)
        y = tape.normalize(x)
        np.testing.assert_allclose(y.data.mean(axis=-1), 0.0, atol=1e-7)
        np.testing.assert_allclose(y.data.std(axis=-1), 1.0, atol=1e-4)


class TestGatherOps:
    def test_embedding_grad_accumulates_repeats(self):
        table = Tensor(np.arange(12, dtype=np.float64).reshape(4, 3), requires_grad=True)
        ids = np.array([1, 1, 3])
        tape.tsum(tape.embedding(table, ids)).backward()
        expect = np.zeros((4, 3))
        expect[1] = 2.0  # looked up twice
        expect[3] = 1.0
        np.testing.assert_array_equal(table.grad, expect)

    def test_embedding_grad_fd(self):
        rng = np.random.default_rng(22)
        ids = rng.integers(0, 5, size=(3, 4))
        check_op(lambda ts: tape.embedding(ts[0], ids), [(5, 3)], seed=22)

    def test_take_along_last(self):
        rng = np.random.default_rng(23)
        idx = rng.integers(0, 6, size=(3, 4, 1))
        check_op(lambda ts: tape.take_along_last(ts[0], idx), [(3, 4, 6)], seed=23)

    def test_take_along_last_values(self):
        x = Tensor(np.arange(12, dtype=np.float64).reshape(3, 4))
        idx = np.array([[1], [0], [3]])
        out = tape.take_along_last(x, idx)
        np.testing.assert_array_equal(out.data.ravel(), [1.0, 4.0, 11.0])


class TestGraphMechanics:
    def test_diamond_reuse_accumulates(self):
        # y = x*x + x*x reuses x twice along two paths; dy/dx = 4x
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = tape.add(tape.mul(x, x), tape.mul(x, x))
        y.backward()
        np.testing.assert_allclose(x.grad, [12.0])

    def test_deep_chain_iterative(self):
        # deep graphs must not hit the recursion limit
        x = Tensor(np.array([1.0]), requires_grad=True)
        y = x
        for _ in range(5000):
            y = tape.mul(y, 1.0)
        tape.tsum(y).backward()
        np.testing.assert_allclose(x.grad, [1.0])

    def test_no_grad_through_constants(self):
        x = Tensor(np.ones(3))  # requires_grad False
        y = tape.mul(x, 2.0)
        assert not y.requires_grad
        assert y._backward is None

    def test_backward_accumulates_across_calls(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        tape.mul(x, 3.0).backward(np.array([1.0]))
        tape.mul(x, 3.0).backward(np.array([1.0]))
        np.testing.assert_allclose(x.grad, [6.0])

    def test_upstream_grad_shape_checked(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(tape.ShapeError):
            tape.mul(x, 2.0).backward(np.ones(3))

    def test_dtype_preserved(self):
        x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
        y = tape.relu(tape.matmul(x, x))
        assert y.dtype == np.float32
        y.backward()
        assert x.grad.dtype == np.float32


class TestModule:
    def test_named_parameters_walks_nesting(self):
        class Inner(tape.Module):
            def __init__(self):
                self.w = Parameter(np.ones((2, 2)))

        class Outer(tape.Module):
            def __init__(self):
                self.first = Inner()
                self.stack = [Inner(), Inner()]
                self.b = Parameter(np.zeros(2))

        m = Outer()
        names = list(m.named_parameters())
        assert names == ["first.w", "stack.0.w", "stack.1.w", "b"]

    def test_parameters_dedupes_shared(self):
        class Tied(tape.Module):
            def __init__(self):
                self.a = Parameter(np.ones(2))
                self.b = self.a

        assert len(Tied().parameters()) == 1

    def test_zero_grad(self):
        p = Parameter(np.ones(2))

        class M(tape.Module):
            def __init__(self):
                self.p = p

        tape.tsum(tape.mul(p, 2.0)).backward()
        assert p.grad is not None
        M().zero_grad()
        assert p.grad is None


class TestInit:
    def test_fan_in_bound(self):
        rng = np.random.default_rng(0)
        w = tape.uniform_fan_in(rng, (64, 32), np.float32)
        bound = 1.0 / np.sqrt(64)
        assert w.min() >= -bound and w.max() <= bound
        assert w.std() > bound / 4  # actually spread out, not collapsed

    def test_conv_weight_uses_full_receptive_field(self):
        rng = np.random.default_rng(0)
        w = tape.uniform_fan_in(rng, (2, 16, 16), np.float64)
        bound = 1.0 / np.sqrt(32)
        assert np.abs(w).max() <= bound

    def test_row_init_bound(self):
        rng = np.random.default_rng(0)
        e = tape.uniform_rows(rng, (1000, 25), np.float32)
        assert np.abs(e).max() <= 1.0 / 5.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_sum_to_inverts_broadcast(seed):
    """For any broadcastable pair, grad reduction restores operand shapes."""
    rng = np.random.default_rng(seed)
    base = [rng.integers(1, 4) for _ in range(3)]
    a_shape = tuple(1 if rng.random() < 0.4 else d for d in base)
    b_shape = tuple(1 if rng.random() < 0.4 else d for d in base[rng.integers(0, 2):])
    a = Tensor(rng.standard_normal(a_shape), requires_grad=True)
    b = Tensor(rng.standard_normal(b_shape), requires_grad=True)
    out = tape.add(a, b)
    out.backward(np.ones_like(out.data))
    assert a.grad.shape == a_shape
    assert b.grad.shape == b_shape
    # every broadcast copy contributes one unit of gradient
    assert a.grad.sum() == pytest.approx(out.data.size)
    assert b.grad.sum() == pytest.approx(out.data.size)
