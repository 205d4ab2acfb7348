"""Numerics core: primitives, tape, gradient oracle, optimizer."""

import numpy as np
import pytest

from kernelicl import autodiff as ad
from kernelicl.autodiff import Tape, Tensor, backward, finite_difference_grad, max_relative_error
from kernelicl.errors import ContractViolation
from kernelicl.optim import AdamState, adam_step


def leaf(data, rg=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=rg)


class TestMatmul:
    def test_identity(self):
        a = np.arange(4.0).reshape(2, 2)
        out = ad.matmul(leaf(np.eye(2)), leaf(a))
        np.testing.assert_array_equal(out.data, a)

    def test_hand_case(self):
        out = ad.matmul(leaf([[1.0, 2.0], [3.0, 4.0]]), leaf([[0.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[2.0], [4.0]])

    def test_dim_mismatch(self):
        with pytest.raises(ContractViolation):
            ad.matmul(leaf(np.ones((2, 3))), leaf(np.ones((2, 3))))

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(0)
        a0 = rng.standard_normal((3, 4))
        b0 = rng.standard_normal((4, 2))
        a, b = leaf(a0), leaf(b0)
        with Tape() as tape:
            loss = ad.reduce_sum(ad.matmul(a, b))
        ga, gb = backward(tape, loss, [a, b])

        def f_a(x):
            return float((x @ b0).sum())

        def f_b(x):
            return float((a0 @ x).sum())

        assert max_relative_error(ga, finite_difference_grad(f_a, a0)) < 1e-6
        assert max_relative_error(gb, finite_difference_grad(f_b, b0)) < 1e-6

    def test_row_determinism_with_duplicates(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((37, 16))
        a[30] = a[4]
        b = rng.standard_normal((16, 24))
        out = ad.matmul_raw(a, b)
        assert np.array_equal(out[30], out[4])
        # same rows in a smaller call give the same values
        assert np.array_equal(ad.matmul_raw(a[:10], b), out[:10])


class TestSoftmax:
    def test_symmetry(self):
        out = ad.softmax(leaf([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_no_overflow(self):
        out = ad.softmax(leaf([1000.0, 0.0]))
        assert np.all(np.isfinite(out.data))
        assert out.data[0] > 1.0 - 1e-12

    def test_analytic(self):
        out = ad.softmax(leaf([np.log(1.0), np.log(3.0)]))
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-15)

    def test_probability_vector(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            logits = rng.standard_normal((int(rng.integers(1, 6)), int(rng.integers(1, 9))))
            out = ad.softmax(leaf(logits)).data
            assert out.min() >= 0.0
            np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        logits = rng.standard_normal(7)
        a = ad.softmax(leaf(logits)).data
        b = ad.softmax(leaf(logits + 123.456)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_order_preserving(self):
        logits = np.array([0.3, -1.0, 2.0, 0.9])
        out = ad.softmax(leaf(logits)).data
        assert np.array_equal(np.argsort(out), np.argsort(logits))

    def test_empty_axis_rejected(self):
        with pytest.raises(ContractViolation):
            ad.softmax(leaf(np.zeros((3, 0))))


class TestBackward:
    def test_linear_loss_structure(self):
        rng = np.random.default_rng(4)
        w0 = rng.standard_normal((3, 4))
        x0 = rng.standard_normal((4, 2))
        w = leaf(w0)
        with Tape() as tape:
            loss = ad.reduce_sum(ad.matmul(w, leaf(x0, rg=False)))
        (gw,) = backward(tape, loss, [w])

        def f(wv):
            return float((wv @ x0).sum())

        assert max_relative_error(gw, finite_difference_grad(f, w0)) < 1e-6

    def test_unused_parameter_zero_gradient(self):
        used, unused = leaf([1.0, 2.0]), leaf([[5.0]])
        with Tape() as tape:
            loss = ad.reduce_sum(ad.exp(used))
        g_used, g_unused = backward(tape, loss, [used, unused])
        assert np.any(g_used != 0.0)
        np.testing.assert_array_equal(g_unused, np.zeros((1, 1)))

    def test_repeat_backward_identical(self):
        rng = np.random.default_rng(5)
        a = leaf(rng.standard_normal((3, 3)))
        with Tape() as tape:
            loss = ad.reduce_sum(ad.softmax(ad.matmul(a, a)))
        g1 = backward(tape, loss, [a])[0]
        g2 = backward(tape, loss, [a])[0]
        assert np.array_equal(g1, g2)

    def test_non_scalar_loss_rejected(self):
        a = leaf([1.0, 2.0])
        with Tape() as tape:
            out = ad.exp(a)
        with pytest.raises(ContractViolation):
            backward(tape, out, [a])


class TestFiniteDifferences:
    def test_square(self):
        grad = finite_difference_grad(lambda x: float(x[0] ** 2), np.array([3.0]))
        assert abs(grad[0] - 6.0) < 1e-6

    def test_constant(self):
        grad = finite_difference_grad(lambda x: 7.0, np.zeros(5))
        np.testing.assert_array_equal(grad, np.zeros(5))

    def test_exp_sum(self):
        grad = finite_difference_grad(lambda x: float(np.exp(x).sum()), np.zeros(4))
        np.testing.assert_allclose(grad, np.ones(4), atol=1e-6)

    def test_bad_eps(self):
        with pytest.raises(ContractViolation):
            finite_difference_grad(lambda x: 0.0, np.zeros(2), eps=0.0)

    def test_non_finite_reports_coordinate(self):
        def f(x):
            return float("nan") if x[1] != 0.0 else 0.0

        with pytest.raises(ContractViolation, match="coordinate 1"):
            finite_difference_grad(f, np.zeros(3))


class TestAdam:
    def test_zero_gradient_fresh_state(self):
        p = leaf([1.0, -2.0])
        state = AdamState.for_params([p])
        before = p.data.copy()
        adam_step(state, [p], [np.zeros(2)])
        np.testing.assert_array_equal(p.data, before)
        assert state.step == 1

    def test_first_step_magnitude(self):
        p = leaf([1.0, -1.0, 0.5])
        g = np.array([0.3, -2.0, 1e-4])
        state = AdamState.for_params([p], lr=0.01)
        before = p.data.copy()
        adam_step(state, [p], [g])
        step = before - p.data
        np.testing.assert_allclose(step, 0.01 * np.sign(g), rtol=1e-3)

    def test_converges_on_quadratic(self):
        p = leaf([5.0])
        state = AdamState.for_params([p], lr=0.1)
        for _ in range(200):
            adam_step(state, [p], [2.0 * p.data])
        assert abs(p.data[0]) < 0.5

    def test_dim_mismatch(self):
        p = leaf([1.0, 2.0])
        state = AdamState.for_params([p])
        with pytest.raises(ContractViolation):
            adam_step(state, [p], [np.zeros(3)])


def _gradcheck_unary(op, shape, rng, positive=False, **kwargs):
    x0 = rng.standard_normal(shape)
    if positive:
        x0 = np.abs(x0) + 0.5
    x = leaf(x0)
    with Tape() as tape:
        loss = ad.reduce_sum(op(x, **kwargs))
    (g,) = backward(tape, loss, [x])

    def f(v):
        return float(op(Tensor(v), **kwargs).data.sum())

    return max_relative_error(g, finite_difference_grad(f, x0))


class TestPrimitiveGradients:
    """Every differentiable primitive against the central-difference oracle."""

    def test_unary_primitives(self):
        rng = np.random.default_rng(6)
        cases = [
            (ad.exp, {}, False),
            (ad.log, {}, True),
            (ad.relu, {}, False),
            (lambda x: ad.scale(x, -2.5), {}, False),
            (ad.softmax, {}, False),
            (lambda x: ad.reduce_mean(x, axis=0), {}, False),
            (lambda x: ad.reduce_sum(x, axis=1, keepdims=True), {}, False),
            (lambda x: ad.reshape(x, (-1,)), {}, False),
            (lambda x: ad.transpose(x, (1, 0)), {}, False),
            (lambda x: ad.slice_rows(x, 1, 3), {}, False),
            (lambda x: ad.clip(x, -0.5, 0.5), {}, False),
            (ad.normalize_rows, {}, False),
            (lambda x: ad.expand_batch(x, 3), {}, False),
            (lambda x: ad.gather_rows(x, np.array([2, 0, 2])), {}, False),
        ]
        for op, kwargs, positive in cases:
            for _ in range(3):
                shape = (int(rng.integers(3, 8)), int(rng.integers(2, 8)))
                err = _gradcheck_unary(op, shape, rng, positive=positive, **kwargs)
                assert err < 1e-4, f"{op} gradient off by {err}"

    def test_binary_primitives(self):
        rng = np.random.default_rng(7)
        for op in (ad.add, ad.sub, ad.mul):
            a0 = rng.standard_normal((4, 5))
            b0 = rng.standard_normal(5)  # broadcast path
            a, b = leaf(a0), leaf(b0)
            with Tape() as tape:
                loss = ad.reduce_sum(op(a, b))
            ga, gb = backward(tape, loss, [a, b])
            fa = finite_difference_grad(lambda v: float(op(Tensor(v), Tensor(b0)).data.sum()), a0)
            fb = finite_difference_grad(lambda v: float(op(Tensor(a0), Tensor(v)).data.sum()), b0)
            assert max_relative_error(ga, fa) < 1e-4
            assert max_relative_error(gb, fb) < 1e-4

    def test_layer_norm_gradients(self):
        rng = np.random.default_rng(8)
        x0 = rng.standard_normal((3, 6))
        g0 = rng.standard_normal(6)
        b0 = rng.standard_normal(6)
        x, g, b = leaf(x0), leaf(g0), leaf(b0)
        with Tape() as tape:
            loss = ad.reduce_sum(ad.mul(ad.layer_norm(x, g, b), leaf(x0 * 0.3, rg=False)))
        gx, gg, gb = backward(tape, loss, [x, g, b])
        weight = x0 * 0.3

        def run(xv, gv, bv):
            return float((ad.layer_norm(Tensor(xv), Tensor(gv), Tensor(bv)).data * weight).sum())

        assert max_relative_error(gx, finite_difference_grad(lambda v: run(v, g0, b0), x0)) < 1e-4
        assert max_relative_error(gg, finite_difference_grad(lambda v: run(x0, v, b0), g0)) < 1e-4
        assert max_relative_error(gb, finite_difference_grad(lambda v: run(x0, g0, v), b0)) < 1e-4

    def test_sqdist_gradients(self):
        rng = np.random.default_rng(9)
        q0 = rng.standard_normal((3, 4))
        k0 = rng.standard_normal((5, 4))
        q, k = leaf(q0), leaf(k0)
        with Tape() as tape:
            loss = ad.reduce_sum(ad.softmax(ad.scale(ad.sqdist(q, k), -0.7)))
        gq, gk = backward(tape, loss, [q, k])

        def run(qv, kv):
            s = ad.softmax(ad.scale(ad.sqdist(Tensor(qv), Tensor(kv)), -0.7))
            return float(s.data.sum())

        assert max_relative_error(gq, finite_difference_grad(lambda v: run(v, k0), q0)) < 1e-4
        assert max_relative_error(gk, finite_difference_grad(lambda v: run(q0, v), k0)) < 1e-4

    def test_masked_softmax_gradients_and_zeros(self):
        rng = np.random.default_rng(10)
        x0 = rng.standard_normal((4, 6))
        allowed = np.zeros(6, dtype=bool)
        allowed[:4] = True
        x = leaf(x0)
        with Tape() as tape:
            out = ad.masked_softmax(x, allowed)
            loss = ad.reduce_sum(ad.mul(out, leaf(rng.standard_normal((4, 6)), rg=False)))
        assert np.all(out.data[:, 4:] == 0.0)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)
        (gx,) = backward(tape, loss, [x])
        assert np.all(gx[:, 4:] == 0.0)
        with pytest.raises(ContractViolation):
            ad.masked_softmax(leaf(np.zeros((2, 3))), np.zeros(3, dtype=bool))

    def test_take_per_row_and_concat(self):
        rng = np.random.default_rng(11)
        a0 = rng.standard_normal((4, 3))
        b0 = rng.standard_normal((2, 3))
        idx = np.array([0, 2, 1, 0, 2, 1])
        a, b = leaf(a0), leaf(b0)
        with Tape() as tape:
            loss = ad.reduce_sum(ad.take_per_row(ad.concat_rows(a, b), idx))
        ga, gb = backward(tape, loss, [a, b])

        def run(av, bv):
            stacked = np.concatenate([av, bv], axis=0)
            return float(stacked[np.arange(6), idx].sum())

        assert max_relative_error(ga, finite_difference_grad(lambda v: run(v, b0), a0)) < 1e-4
        assert max_relative_error(gb, finite_difference_grad(lambda v: run(a0, v), b0)) < 1e-4


class TestDeterminism:
    def test_repeat_forward_identical(self):
        rng = np.random.default_rng(12)
        a0 = rng.standard_normal((6, 6))
        first = ad.softmax(ad.matmul(Tensor(a0), Tensor(a0))).data
        second = ad.softmax(ad.matmul(Tensor(a0), Tensor(a0))).data
        assert np.array_equal(first, second)

    def test_non_finite_construction_rejected(self):
        with pytest.raises(ContractViolation):
            Tensor(np.array([1.0, np.inf]))


class TestConcurrentTapes:
    def test_independent_tapes_on_threads(self):
        import threading

        rng = np.random.default_rng(13)
        inputs = [rng.standard_normal((4, 4)) for _ in range(4)]
        expected = []
        for x0 in inputs:
            x = leaf(x0)
            with Tape() as tape:
                loss = ad.reduce_sum(ad.softmax(ad.matmul(x, x)))
            expected.append(backward(tape, loss, [x])[0])

        results = [None] * 4

        def work(i):
            x = leaf(inputs[i])
            with Tape() as tape:
                loss = ad.reduce_sum(ad.softmax(ad.matmul(x, x)))
            results[i] = backward(tape, loss, [x])[0]

        threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for got, want in zip(results, expected):
            assert np.array_equal(got, want)
