"""Gradient correctness: every differentiable op against central differences."""

import numpy as np
import pytest

from ifusion.errors import ContractError
from ifusion import tensor as T

rng = np.random.default_rng(7)

H_STEP = 1e-5
TOL = 1e-4
TRIALS = 20


def fd_check(make_params, build):
    """Run grad_check on a freshly built op graph; assert it passes."""
    params = make_params()
    report = T.grad_check(lambda: build(params), params, h=H_STEP, tol=TOL)
    assert report.passed, report.summary()


def weighted(x, w):
    """Scalar readout with generic O(1) sensitivities."""
    return T.sum_all(T.mul(x, T.tensor(w)))


def P(name, shape):
    return T.Parameter(name, rng.uniform(-1, 1, shape))


class TestPerOpGradients:
    @pytest.mark.parametrize("trial", range(TRIALS))
    def test_matmul(self, trial):
        w = rng.uniform(-1, 1, (3, 4))
        fd_check(
            lambda: [P("a", (3, 5)), P("b", (5, 4))],
            lambda ps: weighted(T.matmul(ps[0].value, ps[1].value), w),
        )

    @pytest.mark.parametrize("trial", range(TRIALS))
    def test_matmul_batched(self, trial):
        w = rng.uniform(-1, 1, (2, 3, 4))
        fd_check(
            lambda: [P("a", (2, 3, 5)), P("b", (2, 5, 4))],
            lambda ps: weighted(T.matmul(ps[0].value, ps[1].value), w),
        )

    @pytest.mark.parametrize("trial", range(TRIALS))
    def test_softmax(self, trial):
        w = rng.uniform(-1, 1, (3, 5))
        fd_check(
            lambda: [P("x", (3, 5))],
            lambda ps: weighted(T.softmax_lastdim(ps[0].value), w),
        )

    @pytest.mark.parametrize("trial", range(TRIALS))
    def test_layer_norm(self, trial):
        w = rng.uniform(-1, 1, (3, 6))
        fd_check(
            lambda: [P("x", (3, 6)), P("g", (6,)), P("b", (6,))],
            lambda ps: weighted(T.layer_norm(ps[0].value, ps[1].value, ps[2].value), w),
        )

    @pytest.mark.parametrize("trial", range(TRIALS))
    def test_gelu(self, trial):
        w = rng.uniform(-1, 1, (4, 3))
        fd_check(
            lambda: [P("x", (4, 3))],
            lambda ps: weighted(T.gelu(ps[0].value), w),
        )

    @pytest.mark.parametrize("trial", range(TRIALS))
    def test_conv2d(self, trial):
        w = rng.uniform(-1, 1, (3, 3, 3))
        fd_check(
            lambda: [P("x", (2, 3, 3)), P("k", (3, 2, 3, 3)), P("b", (3,))],
            lambda ps: weighted(
                T.conv2d(ps[0].value, ps[1].value, ps[2].value, stride=1, padding=1), w
            ),
        )

    @pytest.mark.parametrize("trial", range(TRIALS))
    def test_conv2d_strided_batched(self, trial):
        w = rng.uniform(-1, 1, (2, 2, 3, 3))
        fd_check(
            lambda: [P("x", (2, 1, 5, 5)), P("k", (2, 1, 3, 3)), P("b", (2,))],
            lambda ps: weighted(
                T.conv2d(ps[0].value, ps[1].value, ps[2].value, stride=2, padding=1), w
            ),
        )

    @pytest.mark.parametrize("trial", range(TRIALS))
    def test_cross_entropy(self, trial):
        labels = rng.integers(0, 4, 5)
        fd_check(
            lambda: [P("logits", (5, 4))],
            lambda ps: T.cross_entropy(ps[0].value, labels),
        )

    @pytest.mark.parametrize("trial", range(TRIALS))
    def test_elementwise_and_structure(self, trial):
        w = rng.uniform(-1, 1, (8,))

        def build(ps):
            a, b, c = ps[0].value, ps[1].value, ps[2].value
            x = T.mul(T.add(a, b), T.sub(a, b))
            x = T.add_bias(T.scale(x, 0.7), c)
            x = T.concat([x, T.transpose(x, (1, 0))], axis=0)
            return weighted(T.reshape(x, (8,)), w)

        fd_check(lambda: [P("a", (2, 2)), P("b", (2, 2)), P("c", (2,))], build)

    @pytest.mark.parametrize("trial", range(TRIALS))
    def test_linear(self, trial):
        w = rng.uniform(-1, 1, (2, 3, 4))
        fd_check(
            lambda: [P("x", (2, 3, 5)), P("w", (5, 4)), P("b", (4,))],
            lambda ps: weighted(T.linear(ps[0].value, ps[1].value, ps[2].value), w),
        )

    @pytest.mark.parametrize("trial", range(TRIALS))
    def test_heads_split_merge(self, trial):
        w = rng.uniform(-1, 1, (2, 3, 8))

        def build(ps):
            split = T.heads_split(ps[0].value, 4)  # (2,4,3,2)
            return weighted(T.heads_merge(split), w)

        fd_check(lambda: [P("x", (2, 3, 8))], build)

    @pytest.mark.parametrize("trial", range(TRIALS))
    def test_slice_broadcast(self, trial):
        w = rng.uniform(-1, 1, (3, 1, 2))

        def build(ps):
            row = T.broadcast_leading(T.reshape(ps[0].value, (1, 4)), 3)  # (3,1,4)
            return weighted(T.slice_axis(row, 2, 1, 3), w)

        fd_check(lambda: [P("x", (4,))], build)


class TestBackwardContracts:
    def test_sum_gives_ones(self):
        p = P("p", (3, 2))
        with T.Graph() as g:
            loss = T.sum_all(p.value)
        T.backward(loss, g)
        np.testing.assert_array_equal(p.grad, np.ones((3, 2)))

    def test_half_square_gives_value(self):
        p = P("p", (4,))
        with T.Graph() as g:
            loss = T.scale(T.sum_all(T.mul(p.value, p.value)), 0.5)
        T.backward(loss, g)
        np.testing.assert_allclose(p.grad, p.value.array, atol=1e-15)

    def test_non_scalar_loss_rejected(self):
        p = P("p", (2,))
        with T.Graph() as g:
            out = T.scale(p.value, 2.0)
        with pytest.raises(ContractError):
            T.backward(out, g)

    def test_graph_single_use(self):
        p = P("p", (2,))
        with T.Graph() as g:
            loss = T.sum_all(p.value)
        T.backward(loss, g)
        with pytest.raises(ContractError):
            T.backward(loss, g)

    def test_grad_accumulates_across_consumers(self):
        p = P("p", (3,))
        with T.Graph() as g:
            loss = T.sum_all(T.add(p.value, p.value))
        T.backward(loss, g)
        np.testing.assert_array_equal(p.grad, np.full(3, 2.0))

    def test_no_recording_without_graph(self):
        p = P("p", (2, 2))
        out = T.matmul(p.value, p.value)
        assert out.requires_grad
        g = T.Graph()
        assert g.nodes == []


class TestGradCheck:
    def test_quadratic_example(self):
        p = T.Parameter("x", np.array([1.0, 2.0, 3.0]))
        report = T.grad_check(
            lambda: T.scale(T.sum_all(T.mul(p.value, p.value)), 0.5), [p], h=1e-5, tol=1e-4
        )
        assert report.passed
        np.testing.assert_allclose(report.entries[0].analytic, [1.0, 2.0, 3.0], atol=1e-15)
        np.testing.assert_allclose(report.entries[0].numeric, [1.0, 2.0, 3.0], atol=1e-9)

    def test_detects_nondeterminism(self):
        p = T.Parameter("x", np.ones(2))
        state = {"calls": 0}

        def f():
            state["calls"] += 1
            return T.scale(T.sum_all(p.value), float(state["calls"]))

        with pytest.raises(ContractError, match="non-deterministic"):
            T.grad_check(f, [p])

    def test_report_flags_bad_gradient(self):
        # sabotage: op with a wrong backward closure
        p = T.Parameter("x", rng.uniform(-1, 1, 3))

        def bad_op(x):
            def fn(g):
                return ((x, 2.0 * g),)

            return T._finish("bad", x.array.copy(), (x,), fn)

        report = T.grad_check(lambda: T.sum_all(bad_op(p.value)), [p])
        assert not report.passed
        assert "FAIL" in report.summary()
