import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedlop.nn_core import (MlpParams, MlpSpec, OptimizerState, ShapeError, cross_entropy,
                            finite_diff_gradient, flatten_params, mlp_backward, mlp_forward,
                            mlp_init, seeded_rng, sgd_momentum_step, softmax, unflatten_params)

layer_lists = st.lists(st.integers(1, 6), min_size=2, max_size=4)


def _loss_of(spec, x, dlog_weights):
    # a linear functional of the outputs, so dlogits is a constant matrix
    def f(p):
        _, out = mlp_forward(p, spec, x)
        return float((out * dlog_weights).sum())
    return f


class TestSpec:
    def test_rejects_short_or_empty(self):
        with pytest.raises(ValueError):
            MlpSpec((3,))
        with pytest.raises(ValueError):
            MlpSpec((3, 0, 2))
        with pytest.raises(ValueError):
            MlpSpec((3, 2), activation="tanh")

    def test_param_count(self):
        assert MlpSpec((12, 22, 11, 6)).n_params == 12 * 22 + 22 + 22 * 11 + 11 + 11 * 6 + 6


class TestInit:
    def test_zero_biases(self):
        p = mlp_init(MlpSpec((2, 2)), seeded_rng(123))
        assert all((b == 0.0).all() for b in p.biases)

    def test_xavier_bound(self):
        spec = MlpSpec((4, 3, 2))
        p = mlp_init(spec, seeded_rng(42))
        for w, (o, i) in zip(p.weights, spec.shapes):
            assert np.abs(w).max() <= math.sqrt(6.0 / (i + o))
        # the first layer's bound is sqrt(6/7)
        assert math.sqrt(6.0 / 7.0) == pytest.approx(0.9258, abs=1e-4)
        assert np.abs(p.weights[0]).max() <= 0.9258201

    def test_deterministic(self):
        spec = MlpSpec((5, 4, 3))
        a, b = mlp_init(spec, seeded_rng(7)), mlp_init(spec, seeded_rng(7))
        assert np.array_equal(flatten_params(a), flatten_params(b))


class TestForward:
    def test_zero_net(self):
        spec = MlpSpec((3, 4, 2))
        p = mlp_init(spec, seeded_rng(0)).zeros_like()
        _, out = mlp_forward(p, spec, np.array([[1.0, -2.0, 3.0]]))
        assert (out == 0).all()

    def test_identity(self):
        spec = MlpSpec((2, 2))
        p = MlpParams([np.eye(2)], [np.zeros(2)])
        _, out = mlp_forward(p, spec, np.array([1.0, -2.0]))
        assert out.tolist() == [[1.0, -2.0]]

    def test_hand_arithmetic(self):
        spec = MlpSpec((2, 2, 1))
        p = MlpParams([np.ones((2, 2)), np.ones((1, 2))], [np.zeros(2), np.zeros(1)])
        trace, out = mlp_forward(p, spec, np.array([[1.0, 1.0]]))
        assert trace.pre[0].tolist() == [[2.0, 2.0]]
        assert out.tolist() == [[4.0]]

    def test_shape_mismatch(self):
        spec = MlpSpec((3, 2))
        with pytest.raises(ShapeError):
            mlp_forward(mlp_init(spec, seeded_rng(0)), spec, np.zeros((1, 4)))


class TestSoftmaxCE:
    def test_uniform(self):
        np.testing.assert_allclose(softmax(np.zeros(3)), [1 / 3] * 3, atol=1e-15)

    def test_no_overflow(self):
        p = softmax(np.array([1000.0, 0.0]))
        assert np.isfinite(p).all() and p[0] == pytest.approx(1.0) and p[1] < 1e-300

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-100, 100))
    def test_shift_invariance_and_sum(self, logits, c):
        z = np.array(logits)
        p = softmax(z)
        assert abs(p.sum() - 1.0) < 1e-12
        np.testing.assert_allclose(softmax(z + c), p, atol=1e-12)

    def test_ce_examples(self):
        assert cross_entropy(np.array([0.0, 1.0, 0.0]), 1)[0] == 0.0
        assert cross_entropy(np.full(5, 0.2), 3)[0] == pytest.approx(math.log(5), abs=1e-12)
        _, d = cross_entropy(np.array([0.5, 0.5]), 0)
        assert d.tolist() == [-0.5, 0.5]

    def test_ce_bad_target(self):
        with pytest.raises(ValueError):
            cross_entropy(np.full(5, 0.2), 5)
        with pytest.raises(ValueError):
            cross_entropy(np.full(5, 0.2), -1)

    def test_ce_floor(self):
        loss, _ = cross_entropy(np.array([1.0, 0.0]), 1)
        assert loss == pytest.approx(-math.log(1e-12))


class TestBackward:
    def test_zero_upstream(self):
        spec = MlpSpec((3, 4, 2))
        p = mlp_init(spec, seeded_rng(1))
        trace, out = mlp_forward(p, spec, np.ones((2, 3)))
        g, dx = mlp_backward(p, spec, trace, np.zeros_like(out))
        assert not flatten_params(g).any() and not dx.any()

    def test_sum_reduction(self):
        spec = MlpSpec((3, 4, 2))
        p = mlp_init(spec, seeded_rng(2))
        x = np.array([[0.3, -0.2, 0.9]])
        d = np.array([[0.4, -0.4]])
        g1, _ = mlp_backward(p, spec, mlp_forward(p, spec, x)[0], d)
        g2, _ = mlp_backward(p, spec, mlp_forward(p, spec, np.vstack([x, x]))[0], np.vstack([d, d]))
        np.testing.assert_allclose(flatten_params(g2), 2 * flatten_params(g1), rtol=1e-14)

    def test_trace_mismatch(self):
        a, b = MlpSpec((3, 2)), MlpSpec((3, 4, 2))
        pa, pb = mlp_init(a, seeded_rng(0)), mlp_init(b, seeded_rng(0))
        trace, out = mlp_forward(pb, b, np.ones((1, 3)))
        with pytest.raises(ShapeError):
            mlp_backward(pa, a, trace, out)

    @settings(max_examples=40, deadline=None)
    @given(layer_lists, st.integers(0, 2**31 - 1))
    def test_matches_finite_differences(self, sizes, seed):
        spec = MlpSpec(tuple(sizes))
        rng = seeded_rng(seed)
        p = mlp_init(spec, rng)
        p = MlpParams(p.weights, [rng.normal(0, 0.1, b.shape) for b in p.biases])
        x = rng.normal(size=(3, spec.n_in))
        w = rng.normal(size=(3, spec.n_out))
        trace, _ = mlp_forward(p, spec, x)
        g, _ = mlp_backward(p, spec, trace, w)
        fd = finite_diff_gradient(_loss_of(spec, x, w), p, spec=spec)
        a, b = flatten_params(g), flatten_params(fd)
        # kinks of the ReLU are measure zero; the floor absorbs rounding on tiny entries
        rel = np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-3)
        assert rel.max() < 1e-5

    def test_input_gradient(self):
        spec = MlpSpec((4, 5, 3))
        rng = seeded_rng(11)
        p = mlp_init(spec, rng)
        x = rng.normal(size=(1, 4))
        w = rng.normal(size=(1, 3))
        _, dx = mlp_backward(p, spec, mlp_forward(p, spec, x)[0], w)
        f = lambda v: float((mlp_forward(p, spec, v.reshape(1, 4))[1] * w).sum())
        np.testing.assert_allclose(dx.ravel(), finite_diff_gradient(f, x.ravel()), atol=1e-8)


class TestSgd:
    def _one(self, w, g, v, lr, mu):
        spec = MlpSpec((1, 1))
        p = MlpParams([np.array([[w]])], [np.array([0.0])])
        gr = MlpParams([np.array([[g]])], [np.array([0.0])])
        st_ = OptimizerState(MlpParams([np.array([[v]])], [np.array([0.0])]), lr, mu)
        p2, s2 = sgd_momentum_step(p, gr, st_)
        p.check(spec)
        return p2.weights[0][0, 0], s2.velocity.weights[0][0, 0]

    def test_plain_step(self):
        w, _ = self._one(1.0, 0.5, 0.0, 0.01, 0.0)
        assert w == pytest.approx(0.995, abs=1e-15)

    def test_momentum_step(self):
        w, v = self._one(1.0, 0.5, 0.0, 0.01, 0.5)
        assert v == 0.5 and w == pytest.approx(0.995, abs=1e-15)

    def test_momentum_accumulates(self):
        _, v = self._one(1.0, 0.5, 2.0, 0.01, 0.5)
        assert v == 1.5

    def test_fixed_point(self):
        w, v = self._one(0.7, 0.0, 0.0, 0.01, 0.5)
        assert w == 0.7 and v == 0.0

    def test_validation(self):
        p = MlpParams([np.zeros((1, 1))], [np.zeros(1)])
        with pytest.raises(ValueError):
            OptimizerState.fresh(p, momentum=1.0)
        with pytest.raises(ValueError):
            OptimizerState.fresh(p, learning_rate=-1.0)


class TestFlatten:
    def test_order(self):
        p = MlpParams([np.array([[2.0]])], [np.array([3.0])])
        assert flatten_params(p).tolist() == [2.0, 3.0]
        p = MlpParams([np.array([[1.0, 2.0]])], [np.array([5.0])])
        assert flatten_params(p).tolist() == [1.0, 2.0, 5.0]

    def test_row_major(self):
        spec = MlpSpec((2, 2))
        p = unflatten_params(np.arange(6.0), spec)
        assert p.weights[0].tolist() == [[0.0, 1.0], [2.0, 3.0]]
        assert p.biases[0].tolist() == [4.0, 5.0]

    @given(layer_lists, st.integers(0, 2**31 - 1))
    def test_round_trip(self, sizes, seed):
        spec = MlpSpec(tuple(sizes))
        v = seeded_rng(seed).normal(size=spec.n_params)
        back = flatten_params(unflatten_params(v, spec))
        assert back.tobytes() == v.tobytes()

    def test_wrong_length(self):
        with pytest.raises(ShapeError):
            unflatten_params(np.zeros(5), MlpSpec((2, 2)))


class TestFiniteDiff:
    def test_square(self):
        g = finite_diff_gradient(lambda w: float(w[0] ** 2), np.array([3.0]))
        assert abs(g[0] - 6.0) < 1e-6

    def test_constant_and_linear(self):
        w = np.array([0.5, -1.5, 4.0])
        assert np.abs(finite_diff_gradient(lambda v: 7.0, w)).max() < 1e-9
        np.testing.assert_allclose(finite_diff_gradient(lambda v: float(v.sum()), w), 1.0, atol=1e-9)

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            finite_diff_gradient(lambda v: 0.0, np.zeros(1), eps=0.0)


def test_training_is_deterministic():
    spec = MlpSpec((3, 4, 5))

    def train(seed):
        rng = seeded_rng(seed)
        p = mlp_init(spec, rng)
        state = OptimizerState.fresh(p, 0.05, 0.5)
        x, y = rng.normal(size=(8, 3)), rng.integers(0, 5, 8)
        for _ in range(20):
            trace, out = mlp_forward(p, spec, x)
            _, d = cross_entropy(softmax(out), y)
            g, _ = mlp_backward(p, spec, trace, d)
            p, state = sgd_momentum_step(p, g, state)
        return flatten_params(p)

    assert train(5).tobytes() == train(5).tobytes()
