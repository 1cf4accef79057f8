"""Tape engine: per-op chain rule vs finite differences, Adam behavior."""

import numpy as np
import pytest

from sdfseg import autodiff as ad
from sdfseg.autodiff import AdamState, ContractError, ParamStore, Tape, adam_step

from helpers import assert_grad_close, finite_diff


def scalar_through(op_builder, x0, n_points=10, seed=0, rtol=1e-5):
    """Check d(sum(op(x)))/dx against central differences at random points."""
    rng = np.random.default_rng(seed)
    for _ in range(n_points):
        x = x0 + rng.normal(0.0, 0.3, size=np.shape(x0))

        def run(arr):
            tape = Tape()
            leaf = tape.leaf(arr)
            out = ad.sum_all(tape, op_builder(tape, leaf))
            return tape, leaf, out

        tape, leaf, out = run(x)
        tape.backward(out)
        numeric = finite_diff(lambda a: float(run(a)[2].value), x, eps=1e-5)
        assert_grad_close(leaf.grad, numeric, rtol=rtol)


class TestPrimitiveGradients:
    x0 = np.linspace(-1.2, 1.4, 12).reshape(4, 3)

    def test_sigmoid(self):
        scalar_through(lambda t, x: ad.sigmoid(t, x), self.x0)

    def test_softplus(self):
        scalar_through(lambda t, x: ad.softplus(t, x, 3.0), self.x0)

    def test_exp(self):
        scalar_through(lambda t, x: ad.exp(t, x), self.x0)

    def test_abs(self):
        # stay away from the kink at 0
        scalar_through(lambda t, x: ad.absolute(t, x), self.x0 + 3.0)

    def test_sqrt(self):
        scalar_through(lambda t, x: ad.sqrt(t, x), self.x0 + 3.0)

    def test_log(self):
        scalar_through(lambda t, x: ad.log(t, x), self.x0 + 3.0)

    def test_mul_div(self):
        scalar_through(lambda t, x: ad.div(t, ad.mul(t, x, x),
                                           ad.add_const(t, x, 5.0)), self.x0)

    def test_affine(self):
        rng = np.random.default_rng(1)
        w = rng.normal(size=(3, 5))
        b = rng.normal(size=5)

        def build(t, x):
            return ad.affine(t, x, t.leaf(w), t.leaf(b))

        scalar_through(build, self.x0)

    def test_concat_cols_slice(self):
        def build(t, x):
            y = ad.concat_cols(t, [x, ad.scale(t, x, 2.0)])
            return ad.cols(t, y, 2, 5)

        scalar_through(build, self.x0)

    def test_rows_scatter_gather(self):
        idx = np.array([2, 0, 1, 1])

        def build(t, x):
            g = ad.gather_rows(t, x, idx)
            return ad.scatter_rows(t, ad.rows(t, g, 0, 3), np.array([1, 3, 0]), 5)

        scalar_through(build, self.x0)

    def test_segment_sum(self):
        ids = np.array([0, 0, 1, 2])
        scalar_through(lambda t, x: ad.mul(
            t, ad.segment_sum(t, x, ids, 3),
            ad.segment_sum(t, x, ids, 3)), self.x0)

    def test_segment_excl_cumprod(self):
        starts = np.array([0, 3])
        x0 = np.abs(self.x0[:, :1]) + 0.3
        scalar_through(lambda t, x: ad.segment_excl_cumprod(t, x, starts), x0)

    def test_maximum_minimum_clip(self):
        scalar_through(lambda t, x: ad.maximum_const(t, x, 0.1), self.x0 + 5.0)
        scalar_through(lambda t, x: ad.minimum_const(t, x, 0.1), self.x0 + 5.0)
        scalar_through(lambda t, x: ad.clip(t, x, -10.0, 10.0), self.x0)

    def test_where_const(self):
        mask = np.tile(np.array([[True], [False], [True], [False]]), (1, 3))
        scalar_through(lambda t, x: ad.where_const(t, mask, 2.5, x), self.x0)


class TestBackwardContract:
    def test_linear_root(self):
        # root = sum(w * x) with x constant: grad_w = x
        x = np.array([[1.0, 2.0, -3.0]])
        tape = Tape()
        w = tape.leaf(np.array([[0.5, 0.1, 0.2]]), name="w")
        out = ad.sum_all(tape, ad.mul(tape, w, tape.constant(x)))
        params = ParamStore()
        params.add("w", w.value)
        grads = tape.backward(out, params)
        np.testing.assert_allclose(grads["w"], x)

    def test_sigmoid_at_zero(self):
        tape = Tape()
        z = tape.leaf(np.zeros((1, 1)))
        out = ad.sum_all(tape, ad.sigmoid(tape, z))
        tape.backward(out)
        np.testing.assert_allclose(z.grad, 0.25)

    def test_non_scalar_root_rejected(self):
        tape = Tape()
        x = tape.leaf(np.ones((2, 2)))
        with pytest.raises(ContractError):
            tape.backward(x)

    def test_unreached_params_zero(self):
        params = ParamStore()
        params.add("used", np.ones(3))
        params.add("unused", np.ones(4))
        tape = Tape()
        used = tape.leaf(params["used"], name="used")
        tape.leaf(params["unused"], name="unused")
        out = ad.sum_all(tape, ad.mul(tape, used, used))
        grads = tape.backward(out, params)
        np.testing.assert_allclose(grads["unused"], 0.0)
        np.testing.assert_allclose(grads["used"], 2.0 * params["used"])

    def test_two_layer_mlp_matches_fd(self):
        # random 2-layer MLP over 50 random inputs
        rng = np.random.default_rng(7)
        w1 = rng.normal(size=(4, 8))
        b1 = rng.normal(size=8)
        w2 = rng.normal(size=(8, 1))
        x = rng.normal(size=(50, 4))
        flat = np.concatenate([w1.ravel(), b1, w2.ravel()])

        def loss(theta):
            a = theta[:32].reshape(4, 8)
            c = theta[32:40]
            d = theta[40:].reshape(8, 1)
            h = 1.0 / (1.0 + np.exp(-(x @ a + c)))
            return float((h @ d).sum())

        tape = Tape()
        n_w1 = tape.leaf(w1)
        n_b1 = tape.leaf(b1)
        n_w2 = tape.leaf(w2)
        h = ad.sigmoid(tape, ad.affine(tape, tape.constant(x), n_w1, n_b1))
        out = ad.sum_all(tape, ad.affine(tape, h, n_w2))
        tape.backward(out)
        analytic = np.concatenate([n_w1.grad.ravel(), n_b1.grad, n_w2.grad.ravel()])
        numeric = finite_diff(loss, flat, eps=1e-5)
        assert_grad_close(analytic, numeric, rtol=1e-4)

    def test_linearity_of_backward(self):
        # grad(a*L1 + b*L2) == a*grad(L1) + b*grad(L2)
        rng = np.random.default_rng(3)
        x0 = rng.normal(size=(5, 2))

        def grads_of(build):
            tape = Tape()
            x = tape.leaf(x0)
            tape.backward(build(tape, x))
            return x.grad

        g1 = grads_of(lambda t, x: ad.sum_all(t, ad.sigmoid(t, x)))
        g2 = grads_of(lambda t, x: ad.sum_all(t, ad.mul(t, x, x)))
        combo = grads_of(lambda t, x: ad.add(
            t, ad.scale(t, ad.sum_all(t, ad.sigmoid(t, x)), 2.0),
            ad.scale(t, ad.sum_all(t, ad.mul(t, x, x)), -0.7)))
        np.testing.assert_allclose(combo, 2.0 * g1 - 0.7 * g2, atol=1e-9)


class TestAdam:
    def _store(self, value):
        params = ParamStore()
        params.add("p", np.array(value, dtype=np.float64))
        return params

    def test_first_step_magnitude(self):
        # t=1, zero state: update ~= -lr * sign(g)
        params = self._store([2.0, -1.0, 0.5])
        state = AdamState(params)
        g = np.array([0.3, -20.0, 1e-6])
        before = params["p"].copy()
        adam_step(params, {"p": g}, state, lr=0.01, t=1)
        step = before - params["p"]
        np.testing.assert_allclose(np.abs(step), 0.01, rtol=1e-6)
        np.testing.assert_allclose(np.sign(step), np.sign(g))

    def test_zero_gradient_no_move(self):
        params = self._store([1.0, 2.0])
        state = AdamState(params)
        adam_step(params, {"p": np.zeros(2)}, state, lr=0.01, t=1)
        np.testing.assert_allclose(params["p"], [1.0, 2.0])

    def test_determinism(self):
        runs = []
        for _ in range(2):
            rng = np.random.default_rng(11)
            params = self._store(rng.normal(size=6))
            state = AdamState(params)
            for t in range(1, 20):
                adam_step(params, {"p": rng.normal(size=6)}, state, lr=0.01, t=t)
            runs.append(params["p"].copy())
        np.testing.assert_array_equal(runs[0], runs[1])

    def test_shape_mismatch(self):
        params = self._store([1.0, 2.0])
        state = AdamState(params)
        with pytest.raises(ContractError):
            adam_step(params, {"p": np.zeros(3)}, state, lr=0.01, t=1)

    def test_clip_global_norm(self):
        grads = {"a": np.array([3.0, 4.0]), "b": np.array([0.0])}
        norm = ad.clip_global_norm(grads, 1.0)
        assert norm == pytest.approx(5.0)
        total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        assert total == pytest.approx(1.0)
