"""Derivative engine checks against closed forms and finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from krflow.autodiff import (
    DualScalar,
    Jet,
    NonFiniteError,
    Tape,
    divergence,
    engine,
    fd_grad,
    fd_second,
    grad_params,
    spatial_derivs,
)


def scalar_grad(f, x0: float) -> float:
    """d f / d theta for a scalar-to-scalar chain built from engine ops."""
    tape = Tape()
    th = engine.leaf(tape, np.array([x0]))
    out = f(th)
    tape.backward(engine.sum_base(out))
    return float(th.grad[0, 0])


class TestClosedForms:
    def test_square_grad(self):
        # d/dx x^2 = 2x
        assert scalar_grad(engine.square, 3.0) == pytest.approx(6.0, abs=1e-12)

    def test_bounded_scale_grad_at_zero(self):
        # d/ds log(1 + a tanh s) at s=0 is exactly a
        g = scalar_grad(lambda s: engine.log(1.0 + 0.6 * engine.tanh(s)), 0.0)
        assert g == pytest.approx(0.6, abs=1e-12)

    def test_monomial_mixed_second(self):
        # f = x0^2 x1 at (2, 3): f=12, df/dx0=12, d2f/dx0 dx1=4
        def f(xv):
            return engine.sum_base(
                engine.mul(engine.square(engine.narrow(xv, 0, 1)), engine.narrow(xv, 1, 2)),
                axis=-1,
            )

        val, first, second = spatial_derivs(f, np.array([[2.0, 3.0]]), 0, 1)
        assert val.v[0] == pytest.approx(12.0, abs=1e-12)
        assert first.v[0] == pytest.approx(12.0, abs=1e-12)
        assert second.v[0] == pytest.approx(4.0, abs=1e-12)

    def test_normal_log_density_derivs(self):
        # log phi(x) = -x^2/2 - log(2 pi)/2: derivs at 0 are (0, -1)
        def f(xv):
            q = engine.sum_base(engine.square(xv), axis=-1)
            return -0.5 * q - 0.5 * np.log(2.0 * np.pi)

        val, first, second = spatial_derivs(f, np.array([[0.0]]), 0, 0)
        assert val.v[0] == pytest.approx(-0.5 * np.log(2.0 * np.pi), abs=1e-14)
        assert first.v[0] == pytest.approx(0.0, abs=1e-14)
        assert second.v[0] == pytest.approx(-1.0, abs=1e-14)


UNARIES = {
    "tanh": (engine.tanh, np.tanh, (-3.0, 3.0)),
    "exp": (engine.exp, np.exp, (-2.0, 2.0)),
    "log": (engine.log, np.log, (0.1, 5.0)),
    "log_abs": (engine.log_abs, lambda x: np.log(np.abs(x)), (-5.0, -0.1)),
    "square": (engine.square, np.square, (-3.0, 3.0)),
    "reciprocal": (engine.reciprocal, lambda x: 1.0 / x, (0.2, 4.0)),
    "relu": (engine.relu, lambda x: np.maximum(x, 0.0), (0.3, 3.0)),
    "softplus": (engine.softplus, lambda x: np.logaddexp(0.0, x), (-3.0, 3.0)),
}


@pytest.mark.parametrize("name", sorted(UNARIES))
def test_unary_param_grad_matches_fd(name):
    op, ref, (lo, hi) = UNARIES[name]
    rng = np.random.default_rng(7)
    x0 = rng.uniform(lo, hi, size=5)

    tape = Tape()
    xv = engine.leaf(tape, x0)
    tape.backward(engine.sum_base(op(xv)))
    fd = fd_grad(lambda v: np.sum(ref(v)), x0)
    assert np.abs(xv.grad[0] - fd).max() < 1e-7


@pytest.mark.parametrize("name", sorted(UNARIES))
def test_unary_channels_match_fd(name):
    op, ref, (lo, hi) = UNARIES[name]
    if name == "relu":  # second derivative is zero a.e.; nothing to compare
        return
    rng = np.random.default_rng(11)
    x = rng.uniform(lo, hi, size=(4, 2))

    def f(xv):
        return engine.sum_base(op(xv), axis=-1)

    for i, j in [(0, 0), (0, 1)]:
        val, first, second = spatial_derivs(f, x, i, j)
        f_np = lambda xi: np.sum(ref(xi))
        fd1 = np.array([fd_grad(f_np, x[b])[i] for b in range(4)])
        fd2 = np.array([fd_second(f_np, x[b], i, j) for b in range(4)])
        scale1 = max(np.abs(fd1).max(), 1.0)
        scale2 = max(np.abs(fd2).max(), 1.0)
        assert np.abs(first.v - fd1).max() / scale1 < 1e-6
        assert np.abs(second.v - fd2).max() / scale2 < 2e-4


def test_mul_full_full_channels():
    rng = np.random.default_rng(3)
    x = rng.uniform(0.5, 2.0, size=(3, 2))

    def f(xv):
        a = engine.narrow(xv, 0, 1)
        b = engine.narrow(xv, 1, 2)
        return engine.sum_base(engine.mul(engine.tanh(a), engine.exp(b)), axis=-1)

    f_np = lambda xi: np.tanh(xi[0]) * np.exp(xi[1])
    for i, j in [(0, 0), (0, 1), (1, 1)]:
        val, first, second = spatial_derivs(f, x, i, j)
        fd2 = np.array([fd_second(f_np, x[b], i, j) for b in range(3)])
        assert np.abs(second.v - fd2).max() < 1e-4
        assert np.abs(val.v - np.array([f_np(xb) for xb in x])).max() < 1e-14


def test_second_derivative_symmetry():
    rng = np.random.default_rng(5)
    x = rng.uniform(0.5, 1.5, size=(6, 3))

    def f(xv):
        s = engine.sum_base(engine.square(xv), axis=-1)
        return engine.mul(engine.tanh(s), engine.exp(engine.sum_base(xv, axis=-1) * 0.1))

    for i, j in [(0, 1), (0, 2), (1, 2)]:
        _, _, sij = spatial_derivs(f, x, i, j)
        _, _, sji = spatial_derivs(f, x, j, i)
        assert np.abs(sij.v - sji.v).max() < 1e-12


def test_matmul_gradients_both_sides():
    rng = np.random.default_rng(9)
    X = rng.standard_normal((4, 3))
    W0 = rng.standard_normal((3, 2))

    tape = Tape()
    xv = engine.leaf(tape, X)
    wv = engine.leaf(tape, W0)
    out = engine.sum_base(engine.tanh(engine.matmul(xv, wv)))
    tape.backward(out)

    fd_w = fd_grad(lambda w: np.sum(np.tanh(X @ w.reshape(3, 2))), W0.ravel())
    fd_x = fd_grad(lambda x: np.sum(np.tanh(x.reshape(4, 3) @ W0)), X.ravel())
    assert np.abs(wv.grad[0].ravel() - fd_w).max() < 1e-7
    assert np.abs(xv.grad[0].ravel() - fd_x).max() < 1e-7


def test_structural_op_gradients():
    """concat / narrow / where_mask / take_per_dim / transpose pullbacks."""
    rng = np.random.default_rng(13)
    a0 = rng.uniform(-1.0, 1.0, size=(2, 3))
    mask = np.array([[True, False, True], [False, True, False]])

    tape = Tape()
    av = engine.leaf(tape, a0)
    left = engine.narrow(av, 0, 2)
    both = engine.concat([left, engine.square(av)], axis=-1)
    sel = engine.where_mask(mask, engine.narrow(both, 0, 3), engine.narrow(both, 2, 5))
    tape.backward(engine.sum_base(engine.exp(sel)))

    def f_np(aflat):
        a = aflat.reshape(2, 3)
        both = np.concatenate([a[:, :2], a ** 2], axis=-1)
        sel = np.where(mask, both[:, 0:3], both[:, 2:5])
        return np.sum(np.exp(sel))

    fd = fd_grad(f_np, a0.ravel())
    assert np.abs(av.grad[0].ravel() - fd).max() < 1e-6

    # gather: table rows indexed per output column
    t0 = rng.standard_normal((2, 4))
    tape = Tape()
    tv = engine.leaf(tape, t0)
    idx2 = rng.integers(0, 4, size=(6, 2))
    picked = engine.take_per_dim(tv, idx2)
    tape.backward(engine.sum_base(engine.square(picked)))

    def g_np(tflat):
        t = tflat.reshape(2, 4)
        cols = np.broadcast_to(np.arange(2)[None, :], idx2.shape)
        return np.sum(t[cols, idx2] ** 2)

    fd = fd_grad(g_np, t0.ravel())
    assert np.abs(tv.grad[0].ravel() - fd).max() < 1e-6


def test_component_extraction_stays_differentiable():
    # residual-style use: pull channels out, recombine, differentiate wrt leaf
    rng = np.random.default_rng(17)
    x = rng.uniform(-1.0, 1.0, size=(5, 2))
    w0 = rng.standard_normal(2)

    def loss_value(w):
        z = np.tanh(x @ w)
        first = (1 - z ** 2) * w[0]
        second = -2 * z * (1 - z ** 2) * w[0] * w[0]
        return np.mean((z + 2.0 * first + 0.5 * second) ** 2)

    tape = Tape(dirs=(0,), pairs=((0, 0),))
    wv = engine.leaf(tape, w0)
    xv = engine.spatial_leaf(tape, x)
    z = engine.tanh(engine.sum_base(engine.mul(xv, wv), axis=-1))
    expr = (
        engine.component(z, 0)
        + 2.0 * engine.component(z, 1)
        + 0.5 * engine.component(z, 2)
    )
    loss = engine.mean_base(engine.square(expr))
    tape.backward(loss)
    fd = fd_grad(loss_value, w0)
    assert np.abs(wv.grad[0] - fd).max() < 1e-6
    assert float(loss.v) == pytest.approx(loss_value(w0), abs=1e-12)


def test_grad_params_helper():
    class TinyStore:
        def __init__(self):
            self.flat = np.array([0.7, -0.2, 1.3])

        def leaf_vars(self, tape):
            return {"theta": engine.leaf(tape, self.flat)}

        def collect_grads(self, pvars):
            return pvars["theta"].grad[0].copy()

    store = TinyStore()
    g = grad_params(lambda p, tape: engine.sum_base(engine.square(p["theta"])), store)
    assert np.allclose(g, 2.0 * store.flat, atol=1e-14)


def test_validate_mode_reports_layer():
    tape = Tape(validate=True)
    xv = engine.leaf(tape, np.array([1.0, -1.0]))
    with tape.scope("stage0"), np.errstate(invalid="ignore"):
        with pytest.raises(NonFiniteError) as err:
            engine.log(xv)
    assert "stage0" in str(err.value)
    assert err.value.index == 0


def test_gradients_are_deterministic():
    def run():
        rng = np.random.default_rng(123)
        x = rng.standard_normal((8, 3))
        tape = Tape(dirs=(0, 1, 2), pairs=((0, 0), (1, 1), (2, 2), (0, 1)))
        xv = engine.spatial_leaf(tape, x)
        wv = engine.leaf(tape, rng.standard_normal((3, 3)))
        z = engine.tanh(engine.matmul(xv, wv))
        loss = engine.mean_base(engine.square(engine.sum_base(z, axis=-1)))
        tape.backward(loss)
        return wv.grad.copy()

    g1, g2 = run(), run()
    assert np.array_equal(g1, g2)


@settings(max_examples=25, deadline=None)
@given(
    x0=st.floats(-2.0, 2.0),
    x1=st.floats(0.2, 2.0),
)
def test_property_channels_vs_closed_form(x0, x1):
    # f(x) = exp(x0) * log(x1): all second derivatives known in closed form
    x = np.array([[x0, x1]])

    def f(xv):
        return engine.mul(
            engine.exp(engine.sum_base(engine.narrow(xv, 0, 1), axis=-1)),
            engine.log(engine.sum_base(engine.narrow(xv, 1, 2), axis=-1)),
        )

    _, _, s00 = spatial_derivs(f, x, 0, 0)
    _, _, s01 = spatial_derivs(f, x, 0, 1)
    _, _, s11 = spatial_derivs(f, x, 1, 1)
    assert s00.v[0] == pytest.approx(np.exp(x0) * np.log(x1), rel=1e-10, abs=1e-10)
    assert s01.v[0] == pytest.approx(np.exp(x0) / x1, rel=1e-10, abs=1e-10)
    assert s11.v[0] == pytest.approx(-np.exp(x0) / x1 ** 2, rel=1e-10, abs=1e-10)


class TestDualNumbers:
    def test_scalar_composite(self):
        x = DualScalar.variable(0.8)
        y = (x * x).tanh() + (x.exp() / (x + 2.0)).log()
        f = lambda t: np.tanh(t * t) + np.log(np.exp(t) / (t + 2.0))
        h = 1e-5
        assert y.value == pytest.approx(f(0.8), abs=1e-12)
        assert y.first == pytest.approx((f(0.8 + h) - f(0.8 - h)) / (2 * h), abs=1e-8)
        assert y.second == pytest.approx((f(0.8 + h) - 2 * f(0.8) + f(0.8 - h)) / h ** 2, abs=1e-5)

    def test_jet_divergence_of_linear_map_is_trace(self):
        rng = np.random.default_rng(2)
        A = rng.standard_normal((3, 3))
        x = rng.standard_normal((5, 3))
        div = divergence(lambda j: Jet(j.val @ A.T, j.dot @ A.T), x)
        assert np.allclose(div, np.trace(A), atol=1e-12)

    def test_jet_nonlinear_divergence(self):
        # f_i(x) = sin(x_i) * x_i: div = sum_i (cos(x_i) x_i + sin(x_i))
        rng = np.random.default_rng(4)
        x = rng.standard_normal((7, 2))
        div = divergence(lambda j: j.sin() * j, x)
        want = np.sum(np.cos(x) * x + np.sin(x), axis=1)
        assert np.allclose(div, want, atol=1e-12)
