"""Steady-state Fokker-Planck residual and its parameter gradient.

For dX = mu(X) dt + sigma dW with constant diffusion D = sigma sigma^T / 2,
the stationary density solves

    0 = -div(p mu) + sum_ij D_ij d2p/dx_i dx_j.

Everything is assembled from derivatives of u = log p, which the tape engine
carries as extra channels: with g_i = du/dx_i and h_ij = d2u/dx_i dx_j,

    r = c_scale * p * ( -sum_i g_i mu_i - div(mu)
                        + sum_ij D_ij (h_ij + g_i g_j) ).

Only the upper triangle of D is seeded with second-derivative channels;
off-diagonal terms are counted twice (D is symmetric). The c_scale factor
multiplies the residual once at the end, so scaled and unscaled residuals
are exactly proportional.
"""

from __future__ import annotations

import numpy as np

from ..autodiff import engine


def diffusion_pairs(D: np.ndarray) -> list[tuple[int, int, float]]:
    """Upper-triangular nonzero diffusion entries as (i, j, count) triples."""
    D = np.asarray(D, dtype=np.float64)
    out = []
    for i in range(D.shape[0]):
        for j in range(i, D.shape[0]):
            if D[i, j] != 0.0:
                out.append((i, j, 1.0 if i == j else 2.0))
    return out


def make_tape(problem, validate: bool = False) -> engine.Tape:
    """Tape seeded with one first-derivative channel per coordinate and one
    second-derivative channel per nonzero upper-triangular diffusion entry."""
    pairs = [(i, j) for i, j, _ in diffusion_pairs(problem.diffusion)]
    return engine.Tape(dirs=range(problem.dim), pairs=pairs, validate=validate)


def residual(log_pdf_fn, problem, tape: engine.Tape, x: np.ndarray,
             c_scale: float = 100.0) -> engine.Var:
    """Pointwise residual as a tape variable of base shape (batch,).

    ``log_pdf_fn(xvar) -> Var`` must evaluate log p on the tape; passing a
    closure over model parameters keeps the result differentiable in them.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = problem.dim
    D = problem.diffusion
    xvar = engine.spatial_leaf(tape, x)
    u = log_pdf_fn(xvar)

    mu = np.atleast_2d(problem.drift(x))
    div = np.asarray(problem.div_drift(x), dtype=np.float64)

    g = [engine.component(u, 1 + i) for i in range(d)]
    term = g[0] * (-mu[:, 0])
    for i in range(1, d):
        term = term + g[i] * (-mu[:, i])
    term = term + (-div)
    for q, (i, j, count) in enumerate(diffusion_pairs(D)):
        h = engine.component(u, 1 + d + q)
        term = term + (h + g[i] * g[j]) * (count * D[i, j])
    p = engine.exp(engine.component(u, 0))
    return p * term * float(c_scale)


def residual_values(log_pdf_fn, problem, x: np.ndarray,
                    c_scale: float = 100.0) -> np.ndarray:
    """Residual values only (fresh tape, no backward pass)."""
    tape = make_tape(problem)
    r = residual(log_pdf_fn, problem, tape, x, c_scale)
    vals = np.array(r.v, dtype=np.float64)
    tape.release()
    return vals


def model_residual_values(model, problem, x: np.ndarray,
                          c_scale: float = 100.0) -> np.ndarray:
    tape = make_tape(problem)
    pvars = model.store.leaf_vars(tape)
    r = residual(lambda xv: model.log_pdf_on(pvars, xv), problem, tape, x, c_scale)
    vals = np.array(r.v, dtype=np.float64)
    tape.release()
    return vals


def loss(x: np.ndarray, model, problem, c_scale: float = 100.0) -> float:
    """Mean squared residual over the batch."""
    vals = model_residual_values(model, problem, x, c_scale)
    return float(np.mean(vals * vals))


def residual_loss_grad(model, problem, x: np.ndarray, c_scale: float = 100.0,
                       validate: bool = False) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to the model's flat parameters."""
    tape = make_tape(problem, validate=validate)
    pvars = model.store.leaf_vars(tape)
    r = residual(lambda xv: model.log_pdf_on(pvars, xv), problem, tape, x, c_scale)
    lvar = engine.mean_base(engine.square(r))
    tape.backward(lvar)
    grads = model.store.collect_grads(pvars)
    tape.release()
    return float(lvar.v), grads
