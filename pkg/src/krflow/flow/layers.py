"""Invertible layers: scale-bias, affine coupling, LU rotation, monotone map.

Every forward takes an `ops` module (the tape engine or its numpy double), a
mapping of named parameter tensors, and the input; it returns (output,
log-det contribution). Inverses are numpy-only since they serve sampling,
never differentiation.
"""

from __future__ import annotations

import numpy as np

from ..autodiff import engine, npops
from ..autodiff.engine import Var


class SingularLayerError(RuntimeError):
    pass


def ops_for(x):
    return engine if isinstance(x, Var) else npops


def values(x) -> np.ndarray:
    """The plain value array behind either representation."""
    return x.v if isinstance(x, Var) else np.asarray(x)


# ---------------------------------------------------------------- scale-bias


def scale_bias_forward(ops, p, prefix, x):
    a = p[f"{prefix}.scale"]
    b = p[f"{prefix}.bias"]
    return x * a + b, ops.sum_base(ops.log_abs(a))


def scale_bias_inverse(p, prefix, y):
    return (y - p[f"{prefix}.bias"]) / p[f"{prefix}.scale"]


# ------------------------------------------------------------------ coupling


def _couple_net(ops, p, prefix, h, activation):
    act = ops.tanh if activation == "tanh" else ops.relu
    h = act(ops.matmul(h, p[f"{prefix}.w1"]) + p[f"{prefix}.b1"])
    h = act(ops.matmul(h, p[f"{prefix}.w2"]) + p[f"{prefix}.b2"])
    h = act(ops.matmul(h, p[f"{prefix}.w3"]) + p[f"{prefix}.b3"])
    h = ops.matmul(h, p[f"{prefix}.w4"]) + p[f"{prefix}.b4"]
    return ops.matmul(h, p[f"{prefix}.head_w"]) + p[f"{prefix}.head_b"]


def coupling_forward(ops, p, prefix, x, n_lead, update_trailing, alpha, activation):
    """Affine coupling with scale 1 + alpha*tanh(s) and shift e^gain*tanh(t).

    One partition passes through untouched and conditions the update of the
    other; `update_trailing` picks which. The scale stays inside
    [1-alpha, 1+alpha], so the log-determinant is bounded by construction.
    """
    n = values(x).shape[-1]
    lead = ops.narrow(x, 0, n_lead)
    trail = ops.narrow(x, n_lead, n)
    cond, upd = (lead, trail) if update_trailing else (trail, lead)
    n_upd = n - n_lead if update_trailing else n_lead

    st = _couple_net(ops, p, f"{prefix}.net", cond, activation)
    s = ops.narrow(st, 0, n_upd)
    t = ops.narrow(st, n_upd, 2 * n_upd)
    scale = 1.0 + alpha * ops.tanh(s)
    sv = values(scale)
    if not sv.min() > 0.0:
        raise SingularLayerError(f"{prefix}: coupling scale left (0, 2)")
    shift = ops.exp(p[f"{prefix}.gain"]) * ops.tanh(t)
    y_upd = upd * scale + shift
    logdet = ops.sum_base(ops.log(scale), axis=-1)
    parts = [lead, y_upd] if update_trailing else [y_upd, trail]
    return ops.concat(parts, axis=-1), logdet


def coupling_inverse(p, prefix, y, n_lead, update_trailing, alpha, activation):
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[-1]
    lead, trail = y[..., :n_lead], y[..., n_lead:]
    cond, upd = (lead, trail) if update_trailing else (trail, lead)
    n_upd = n - n_lead if update_trailing else n_lead

    st = _couple_net(npops, p, f"{prefix}.net", cond, activation)
    scale = 1.0 + alpha * np.tanh(st[..., :n_upd])
    shift = np.exp(p[f"{prefix}.gain"]) * np.tanh(st[..., n_upd:])
    x_upd = (upd - shift) / scale
    return np.concatenate([lead, x_upd] if update_trailing else [x_upd, trail], axis=-1)


# ------------------------------------------------------------------ rotation


def _lu_factors(ops, P, n):
    lmask = np.tril(np.ones((n, n)), -1)
    Lm = P * lmask + np.eye(n)
    Um = P * np.triu(np.ones((n, n)))
    return Lm, Um


def rotation_forward(ops, p, prefix, x):
    """Linear map W = L U stored in one square tensor: unit-diagonal L below,
    U on and above. Rows transform as y = x W^T, log-det = sum log|U_ii|."""
    P = p[f"{prefix}.rotation"]
    n = values(P).shape[-1]
    Lm, Um = _lu_factors(ops, P, n)
    dv = np.diagonal(values(Um).reshape(n, n))
    if np.any(np.abs(dv) <= 1e-300):
        raise SingularLayerError(f"{prefix}: rotation factor has a zero pivot")
    y = ops.matmul(ops.matmul(x, ops.transpose2d(Um)), ops.transpose2d(Lm))
    logdet = ops.sum_base(ops.log_abs(ops.diagonal2d(Um)))
    return y, logdet


def rotation_inverse(p, prefix, y):
    P = np.asarray(p[f"{prefix}.rotation"], dtype=np.float64)
    n = P.shape[-1]
    W = (np.tril(P, -1) + np.eye(n)) @ np.triu(P)
    return np.linalg.solve(W, np.asarray(y, dtype=np.float64).T).T


# ------------------------------------------------- component-wise monotone map


def build_mesh(n_bins: int, grading: float, bound: float) -> dict:
    """Fixed quadrature data for the monotone map: knots on [0,1], bin
    widths, interior trapezoid weights, and a cumulative-sum matrix."""
    from .config import mesh_knots

    knots = mesh_knots(n_bins, grading)
    h = np.diff(knots)
    return {
        "knots": knots,
        "h": h,
        "wvec": 0.5 * (h[:-1] + h[1:]),
        "edge": 0.5 * (h[0] + h[-1]),
        "cummat": np.triu(np.ones((n_bins + 1, n_bins + 1))),
        "bound": float(bound),
        "n_bins": n_bins,
    }


def nonlinear_tables(ops, p, mesh):
    """Per-dimension density values w at the knots and CDF values F.

    Interior density is c * softmax-like weights; both edges carry the
    boundary slope beta so the map extends linearly outside [-a, a]. c is
    chosen in closed form so each row of the trapezoid CDF ends at exactly 1.
    """
    logits = p["nonlinear.logits"]          # (d, n_bins)
    beta = ops.softplus(p["nonlinear.slope_raw"])  # (d,)
    d = values(beta).shape[-1]
    e = ops.exp(logits)
    mass = ops.sum_base(e * mesh["wvec"], axis=-1)        # (d,)
    c = (1.0 - beta * mesh["edge"]) * ops.reciprocal(mass)
    cv = values(c)
    if not cv.min() > 0.0:
        raise SingularLayerError("nonlinear: boundary slope too steep, density not positive")
    bcol = ops.reshape_base(beta, (d, 1))
    wtab = ops.concat([bcol, ops.reshape_base(c, (d, 1)) * e, bcol], axis=-1)
    wpair = (ops.narrow(wtab, 0, mesh["n_bins"] + 1)
             + ops.narrow(wtab, 1, mesh["n_bins"] + 2)) * (0.5 * mesh["h"])
    cums = ops.matmul(wpair, mesh["cummat"])
    ftab = ops.concat([np.zeros((d, 1)), cums], axis=-1)  # (d, n_bins + 2)
    return wtab, ftab, beta


def nonlinear_forward(ops, p, x, mesh):
    """Monotone map y = 2a F((x+a)/2a) - a inside [-a, a], slope-beta linear
    outside. F is the piecewise-quadratic CDF of the piecewise-linear knot
    density, so log-det is log of that density at x."""
    a = mesh["bound"]
    knots, h = mesh["knots"], mesh["h"]
    wtab, ftab, beta = nonlinear_tables(ops, p, mesh)
    d = values(beta).shape[-1]

    xv = values(x)
    lo = xv < -a
    hi = xv > a
    mid = ~(lo | hi)

    u = (x + a) * (1.0 / (2.0 * a))
    uv = np.where(mid, np.clip(values(u), 0.0, 1.0), 0.5)
    idx = np.clip(np.searchsorted(knots, uv, side="right") - 1, 0, mesh["n_bins"])

    wl = ops.take_per_dim(wtab, idx)
    wr = ops.take_per_dim(wtab, idx + 1)
    fl = ops.take_per_dim(ftab, idx)
    t = u - knots[idx]
    q = (wr - wl) * (1.0 / h[idx])
    f_mid = fl + wl * t + 0.5 * q * ops.square(t)
    y_mid = (2.0 * a) * f_mid - a
    # off-branch lanes hold garbage; keep it out of the log
    dens = ops.where_mask(mid, wl + q * t, 1.0)
    dv = values(dens)
    if not dv.min() > 0.0:
        raise SingularLayerError("nonlinear: density row went nonpositive")

    brow = ops.reshape_base(beta, (1, d))
    y_tail = ops.where_mask(lo, brow * (x + a) - a, brow * (x - a) + a)
    y = ops.where_mask(mid, y_mid, y_tail)
    ld = ops.where_mask(mid, ops.log(dens), ops.log(brow))
    return y, ops.sum_base(ld, axis=-1)


def nonlinear_inverse(p, y, mesh):
    """Invert per dimension: linear tails directly, interior bins by solving
    the quadratic for the in-bin offset (stable root form)."""
    a = mesh["bound"]
    knots, h = mesh["knots"], mesh["h"]
    wtab, ftab, beta = nonlinear_tables(npops, p, mesh)
    y = np.asarray(y, dtype=np.float64)
    B, d = y.shape

    lo = y < -a
    hi = y > a
    mid = ~(lo | hi)
    x_tail = np.where(lo, (y + a) / beta - a, (y - a) / beta + a)

    fv = np.clip((y + a) / (2.0 * a), 0.0, 1.0)
    fv = np.where(mid, fv, 0.5)
    idx = np.empty((B, d), dtype=np.intp)
    for j in range(d):  # CDF knots differ per dimension
        idx[:, j] = np.searchsorted(ftab[j], fv[:, j], side="right") - 1
    idx = np.clip(idx, 0, mesh["n_bins"])

    cols = np.broadcast_to(np.arange(d)[None, :], (B, d))
    wl = wtab[cols, idx]
    q = (wtab[cols, idx + 1] - wl) / h[idx]
    delta = fv - ftab[cols, idx]
    disc = np.maximum(wl * wl + 2.0 * q * delta, 0.0)
    t = 2.0 * delta / (wl + np.sqrt(disc))
    x_mid = (knots[idx] + t) * (2.0 * a) - a
    return np.where(mid, x_mid, x_tail)
