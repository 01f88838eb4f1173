"""Central finite-difference oracles for cross-checking analytic derivatives."""

from __future__ import annotations

import numpy as np


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for k in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[k] += h
        xm[k] -= h
        g[k] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def fd_jacobian(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a vector function of a vector."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for k in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[k] += h
        xm[k] -= h
        cols.append((np.asarray(f(xp)) - np.asarray(f(xm))) / (2.0 * h))
    return np.stack(cols, axis=-1)


def fd_second(f, x: np.ndarray, i: int, j: int, h: float = 1e-4) -> float:
    """Central second difference d²f/dx_i dx_j at a single point."""
    x = np.asarray(x, dtype=np.float64)
    if i == j:
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        return (f(xp) - 2.0 * f(x) + f(xm)) / h ** 2
    total = 0.0
    for si in (1.0, -1.0):
        for sj in (1.0, -1.0):
            y = x.copy()
            y[i] += si * h
            y[j] += sj * h
            total += si * sj * f(y)
    return total / (4.0 * h ** 2)


def fd_check(f, x, analytic, h: float = 1e-5) -> float:
    """Max per-component relative gap between FD gradient and `analytic`.

    Returns max_k |fd_k - analytic_k| / max(|analytic_k|, 1e-12). For scalar
    x, f is differentiated in its single argument.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    analytic = np.atleast_1d(np.asarray(analytic, dtype=np.float64))
    fd = fd_grad(lambda v: f(v if x.size > 1 else v[0]), x, h)
    denom = np.maximum(np.abs(analytic), 1e-12)
    return float(np.max(np.abs(fd - analytic) / denom))


def fd_check_norm(f, x, analytic, h: float = 1e-5) -> float:
    """Like fd_check but normalized by the gradient's overall scale.

    Per-component normalization blows up on components whose true value is
    ~0 (pure roundoff); this variant divides the worst absolute gap by the
    infinity norm of the analytic gradient instead.
    """
    x = np.asarray(x, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = fd_grad(f, x, h)
    scale = max(float(np.max(np.abs(analytic))), 1e-12)
    return float(np.max(np.abs(fd - analytic)) / scale)
