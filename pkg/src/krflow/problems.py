"""Reference problems: exact stationary densities, drifts, and datasets.

Each steady-state problem bundles a drift field, a constant diffusion
matrix, the exact stationary density with analytic score and log-Hessian
(used as oracles), and recommended model/training settings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import engine

LOG_2PI = float(np.log(2.0 * np.pi))


# ----------------------------------------------------------------- densities


class GaussianDensity:
    """Multivariate normal with analytic score and log-density Hessian."""

    def __init__(self, mean, cov):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
        self.dim = self.mean.size
        self.chol = np.linalg.cholesky(self.cov)
        self.prec = np.linalg.inv(self.cov)
        self.logdet = 2.0 * np.log(np.diag(self.chol)).sum()

    def log_pdf(self, x) -> np.ndarray:
        r = np.atleast_2d(x) - self.mean
        q = np.einsum("bi,ij,bj->b", r, self.prec, r)
        return -0.5 * (q + self.dim * LOG_2PI + self.logdet)

    def score(self, x) -> np.ndarray:
        return -(np.atleast_2d(x) - self.mean) @ self.prec

    def hess_log(self, x) -> np.ndarray:
        B = np.atleast_2d(x).shape[0]
        return np.broadcast_to(-self.prec, (B, self.dim, self.dim)).copy()

    def sample(self, n: int, rng) -> np.ndarray:
        return self.mean + rng.standard_normal((n, self.dim)) @ self.chol.T

    @property
    def entropy(self) -> float:
        return 0.5 * (self.dim * (1.0 + LOG_2PI) + self.logdet)

    def log_pdf_on(self, xvar):
        """Same density as engine ops, so spatial channels flow through it."""
        r = xvar - self.mean
        q = engine.sum_base(engine.mul(engine.matmul(r, self.prec), r), axis=-1)
        return -0.5 * q - 0.5 * (self.dim * LOG_2PI + self.logdet)


class MixtureDensity:
    """Finite Gaussian mixture with analytic score and log-density Hessian."""

    def __init__(self, weights, means, covs):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.weights = self.weights / self.weights.sum()
        self.parts = [GaussianDensity(m, c) for m, c in zip(means, covs)]
        self.dim = self.parts[0].dim
        self._entropy_cache: dict[tuple, float] = {}

    @property
    def means(self) -> list:
        return [p.mean for p in self.parts]

    @property
    def covs(self) -> list:
        return [p.cov for p in self.parts]

    def _component_logs(self, x) -> np.ndarray:
        return np.stack([p.log_pdf(x) for p in self.parts], axis=1)  # (B, K)

    def log_pdf(self, x) -> np.ndarray:
        lk = self._component_logs(x) + np.log(self.weights)
        m = lk.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(lk - m).sum(axis=1, keepdims=True)))[:, 0]

    def _responsibilities(self, x) -> np.ndarray:
        lk = self._component_logs(x) + np.log(self.weights)
        m = lk.max(axis=1, keepdims=True)
        e = np.exp(lk - m)
        return e / e.sum(axis=1, keepdims=True)

    def score(self, x) -> np.ndarray:
        g = self._responsibilities(x)
        return sum(g[:, k:k + 1] * p.score(x) for k, p in enumerate(self.parts))

    def hess_log(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        g = self._responsibilities(x)
        total = np.zeros((x.shape[0], self.dim, self.dim))
        for k, p in enumerate(self.parts):
            s = p.score(x)
            total += g[:, k, None, None] * (s[:, :, None] * s[:, None, :] - p.prec)
        sc = self.score(x)
        return total - sc[:, :, None] * sc[:, None, :]

    def sample(self, n: int, rng) -> np.ndarray:
        counts = rng.multinomial(n, self.weights)
        draws = [p.sample(c, rng) for p, c in zip(self.parts, counts) if c]
        x = np.concatenate(draws, axis=0)
        return x[rng.permutation(n)]

    def entropy_mc(self, n: int = 200_000, seed: int = 2024) -> float:
        key = (n, seed)
        if key not in self._entropy_cache:
            x = self.sample(n, np.random.default_rng(seed))
            self._entropy_cache[key] = float(-self.log_pdf(x).mean())
        return self._entropy_cache[key]

    def log_pdf_on(self, xvar):
        """Mixture log-density from engine ops via a shifted log-sum-exp.

        The shift is the per-point max of the component values, held fixed;
        the identity log sum w e^l = m + log sum w e^(l-m) holds for any
        fixed m, so all derivative channels stay exact.
        """
        terms = []
        for w, p in zip(self.weights, self.parts):
            r = xvar - p.mean
            q = engine.sum_base(engine.mul(engine.matmul(r, p.prec), r), axis=-1)
            lk = -0.5 * q - 0.5 * (p.dim * LOG_2PI + p.logdet) + float(np.log(w))
            terms.append(lk)
        m = np.max(np.stack([t.v for t in terms]), axis=0)
        acc = None
        for t in terms:
            e = engine.exp(t - m)
            acc = e if acc is None else acc + e
        return engine.log(acc) + m


# --------------------------------------------------------------- exact pieces


def lyapunov_solve(A, D) -> np.ndarray:
    """Solve A S + S A^T = 2 D for symmetric S via the Kronecker form.

    Solvable iff no two eigenvalues of A sum to zero; checked up front.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    D = np.atleast_2d(np.asarray(D, dtype=np.float64))
    d = A.shape[0]
    ev = np.linalg.eigvals(A)
    if np.min(np.abs(ev[:, None] + ev[None, :])) < 1e-12:
        raise ValueError("eigenvalue pair sums to zero; equation is singular")
    M = np.kron(A, np.eye(d)) + np.kron(np.eye(d), A)
    S = np.linalg.solve(M, 2.0 * D.reshape(-1)).reshape(d, d)
    return 0.5 * (S + S.T)


def ou_exact_log_pdf(x, A, D) -> np.ndarray:
    """Stationary log-density of dX = -A X dt + sqrt(2 D) dW."""
    return GaussianDensity(np.zeros(len(A)), lyapunov_solve(A, D)).log_pdf(x)


def one_d_exact() -> GaussianDensity:
    """Stationary law of dX = -X dt + dW: N(0, 1/2), i.e. exp(-x^2)/sqrt(pi)."""
    return GaussianDensity([0.0], [[0.5]])


def mixture_log_pdf(x, weights, means, covs) -> np.ndarray:
    return MixtureDensity(weights, means, covs).log_pdf(x)


def mixture_drift(density: MixtureDensity, diffusion) -> Callable:
    """Drift D * grad log p, whose stationary law is exactly `density`."""
    D = np.asarray(diffusion, dtype=np.float64)

    def drift(x):
        return density.score(x) @ D.T

    return drift


def ref_entropy(density, n: int = 200_000, seed: int = 2024) -> float:
    """Differential entropy: exact when available, else Monte Carlo."""
    if hasattr(density, "entropy"):
        return float(density.entropy)
    if hasattr(density, "entropy_mc"):
        return density.entropy_mc(n, seed)
    x = density.sample(n, np.random.default_rng(seed))
    return float(-density.log_pdf(x).mean())


# ------------------------------------------------------------ problem bundles


@dataclass
class FPProblem:
    """Steady-state problem: dX = mu(X) dt + sigma dW, D = sigma sigma^T / 2."""

    name: str
    dim: int
    diffusion: np.ndarray
    drift: Callable
    div_drift: Callable
    ref: object
    box: np.ndarray  # (dim, 2) collocation box
    flow: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    def sample_box(self, n: int, rng) -> np.ndarray:
        lo, hi = self.box[:, 0], self.box[:, 1]
        return lo + (hi - lo) * rng.random((n, self.dim))


def _ou_problem(name, A, D, box_half, flow, train) -> FPProblem:
    A = np.asarray(A, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    d = A.shape[0]
    ref = GaussianDensity(np.zeros(d), lyapunov_solve(A, D))
    tr = float(np.trace(A))
    return FPProblem(
        name=name,
        dim=d,
        diffusion=D,
        drift=lambda x: -np.atleast_2d(x) @ A.T,
        div_drift=lambda x: np.full(np.atleast_2d(x).shape[0], -tr),
        ref=ref,
        box=np.array([[-box_half, box_half]] * d),
        flow=flow,
        train=train,
    )


def _mixture_problem(name, weights, means, covs, box_half, flow, train) -> FPProblem:
    ref = MixtureDensity(weights, means, covs)
    d = ref.dim
    D = np.eye(d)

    def div_drift(x):  # div(D grad log p) = sum_ij D_ij H_ij, here trace(H)
        return np.trace(ref.hess_log(x), axis1=1, axis2=2)

    return FPProblem(
        name=name,
        dim=d,
        diffusion=D,
        drift=mixture_drift(ref, D),
        div_drift=div_drift,
        ref=ref,
        box=np.array([[-box_half, box_half]] * d),
        flow=flow,
        train=train,
    )


# two-dimensional linear problem. The book-kept covariance satisfies
# A S + S A^T = G G^T, so the matrix published next to it is G G^T: the
# diffusion matrix of the equation is half of it.
OU2D_A = np.array([[1.37096037, -0.48306187], [-0.48306187, 1.62903963]])
OU2D_GGT = np.array([[22.52429192, -6.55821381], [-6.55821381, 12.68972]])
OU2D_D = 0.5 * OU2D_GGT
OU2D_SIGMA = np.array([[8.12186142, -0.26372569], [-0.26372569, 3.81664391]])

MIX2D_WEIGHTS = (0.55, 0.45)
MIX2D_MEANS = (np.array([-1.0, -1.0]), np.array([2.0, 2.0]))
MIX2D_COVS = (
    np.array([[6.12186142, -0.26372569], [-0.26372569, 1.81664391]]),
    np.array([[2.8828528, -0.70234742], [-0.70234742, 2.69199911]]),
)


def _block_diag(*blocks) -> np.ndarray:
    n = sum(b.shape[0] for b in blocks)
    out = np.zeros((n, n))
    off = 0
    for b in blocks:
        k = b.shape[0]
        out[off:off + k, off:off + k] = b
        off += k
    return out


def _mix_means_covs(dim: int):
    """The 4d/8d mixtures extend the 2d one block-diagonally."""
    if dim == 4:
        means = (np.array([-1.0, -1.0, -0.3, -0.3]), np.array([2.0, 2.0, 0.6, 0.6]))
        covs = tuple(_block_diag(c, 0.6 * c) for c in MIX2D_COVS)
    elif dim == 8:
        means = (
            np.array([-1.0, -1.0, -0.3, -0.3, -0.4, -0.4, -1.6, -1.6]),
            np.array([2.0, 2.0, 0.6, 0.6, 0.8, 0.8, 2.3, 2.3]),
        )
        covs = tuple(_block_diag(c, 0.6 * c, 0.8 * c, 1.2 * c) for c in MIX2D_COVS)
    else:
        raise ValueError("only 4 or 8 dimensional extensions are defined")
    return means, covs


# ----------------------------------------------------- constrained dataset


class LogisticHoles:
    """d-dimensional i.i.d. logistic samples with elliptic holes cut between
    every pair of adjacent coordinates; the reference density is the
    restriction, normalized by the acceptance probability."""

    def __init__(self, dim: int = 8, scale: float = 2.0, gamma: float = 3.0,
                 cut: float = 7.6):
        self.dim = dim
        self.scale = float(scale)
        self.gamma = float(gamma)
        self.cut = float(cut)
        self._rot = self._rotations()
        self._log_z: dict[tuple, float] = {}

    def _rotations(self) -> np.ndarray:
        mats = []
        for j in range(1, self.dim):  # pairs are 1-based in the constraint
            th = np.pi / 4.0 if j % 2 == 0 else 3.0 * np.pi / 4.0
            rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
            mats.append(np.diag([self.gamma, 1.0]) @ rot)
        return np.stack(mats)

    def accept(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        ok = np.ones(x.shape[0], dtype=bool)
        for j in range(self.dim - 1):
            pair = x[:, j:j + 2] @ self._rot[j].T
            ok &= np.linalg.norm(pair, axis=1) >= self.cut
        return ok

    def sample(self, n: int, rng, stats: dict | None = None) -> np.ndarray:
        out = np.empty((0, self.dim))
        proposed = 0
        while out.shape[0] < n:
            cand = rng.logistic(0.0, self.scale, size=(max(2 * n, 4096), self.dim))
            proposed += cand.shape[0]
            out = np.concatenate([out, cand[self.accept(cand)]], axis=0)
        if stats is not None:
            stats["proposed"] = proposed
            stats["acceptance"] = out.shape[0] / proposed
        return out[:n]

    def log_pdf_unnormalized(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        a = np.abs(x) / self.scale
        lp = (-a - np.log(self.scale) - 2.0 * np.log1p(np.exp(-a))).sum(axis=1)
        return np.where(self.accept(x), lp, -np.inf)

    def log_z(self, n_mc: int = 1_000_000, seed: int = 77) -> float:
        """log of the acceptance probability, by Monte Carlo."""
        key = (n_mc, seed)
        if key not in self._log_z:
            rng = np.random.default_rng(seed)
            hits = 0
            for _ in range(10):
                cand = rng.logistic(0.0, self.scale, size=(n_mc // 10, self.dim))
                hits += int(self.accept(cand).sum())
            self._log_z[key] = float(np.log(hits / (n_mc // 10 * 10)))
        return self._log_z[key]

    def log_pdf(self, x) -> np.ndarray:
        return self.log_pdf_unnormalized(x) - self.log_z()

    def entropy_mc(self, n: int = 200_000, seed: int = 2024) -> float:
        x = self.sample(n, np.random.default_rng(seed))
        return float(-self.log_pdf(x).mean())


def logistic_hole_sample(n: int, rng, dim: int = 8, scale: float = 2.0,
                         gamma: float = 3.0, cut: float = 7.6):
    """Rejection-sample the constrained set; returns the batch together with
    the empirical acceptance rate of the proposals behind it."""
    stats: dict = {}
    batch = LogisticHoles(dim, scale, gamma, cut).sample(n, rng, stats=stats)
    return batch, stats["acceptance"]


def logistic_hole_ref_log_pdf(x, dim: int = 8, scale: float = 2.0,
                              gamma: float = 3.0, cut: float = 7.6) -> np.ndarray:
    return LogisticHoles(dim, scale, gamma, cut).log_pdf(x)


# -------------------------------------------------------------------- catalog


def problem_catalog() -> dict:
    """Named factories with the settings each experiment was run at."""

    def ou1d():
        # the 1d problem dX = -X dt + dW run as two independent copies so the
        # coupling split exists; the joint KL bounds the per-coordinate KL
        return _ou_problem(
            "ou1d", np.eye(2), 0.5 * np.eye(2), 5.0,
            flow=dict(dim=2, n_blocks=2, depth=8, width=48,
                      use_rotation=False, use_nonlinear=False),
            train=dict(n_colloc=3000, batch=500, epochs=300, n_adaptive=1,
                       lr=2e-4, c_scale=100.0, n_validate=200_000),
        )

    def ou2d():
        return _ou_problem(
            "ou2d", OU2D_A, OU2D_D, 6.0,
            flow=dict(dim=2, n_blocks=2, depth=8, width=48, bound=6.0),
            train=dict(n_colloc=60_000, batch=1000, epochs=300, n_adaptive=2,
                       lr=2e-4, c_scale=100.0, n_validate=200_000),
        )

    def mix2d():
        return _mixture_problem(
            "mix2d", MIX2D_WEIGHTS, MIX2D_MEANS, MIX2D_COVS, 5.0,
            flow=dict(dim=2, n_blocks=2, depth=8, width=48, bound=5.0),
            train=dict(n_colloc=60_000, batch=1000, epochs=200, n_adaptive=5,
                       lr=1e-4, c_scale=100.0, n_validate=320_000),
        )

    def mix4d():
        means, covs = _mix_means_covs(4)
        return _mixture_problem(
            "mix4d", MIX2D_WEIGHTS, means, covs, 6.0,
            flow=dict(dim=4, n_blocks=3, depth=8, width=120, bound=6.0),
            train=dict(n_colloc=100_000, batch=500, epochs=1, n_adaptive=16,
                       lr=1e-4, c_scale=100.0, n_validate=200_000),
        )

    def mix8d():
        means, covs = _mix_means_covs(8)
        return _mixture_problem(
            "mix8d", MIX2D_WEIGHTS, means, covs, 6.0,
            flow=dict(dim=8, n_blocks=3, depth=10, width=160, bound=6.0),
            train=dict(n_colloc=320_000, batch=4000, epochs=1, n_adaptive=120,
                       lr=1e-4, c_scale=100.0, n_validate=200_000),
        )

    def holes8d():
        return dict(
            dataset=LogisticHoles(),
            flow=dict(dim=8, n_blocks=7, depth=2, width=24, width_decay=0.9,
                      activation="relu", n_bins=32, bound=30.0,
                      use_rotation=False, use_nonlinear=False),
            train=dict(n_train=320_000, n_validate=320_000, batch=80_000,
                       lr=1e-3, stage_epochs=(8000, 2000, 2000)),
        )

    return {
        "ou1d": ou1d,
        "ou2d": ou2d,
        "mix2d": mix2d,
        "mix4d": mix4d,
        "mix8d": mix8d,
        "holes8d": holes8d,
    }
