"""The full invertible map and its exact density.

Composition, outermost last: for each stage a rotation, then `depth`
scale-bias + coupling pairs on the still-active leading slice, then the
trailing block freezes; finally an optional component-wise monotone map over
all coordinates. The latent reference is a standard normal.
"""

from __future__ import annotations

import contextlib
import json

import numpy as np

from ..autodiff import engine, npops
from ..autodiff.engine import Var
from . import layers
from .config import FlowConfig, count_parameters
from .params import ParameterStore, init_params, param_specs

LOG_2PI = float(np.log(2.0 * np.pi))


def _scope(x, name):
    if isinstance(x, Var):
        return x.tape.scope(name)
    return contextlib.nullcontext()


def krnet_forward(ops, p, x, config: FlowConfig, mesh):
    """Map x -> z and accumulate the log-determinant along the batch."""
    state = x
    logdet = 0.0
    d = config.dim
    for s in range(config.n_stages):
        d_s = config.active_dims(s)
        with _scope(x, f"stage{s}"):
            if d_s < d:
                act, rest = ops.narrow(state, 0, d_s), ops.narrow(state, d_s, d)
            else:
                act, rest = state, None
            if config.use_rotation:
                act, ld = layers.rotation_forward(ops, p, f"stage{s}", act)
                logdet = ld + logdet
            lead, _ = config.stage_split(s)
            for i in range(config.depth):
                pre = f"stage{s}.block{i}"
                act, ld = layers.scale_bias_forward(ops, p, pre, act)
                logdet = ld + logdet
                act, ld = layers.coupling_forward(
                    ops, p, pre, act, lead, i % 2 == 0, config.alpha, config.activation
                )
                logdet = ld + logdet
            state = act if rest is None else ops.concat([act, rest], axis=-1)
    if config.use_nonlinear:
        with _scope(x, "nonlinear"):
            state, ld = layers.nonlinear_forward(ops, p, state, mesh)
            logdet = ld + logdet
    return state, logdet


def krnet_inverse(p, z, config: FlowConfig, mesh) -> np.ndarray:
    """Map z -> x; exact inverse of krnet_forward, numpy only."""
    state = np.asarray(z, dtype=np.float64)
    d = config.dim
    if config.use_nonlinear:
        state = layers.nonlinear_inverse(p, state, mesh)
    for s in reversed(range(config.n_stages)):
        d_s = config.active_dims(s)
        act, rest = state[..., :d_s], state[..., d_s:]
        lead, _ = config.stage_split(s)
        for i in reversed(range(config.depth)):
            pre = f"stage{s}.block{i}"
            act = layers.coupling_inverse(
                p, pre, act, lead, i % 2 == 0, config.alpha, config.activation
            )
            act = layers.scale_bias_inverse(p, pre, act)
        if config.use_rotation:
            act = layers.rotation_inverse(p, f"stage{s}", act)
        state = act if d_s == d else np.concatenate([act, rest], axis=-1)
    return state


def standard_normal_log_pdf(ops, z, dim: int):
    return -0.5 * ops.sum_base(ops.square(z), axis=-1) - 0.5 * dim * LOG_2PI


class KRNet:
    """Invertible flow with exact log-density and sampling."""

    def __init__(self, config: FlowConfig, store: ParameterStore | None = None, seed=0):
        self.config = config
        self.store = store if store is not None else init_params(config, seed)
        self.mesh = layers.build_mesh(config.n_bins, config.mesh_grading, config.bound)

    # ------------------------------------------------------------- numpy path

    def forward(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return krnet_forward(npops, self.store.views(), x, self.config, self.mesh)

    def inverse(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        return krnet_inverse(self.store.views(), z, self.config, self.mesh)

    def log_pdf(self, x) -> np.ndarray:
        z, logdet = self.forward(x)
        return standard_normal_log_pdf(npops, z, self.config.dim) + logdet

    def sample(self, n: int, rng, max_tries: int = 100,
               stats: dict | None = None) -> np.ndarray:
        """Draw latents, invert; rows that come back non-finite are redrawn.

        Pass a dict as ``stats`` to receive the number of redrawn rows under
        the key "redrawn".
        """
        x = self.inverse(rng.standard_normal((n, self.config.dim)))
        redrawn = 0
        for _ in range(max_tries):
            bad = ~np.all(np.isfinite(x), axis=1)
            if not bad.any():
                if stats is not None:
                    stats["redrawn"] = redrawn
                return x
            redrawn += int(bad.sum())
            x[bad] = self.inverse(rng.standard_normal((int(bad.sum()), self.config.dim)))
        raise RuntimeError("sampling kept producing non-finite points")

    # -------------------------------------------------------------- tape path

    def forward_on(self, pvars, xvar):
        return krnet_forward(engine, pvars, xvar, self.config, self.mesh)

    def log_pdf_on(self, pvars, xvar):
        z, logdet = self.forward_on(pvars, xvar)
        return standard_normal_log_pdf(engine, z, self.config.dim) + logdet

    # ------------------------------------------------------------ bookkeeping

    def count_parameters(self, accounting: str = "all") -> int:
        return count_parameters(self.config, accounting)

    def save(self, path) -> None:
        np.savez(path, flat=self.store.flat, config=np.array(self.config.to_json()))

    @classmethod
    def load(cls, path) -> "KRNet":
        with np.load(path) as data:
            config = FlowConfig.from_json(str(data["config"]))
            store = ParameterStore(param_specs(config), data["flat"].astype(np.float64))
        return cls(config, store)
