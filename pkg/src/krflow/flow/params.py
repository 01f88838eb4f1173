"""Flat parameter storage with named views.

All trainable scalars live in one contiguous vector so the optimizer is a
couple of vectorized updates; layers address slices through named views.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from ..autodiff import engine
from .config import FlowConfig


class ParamSpec(NamedTuple):
    name: str
    shape: tuple
    kind: str  # net_w | net_b | head | gain | scale | bias | rotation | nl_logits | nl_slope


def param_specs(config: FlowConfig) -> list[ParamSpec]:
    """Enumerate every parameter tensor of a model, in storage order."""
    specs = []
    for s in range(config.n_stages):
        d_s = config.active_dims(s)
        w = config.stage_width(s)
        h = w // 2
        if config.use_rotation:
            specs.append(ParamSpec(f"stage{s}.rotation", (d_s, d_s), "rotation"))
        for i in range(config.depth):
            pre = f"stage{s}.block{i}"
            n_cond, n_upd = config.coupling_shape(s, i)
            specs.append(ParamSpec(f"{pre}.scale", (d_s,), "scale"))
            specs.append(ParamSpec(f"{pre}.bias", (d_s,), "bias"))
            for name, shape in (
                ("w1", (n_cond, w)), ("w2", (w, h)), ("w3", (h, h)), ("w4", (h, w)),
            ):
                specs.append(ParamSpec(f"{pre}.net.{name}", shape, "net_w"))
                specs.append(ParamSpec(f"{pre}.net.b{name[1]}", (shape[1],), "net_b"))
            specs.append(ParamSpec(f"{pre}.net.head_w", (w, 2 * n_upd), "head"))
            specs.append(ParamSpec(f"{pre}.net.head_b", (2 * n_upd,), "head"))
            specs.append(ParamSpec(f"{pre}.gain", (n_upd,), "gain"))
    if config.use_nonlinear:
        specs.append(ParamSpec("nonlinear.logits", (config.dim, config.n_bins), "nl_logits"))
        specs.append(ParamSpec("nonlinear.slope_raw", (config.dim,), "nl_slope"))
    return specs


# softplus(x) = 1  =>  x = log(e - 1); boundary slopes start at identity
_SLOPE_RAW_ONE = float(np.log(np.e - 1.0))


class ParameterStore:
    """Named tensors backed by a single flat vector."""

    def __init__(self, specs: list[ParamSpec], flat: np.ndarray):
        self.specs = list(specs)
        self.flat = flat
        self._slices: dict[str, tuple[slice, tuple]] = {}
        off = 0
        for spec in self.specs:
            n = int(np.prod(spec.shape))
            self._slices[spec.name] = (slice(off, off + n), spec.shape)
            off += n
        if off != flat.size:
            raise ValueError(f"flat vector has {flat.size} entries, specs need {off}")

    @property
    def size(self) -> int:
        return self.flat.size

    def __contains__(self, name: str) -> bool:
        return name in self._slices

    def view(self, name: str) -> np.ndarray:
        sl, shape = self._slices[name]
        return self.flat[sl].reshape(shape)

    def views(self) -> dict[str, np.ndarray]:
        return {spec.name: self.view(spec.name) for spec in self.specs}

    def set_(self, name: str, value) -> None:
        sl, shape = self._slices[name]
        self.flat[sl] = np.asarray(value, dtype=float).reshape(-1)

    def leaf_vars(self, tape) -> dict[str, "engine.Var"]:
        """One tape leaf per named tensor; grads come back via collect_grads."""
        return {spec.name: engine.leaf(tape, self.view(spec.name)) for spec in self.specs}

    def collect_grads(self, pvars: dict) -> np.ndarray:
        g = np.zeros_like(self.flat)
        for spec in self.specs:
            sl, _ = self._slices[spec.name]
            pv = pvars[spec.name]
            if pv.grad is not None:
                g[sl] = pv.grad[0].reshape(-1)
        return g

    def copy(self) -> "ParameterStore":
        return ParameterStore(self.specs, self.flat.copy())

    def load_flat(self, flat: np.ndarray) -> None:
        if flat.size != self.flat.size:
            raise ValueError("size mismatch")
        self.flat[:] = flat


def init_params(config: FlowConfig, seed=0) -> ParameterStore:
    """Fresh store; the whole model starts at the identity map.

    Dense weights get Glorot-style N(0, 2/(fan_in+fan_out)) draws, but every
    head is zeroed so each coupling's (s, t) output, and hence the coupling
    itself, is identity at step 0. Rotations start at I, scale-bias at
    (1, 0), and the monotone map at uniform density with unit edge slopes.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    specs = param_specs(config)
    flat = np.zeros(sum(int(np.prod(s.shape)) for s in specs))
    store = ParameterStore(specs, flat)
    for spec in specs:
        if spec.kind == "net_w":
            fan_in, fan_out = spec.shape
            std = np.sqrt(2.0 / (fan_in + fan_out))
            store.set_(spec.name, rng.normal(0.0, std, size=spec.shape))
        elif spec.kind == "scale":
            store.set_(spec.name, np.ones(spec.shape))
        elif spec.kind == "rotation":
            store.set_(spec.name, np.eye(spec.shape[0]))
        elif spec.kind == "nl_slope":
            store.set_(spec.name, np.full(spec.shape, _SLOPE_RAW_ONE))
        # net_b, head, gain, bias, nl_logits stay zero
    return store


def copy_matching(dst: ParameterStore, src: ParameterStore) -> int:
    """Copy tensors whose name and shape agree; returns how many transferred."""
    n = 0
    for spec in dst.specs:
        if spec.name in src and src.view(spec.name).shape == spec.shape:
            dst.set_(spec.name, src.view(spec.name))
            n += 1
    return n
