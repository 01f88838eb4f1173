"""Architecture description and parameter accounting for the triangular flow.

A model is K blocks of coordinates. Outer stage k (of K-1) transforms the
still-active leading blocks through a rotation, then `depth` scale-bias +
coupling pairs, after which the trailing active block is frozen for good.
A component-wise monotone nonlinear map can be applied to all coordinates at
the output. Coupling-net hidden widths shrink geometrically across stages.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class FlowConfig:
    dim: int
    n_blocks: int = 2          # K: number of coordinate blocks
    depth: int = 8             # couplings per outer stage
    width: int = 48            # coupling-net hidden width at stage 1
    width_decay: float = 1.0   # geometric parameter-count decay across stages
    alpha: float = 0.6         # coupling scale clamp, scale in [1-a, 1+a]
    block_sizes: tuple | None = None
    use_rotation: bool = True
    use_nonlinear: bool = True
    n_bins: int = 32           # interior nodes of the monotone map's density
    bound: float = 6.0         # half-width of its nonlinear region
    activation: str = "tanh"
    mesh_grading: float = 0.6  # 0 = uniform mesh, ->1 = strongly center-refined

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if not 1 <= self.n_blocks <= self.dim:
            raise ValueError("n_blocks must lie in [1, dim]")
        if self.block_sizes is not None:
            object.__setattr__(self, "block_sizes", tuple(int(b) for b in self.block_sizes))
            if len(self.block_sizes) != self.n_blocks:
                raise ValueError("block_sizes length must equal n_blocks")
            if any(b < 1 for b in self.block_sizes):
                raise ValueError("block sizes must be positive")
            if sum(self.block_sizes) != self.dim:
                raise ValueError("block sizes must sum to dim")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if not 0.0 < self.width_decay <= 1.0:
            raise ValueError("width_decay must lie in (0, 1]")
        if self.width < 4 or self.width % 2:
            raise ValueError("width must be an even integer >= 4")
        if self.depth < 1:
            raise ValueError("depth must be positive")
        if self.n_bins < 1:
            raise ValueError("n_bins must be positive")
        if self.bound <= 0:
            raise ValueError("bound must be positive")
        if self.activation not in ("tanh", "relu"):
            raise ValueError("activation must be 'tanh' or 'relu'")
        if not 0.0 <= self.mesh_grading < 1.0:
            raise ValueError("mesh_grading must lie in [0, 1)")

    def blocks(self) -> tuple:
        """Block sizes; by default the first block absorbs any remainder."""
        if self.block_sizes is not None:
            return self.block_sizes
        m, rem = divmod(self.dim, self.n_blocks)
        return (m + rem,) + (m,) * (self.n_blocks - 1)

    @property
    def n_stages(self) -> int:
        return self.n_blocks - 1

    def active_dims(self, stage: int) -> int:
        """Width of the still-active leading slice entering `stage` (0-based)."""
        sizes = self.blocks()
        return int(sum(sizes[: self.n_blocks - stage]))

    def stage_split(self, stage: int) -> tuple[int, int]:
        """(leading, trailing) partition sizes of the active slice."""
        sizes = self.blocks()
        trailing = sizes[self.n_blocks - 1 - stage]
        return self.active_dims(stage) - trailing, trailing

    def stage_width(self, stage: int) -> int:
        """Hidden width at `stage`; sqrt of the decay keeps the parameter
        count (which grows ~quadratically in width) shrinking by ~width_decay
        per stage."""
        w = self.width * self.width_decay ** (stage / 2.0)
        return max(4, 2 * round(w / 2.0))

    def coupling_shape(self, stage: int, i: int) -> tuple[int, int]:
        """(conditioner size, updated size) of coupling i within a stage.

        Even i keeps the leading partition and updates the trailing one; odd
        i swaps roles so consecutive couplings update every coordinate.
        """
        lead, trail = self.stage_split(stage)
        return (lead, trail) if i % 2 == 0 else (trail, lead)

    def net_width(self, stage: int) -> int:
        return self.stage_width(stage)

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, s: str) -> "FlowConfig":
        d = json.loads(s)
        if d.get("block_sizes") is not None:
            d["block_sizes"] = tuple(d["block_sizes"])
        return cls(**d)


def net_param_count(n_in: int, n_updated: int, w: int) -> int:
    """Dense maps in -> w -> w/2 -> w/2 -> w plus the linear head."""
    h = w // 2
    return (
        n_in * w + w
        + w * h + h
        + h * h + h
        + h * w + w
        + w * 2 * n_updated + 2 * n_updated
    )


def count_parameters(config: FlowConfig, accounting: str = "all") -> int:
    """Total trainable scalars.

    accounting="all" counts everything in the store. accounting="core"
    drops the per-coupling shift gains and the nonlinear boundary slopes,
    which is the bookkeeping the complexity formula uses.
    """
    if accounting not in ("all", "core"):
        raise ValueError("accounting must be 'all' or 'core'")
    from .params import param_specs

    skip = () if accounting == "all" else ("gain", "nl_slope")
    return sum(
        int(np.prod(spec.shape)) for spec in param_specs(config) if spec.kind not in skip
    )


def ndof_formula(config: FlowConfig) -> int:
    """Closed-form degree-of-freedom count.

    n_bins*dim for the nonlinear map plus, per stage, the coupling-net
    parameters (geometric decay realized through the stage widths), the
    d_k^2 rotation entries, and 2*d_k per scale-bias pair.
    """
    total = config.n_bins * config.dim if config.use_nonlinear else 0
    for s in range(config.n_stages):
        d_s = config.active_dims(s)
        w = config.stage_width(s)
        nets = sum(
            net_param_count(*config.coupling_shape(s, i), w) for i in range(config.depth)
        )
        total += nets + 2 * d_s * config.depth
        if config.use_rotation:
            total += d_s * d_s
    return total


def mesh_knots(n_bins: int, grading: float) -> np.ndarray:
    """Strictly increasing knots on [0,1], finer near 1/2 for grading > 0."""
    u = np.linspace(0.0, 1.0, n_bins + 2)
    knots = u + grading * np.sin(2.0 * np.pi * u) / (2.0 * np.pi)
    knots[0], knots[-1] = 0.0, 1.0
    return knots
