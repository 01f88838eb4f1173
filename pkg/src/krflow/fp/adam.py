"""Adam optimizer over flat parameter vectors.

Both a stateful class (used by the training loops) and a functional
``adam_step`` are provided; they share the same update rule: bias-corrected
first/second moment estimates with the stabilizer added outside the square
root, so the very first step moves each coordinate by almost exactly
``-lr * sign(grad)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class AdamState:
    """Moment accumulators; zero-initialized, ``t`` counts completed steps."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0, beta1, beta2, eps)


def adam_step(state: AdamState, grad: np.ndarray, theta: np.ndarray,
              lr: float) -> tuple[np.ndarray, AdamState]:
    """One update; returns the new parameter vector and the mutated state."""
    g = np.asarray(grad, dtype=np.float64)
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    mhat = state.m / (1.0 - state.beta1 ** state.t)
    vhat = state.v / (1.0 - state.beta2 ** state.t)
    return theta - lr * mhat / (np.sqrt(vhat) + state.eps), state


class Adam:
    """In-place Adam over a preallocated flat vector."""

    def __init__(self, size: int, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = float(lr)
        self.state = AdamState.zeros(size, beta1, beta2, eps)

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        theta[:], self.state = adam_step(self.state, grad, theta, self.lr)
