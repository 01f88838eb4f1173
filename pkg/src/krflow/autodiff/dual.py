"""Forward-mode utilities: a scalar second-order dual and a batched jet.

``DualScalar`` propagates (value, first, second) along one direction; mixed
second derivatives follow from polarization. ``Jet`` is the batched
first-order version used to get drift divergences without hand-derived
formulas.
"""

from __future__ import annotations

import math

import numpy as np


class DualScalar:
    """Truncated Taylor scalar: f(x + t u) = value + first*t + second*t²/2."""

    __slots__ = ("value", "first", "second")

    def __init__(self, value: float, first: float = 0.0, second: float = 0.0):
        self.value = float(value)
        self.first = float(first)
        self.second = float(second)

    @classmethod
    def variable(cls, x: float) -> "DualScalar":
        return cls(x, 1.0, 0.0)

    @classmethod
    def lift(cls, x) -> "DualScalar":
        return x if isinstance(x, DualScalar) else cls(x)

    def __repr__(self):
        return f"DualScalar({self.value}, {self.first}, {self.second})"

    def __add__(self, o):
        o = DualScalar.lift(o)
        return DualScalar(self.value + o.value, self.first + o.first, self.second + o.second)

    __radd__ = __add__

    def __neg__(self):
        return DualScalar(-self.value, -self.first, -self.second)

    def __sub__(self, o):
        return self + (-DualScalar.lift(o))

    def __rsub__(self, o):
        return DualScalar.lift(o) + (-self)

    def __mul__(self, o):
        o = DualScalar.lift(o)
        return DualScalar(
            self.value * o.value,
            self.first * o.value + self.value * o.first,
            self.second * o.value + 2.0 * self.first * o.first + self.value * o.second,
        )

    __rmul__ = __mul__

    def __truediv__(self, o):
        o = DualScalar.lift(o)
        return self * o._chain(1.0 / o.value, -1.0 / o.value ** 2, 2.0 / o.value ** 3)

    def __rtruediv__(self, o):
        return DualScalar.lift(o) / self

    def __pow__(self, n: int):
        out = DualScalar(1.0)
        for _ in range(int(n)):
            out = out * self
        return out

    def _chain(self, f, fp, fpp) -> "DualScalar":
        return DualScalar(f, fp * self.first, fp * self.second + fpp * self.first ** 2)

    def tanh(self):
        t = math.tanh(self.value)
        return self._chain(t, 1.0 - t * t, -2.0 * t * (1.0 - t * t))

    def exp(self):
        e = math.exp(self.value)
        return self._chain(e, e, e)

    def log(self):
        return self._chain(math.log(self.value), 1.0 / self.value, -1.0 / self.value ** 2)

    def sqrt(self):
        r = math.sqrt(self.value)
        return self._chain(r, 0.5 / r, -0.25 / r ** 3)

    def sin(self):
        s, c = math.sin(self.value), math.cos(self.value)
        return self._chain(s, c, -s)

    def cos(self):
        s, c = math.sin(self.value), math.cos(self.value)
        return self._chain(c, -s, -c)


class Jet:
    """First-order forward-mode pair of arrays (val, dot).

    Supports just enough numpy-ufunc surface for drift fields. Works on any
    matching array shapes.
    """

    __slots__ = ("val", "dot")

    def __init__(self, val, dot):
        self.val = np.asarray(val, dtype=np.float64)
        self.dot = np.asarray(dot, dtype=np.float64)

    @classmethod
    def lift(cls, x):
        if isinstance(x, Jet):
            return x
        x = np.asarray(x, dtype=np.float64)
        return cls(x, np.zeros_like(x))

    def __add__(self, o):
        o = Jet.lift(o)
        return Jet(self.val + o.val, self.dot + o.dot)

    __radd__ = __add__

    def __neg__(self):
        return Jet(-self.val, -self.dot)

    def __sub__(self, o):
        return self + (-Jet.lift(o))

    def __rsub__(self, o):
        return Jet.lift(o) + (-self)

    def __mul__(self, o):
        o = Jet.lift(o)
        return Jet(self.val * o.val, self.dot * o.val + self.val * o.dot)

    __rmul__ = __mul__

    def __truediv__(self, o):
        o = Jet.lift(o)
        return Jet(self.val / o.val, (self.dot * o.val - self.val * o.dot) / o.val ** 2)

    def __rtruediv__(self, o):
        return Jet.lift(o) / self

    def __pow__(self, n: int):
        n = int(n)
        return Jet(self.val ** n, n * self.val ** (n - 1) * self.dot)

    def __getitem__(self, key):
        return Jet(self.val[key], self.dot[key])

    def tanh(self):
        t = np.tanh(self.val)
        return Jet(t, (1.0 - t * t) * self.dot)

    def exp(self):
        e = np.exp(self.val)
        return Jet(e, e * self.dot)

    def log(self):
        return Jet(np.log(self.val), self.dot / self.val)

    def sqrt(self):
        r = np.sqrt(self.val)
        return Jet(r, 0.5 * self.dot / r)

    def sin(self):
        return Jet(np.sin(self.val), np.cos(self.val) * self.dot)

    def cos(self):
        return Jet(np.cos(self.val), -np.sin(self.val) * self.dot)


def divergence(f, x: np.ndarray) -> np.ndarray:
    """Sum of d(f_i)/d(x_i) for a vector field f: (B, d) -> (B, d)."""
    x = np.asarray(x, dtype=np.float64)
    B, d = x.shape
    out = np.zeros(B)
    for i in range(d):
        seed = np.zeros_like(x)
        seed[:, i] = 1.0
        out += f(Jet(x, seed)).dot[:, i]
    return out
