"""Reverse-mode tape over stacked float64 arrays.

Every tape variable holds an array of shape ``(R, *base)``. Row 0 is the
value. When the tape is created with spatial derivative channels, rows
``1..n_dirs`` carry first-derivative channels (one per requested input axis)
and the remaining rows carry second-derivative channels (one per requested
axis pair). Propagating those rows through the forward pass is forward-mode
AD in a truncated Taylor algebra; the reverse pass then differentiates the
whole computation, channels included, with respect to any leaf. That is what
makes parameter gradients of losses built from second spatial derivatives
exact rather than differenced.

Variables with a single row ("flat") carry no derivative channels; all
parameters are flat, so channel arithmetic only ever touches quantities that
actually depend on the spatial input. A tape without channels (``Tape()``)
degenerates to ordinary reverse-mode AD.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class NonFiniteError(RuntimeError):
    """An operation produced NaN or Inf.

    Carries the index of the offending node and its scoped label so training
    loops can report which layer blew up.
    """

    def __init__(self, index: int, label: str):
        super().__init__(f"non-finite values at node {index} ({label})")
        self.index = index
        self.label = label


class Tape:
    """Append-only record of operations, replayed in reverse for gradients.

    dirs:  input axes that get first-derivative channels.
    pairs: (i, j) index pairs *into dirs* that get second-derivative channels.
    """

    __slots__ = ("nodes", "dirs", "pairs", "validate", "_scopes")

    def __init__(self, dirs=(), pairs=(), validate: bool = False):
        self.nodes: list = []
        self.dirs = tuple(dirs)
        self.pairs = tuple(tuple(p) for p in pairs)
        for i, j in self.pairs:
            if not (0 <= i < len(self.dirs) and 0 <= j < len(self.dirs)):
                raise ValueError("pair indices must point into dirs")
        self.validate = validate
        self._scopes: list[str] = []

    @property
    def n_dirs(self) -> int:
        return len(self.dirs)

    @property
    def rows(self) -> int:
        return 1 + len(self.dirs) + len(self.pairs)

    @contextmanager
    def scope(self, name: str):
        self._scopes.append(name)
        try:
            yield
        finally:
            self._scopes.pop()

    def record(self, label: str, out: "Var", pullback) -> None:
        if self.validate and not np.all(np.isfinite(out.E)):
            full = "/".join(self._scopes + [label])
            raise NonFiniteError(len(self.nodes), full)
        self.nodes.append((out, pullback))

    def backward(self, loss: "Var") -> None:
        """Reverse pass from a scalar-or-batched loss variable."""
        loss.grad = np.ones_like(loss.E)
        for out, pullback in reversed(self.nodes):
            if out.grad is not None:
                pullback(out.grad)

    def release(self) -> None:
        """Drop the recorded graph.

        Nodes hold the variables and the variables hold the tape, a cycle the
        reference counter cannot free on its own; training loops that build
        one tape per step must release it or wait on the cyclic collector.
        """
        self.nodes.clear()


class Var:
    __slots__ = ("tape", "E", "grad")

    def __init__(self, tape: Tape, E: np.ndarray):
        self.tape = tape
        self.E = E
        self.grad = None

    @property
    def v(self) -> np.ndarray:
        """Value row."""
        return self.E[0]

    @property
    def full(self) -> bool:
        return self.E.shape[0] > 1

    def add_grad(self, g: np.ndarray) -> None:
        g = _unbroadcast(g, self.E.shape)
        if self.grad is None:
            # first contribution: materialize a private full-shape copy
            if g.shape == self.E.shape:
                self.grad = np.array(g, dtype=self.E.dtype)
            else:
                self.grad = np.zeros_like(self.E)
                self.grad += g
        else:
            self.grad += g

    # operator sugar; constants (floats/ndarrays) are fine on either side
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, o):
        if isinstance(o, Var):
            return mul(self, reciprocal(o))
        return mul(self, 1.0 / np.asarray(o, dtype=np.float64))

    def __rtruediv__(self, o):
        return mul(reciprocal(self), o)


def leaf(tape: Tape, value: np.ndarray) -> Var:
    """A channel-less leaf (parameters, constants that need gradients)."""
    value = np.asarray(value, dtype=np.float64)
    return Var(tape, value.reshape((1,) + value.shape))


def spatial_leaf(tape: Tape, x: np.ndarray) -> Var:
    """Batch of input points (B, d) with unit derivative seeds per tape.dirs."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("spatial_leaf expects a (batch, dim) array")
    B, d = x.shape
    E = np.zeros((tape.rows, B, d))
    E[0] = x
    for r, axis in enumerate(tape.dirs):
        if not 0 <= axis < d:
            raise ValueError(f"direction axis {axis} out of range for dim {d}")
        E[1 + r, :, axis] = 1.0
    return Var(tape, E)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce g (rows, *base_big) onto (rows, *base_small).

    Row counts always agree by the time this runs (ops slice the value row
    for channel-less operands first), so only base axes are summed; base
    broadcasting is right-aligned, mirroring numpy.
    """
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=1)
    for ax in range(1, len(shape)):
        if shape[ax] == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _const(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a.reshape((1,) + a.shape)


def _parts(x):
    """Return (E, var_or_None) treating non-Vars as channel-less constants."""
    if isinstance(x, Var):
        return x.E, x
    return _const(x), None


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def add(u, z) -> Var:
    tape = _tape_of(u, z)
    Eu, vu = _parts(u)
    Ez, vz = _parts(z)
    base = np.broadcast_shapes(Eu.shape[1:], Ez.shape[1:])
    if Eu.shape[0] == Ez.shape[0]:
        E = Eu + Ez
    elif Eu.shape[0] == 1:  # flat + full: flat only touches the value row
        E = _grow_base(Ez, base)
        E[0] = E[0] + Eu[0]
    else:
        E = _grow_base(Eu, base)
        E[0] = E[0] + Ez[0]
    out = Var(tape, E)

    def pb(g):
        if vu is not None:
            vu.add_grad(g if Eu.shape[0] == g.shape[0] else g[0:1])
        if vz is not None:
            vz.add_grad(g if Ez.shape[0] == g.shape[0] else g[0:1])

    tape.record("add", out, pb)
    return out


def _grow_base(E: np.ndarray, base: tuple) -> np.ndarray:
    """Copy of E with its base broadcast to `base` (row count kept)."""
    tgt = E.shape[:1] + base
    if E.shape == tgt:
        return E.copy()
    pad = (1,) * (len(base) - (E.ndim - 1))
    return np.broadcast_to(E.reshape(E.shape[:1] + pad + E.shape[1:]), tgt).copy()


def sub(u, z) -> Var:
    tape = _tape_of(u, z)
    Eu, vu = _parts(u)
    Ez, vz = _parts(z)
    base = np.broadcast_shapes(Eu.shape[1:], Ez.shape[1:])
    if Eu.shape[0] == Ez.shape[0]:
        E = Eu - Ez
    elif Eu.shape[0] == 1:
        E = _grow_base(-Ez, base)
        E[0] = E[0] + Eu[0]
    else:
        E = _grow_base(Eu, base)
        E[0] = E[0] - Ez[0]
    out = Var(tape, E)

    def pb(g):
        if vu is not None:
            vu.add_grad(g if Eu.shape[0] == g.shape[0] else g[0:1])
        if vz is not None:
            vz.add_grad(-g if Ez.shape[0] == g.shape[0] else -g[0:1])

    tape.record("sub", out, pb)
    return out


def mul(u, z) -> Var:
    tape = _tape_of(u, z)
    Eu, vu = _parts(u)
    Ez, vz = _parts(z)
    fu, fz = Eu.shape[0] > 1, Ez.shape[0] > 1

    if fu and fz:
        nd = tape.n_dirs
        v_u, v_z = Eu[0], Ez[0]
        E = Eu * v_z + v_u * Ez
        E[0] *= 0.5
        for p, (i, j) in enumerate(tape.pairs):
            E[1 + nd + p] += Eu[1 + i] * Ez[1 + j] + Eu[1 + j] * Ez[1 + i]
        out = Var(tape, E)

        def pb(g):
            if vu is not None:
                gu = g * v_z
                gu[0] += (g[1:] * Ez[1:]).sum(axis=0)
                for p, (i, j) in enumerate(tape.pairs):
                    gu[1 + i] += g[1 + nd + p] * Ez[1 + j]
                    gu[1 + j] += g[1 + nd + p] * Ez[1 + i]
                vu.add_grad(gu)
            if vz is not None:
                gz = g * v_u
                gz[0] += (g[1:] * Eu[1:]).sum(axis=0)
                for p, (i, j) in enumerate(tape.pairs):
                    gz[1 + i] += g[1 + nd + p] * Eu[1 + j]
                    gz[1 + j] += g[1 + nd + p] * Eu[1 + i]
                vz.add_grad(gz)

    else:
        # at most one operand has channels: channel-less factors scale rows
        E = Eu * Ez
        out = Var(tape, E)

        def pb(g):
            if vu is not None:
                gu = g * Ez
                vu.add_grad(gu if fu or not fz else gu.sum(axis=0, keepdims=True))
            if vz is not None:
                gz = g * Eu
                vz.add_grad(gz if fz or not fu else gz.sum(axis=0, keepdims=True))

    tape.record("mul", out, pb)
    return out


def _unary(name, f, d1, d2, d3):
    def op(u: Var) -> Var:
        tape = u.tape
        Eu = u.E
        if Eu.shape[0] == 1:
            fp = d1(Eu[0])
            out = Var(tape, f(Eu[0])[None])

            def pb(g):
                u.add_grad(g * fp)

        else:
            nd = tape.n_dirs
            v = Eu[0]
            fp = d1(v)
            E = fp * Eu
            E[0] = f(v)
            fpp = d2(v) if tape.pairs or nd else None
            for p, (i, j) in enumerate(tape.pairs):
                E[1 + nd + p] += fpp * Eu[1 + i] * Eu[1 + j]
            out = Var(tape, E)

            def pb(g):
                gu = g * fp
                if nd:
                    gu[0] += (g[1:1 + nd] * fpp * Eu[1:1 + nd]).sum(axis=0)
                if tape.pairs:
                    fppp = d3(v)
                    for p, (i, j) in enumerate(tape.pairs):
                        gc = g[1 + nd + p]
                        gu[0] += gc * (fpp * Eu[1 + nd + p] + fppp * Eu[1 + i] * Eu[1 + j])
                        gu[1 + i] += gc * fpp * Eu[1 + j]
                        gu[1 + j] += gc * fpp * Eu[1 + i]
                u.add_grad(gu)

        tape.record(name, out, pb)
        return out

    op.__name__ = name
    return op


def _tanh_d1(x):
    t = np.tanh(x)
    return 1.0 - t * t


tanh = _unary(
    "tanh",
    np.tanh,
    _tanh_d1,
    lambda x: -2.0 * np.tanh(x) * _tanh_d1(x),
    lambda x: _tanh_d1(x) * (6.0 * np.tanh(x) ** 2 - 2.0),
)

exp = _unary("exp", np.exp, np.exp, np.exp, np.exp)

log = _unary(
    "log", np.log, lambda x: 1.0 / x, lambda x: -1.0 / x ** 2, lambda x: 2.0 / x ** 3
)

log_abs = _unary(
    "log_abs",
    lambda x: np.log(np.abs(x)),
    lambda x: 1.0 / x,
    lambda x: -1.0 / x ** 2,
    lambda x: 2.0 / x ** 3,
)

square = _unary(
    "square",
    np.square,
    lambda x: 2.0 * x,
    lambda x: np.full_like(x, 2.0),
    lambda x: np.zeros_like(x),
)

reciprocal = _unary(
    "reciprocal",
    lambda x: 1.0 / x,
    lambda x: -1.0 / x ** 2,
    lambda x: 2.0 / x ** 3,
    lambda x: -6.0 / x ** 4,
)

relu = _unary(
    "relu",
    lambda x: np.maximum(x, 0.0),
    lambda x: (x > 0).astype(np.float64),
    lambda x: np.zeros_like(x),
    lambda x: np.zeros_like(x),
)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


softplus = _unary(
    "softplus",
    lambda x: np.logaddexp(0.0, x),
    _sigmoid,
    lambda x: _sigmoid(x) * (1.0 - _sigmoid(x)),
    lambda x: _sigmoid(x) * (1.0 - _sigmoid(x)) * (1.0 - 2.0 * _sigmoid(x)),
)


def matmul(u: Var, w) -> Var:
    """Batched right-multiply: (R, B, n) @ (n, m). Channels ride along rows."""
    tape = u.tape
    Ew, vw = _parts(w)
    if Ew.shape[0] != 1:
        raise ValueError("matrix operand must be channel-less")
    W = Ew[0]
    Eu = u.E
    R, B, n = Eu.shape
    E = (Eu.reshape(R * B, n) @ W).reshape(R, B, W.shape[1])
    out = Var(tape, E)

    def pb(g):
        m = W.shape[1]
        u.add_grad((g.reshape(R * B, m) @ W.T).reshape(Eu.shape))
        if vw is not None:
            vw.add_grad((Eu.reshape(R * B, n).T @ g.reshape(R * B, m))[None])

    tape.record("matmul", out, pb)
    return out


def transpose2d(u: Var) -> Var:
    E = u.E.transpose(0, 2, 1)
    out = Var(u.tape, E)

    def pb(g):
        u.add_grad(g.transpose(0, 2, 1))

    u.tape.record("transpose2d", out, pb)
    return out


def diagonal2d(u: Var) -> Var:
    n = u.E.shape[1]
    E = u.E[:, np.arange(n), np.arange(n)]
    out = Var(u.tape, E)

    def pb(g):
        gu = np.zeros_like(u.E)
        gu[:, np.arange(n), np.arange(n)] = g
        u.add_grad(gu)

    u.tape.record("diagonal2d", out, pb)
    return out


def sum_base(u: Var, axis: int | None = None) -> Var:
    """Sum over base axes (all of them, or one; negative axes allowed)."""
    Eu = u.E
    if axis is None:
        E = Eu.reshape(Eu.shape[0], -1).sum(axis=1)
        out = Var(u.tape, E)

        def pb(g):
            u.add_grad(np.broadcast_to(g.reshape(g.shape + (1,) * (Eu.ndim - 1)), Eu.shape))

    else:
        ax = axis if axis < 0 else axis + 1
        E = Eu.sum(axis=ax)
        out = Var(u.tape, E)

        def pb(g):
            u.add_grad(np.broadcast_to(np.expand_dims(g, ax), Eu.shape))

    u.tape.record("sum", out, pb)
    return out


def mean_base(u: Var, axis: int | None = None) -> Var:
    n = u.E[0].size if axis is None else u.E.shape[axis if axis < 0 else axis + 1]
    return mul(sum_base(u, axis), 1.0 / n)


def concat(parts: list, axis: int = -1) -> Var:
    if axis != -1:
        raise NotImplementedError("concat supports the last base axis only")
    tape = _tape_of(*parts)
    split = [_parts(p) for p in parts]
    R = max(Ep.shape[0] for Ep, _ in split)
    stacks = []
    vars_ = []
    for Ep, vp in split:
        vars_.append((vp, Ep.shape[0]))
        if Ep.shape[0] != R:
            grown = np.zeros((R,) + Ep.shape[1:])
            grown[0] = Ep[0]
            Ep = grown
        stacks.append(Ep)
    widths = [s.shape[-1] for s in stacks]
    E = np.concatenate(stacks, axis=-1)
    out = Var(tape, E)

    def pb(g):
        lo = 0
        for (vp, rp), wdt in zip(vars_, widths):
            if vp is not None:
                gp = g[..., lo:lo + wdt]
                vp.add_grad(gp if rp == g.shape[0] else gp[0:1])
            lo += wdt

    tape.record("concat", out, pb)
    return out


def narrow(u: Var, lo: int, hi: int) -> Var:
    """Slice the last base axis."""
    out = Var(u.tape, u.E[..., lo:hi])

    def pb(g):
        gu = np.zeros_like(u.E)
        gu[..., lo:hi] = g
        u.add_grad(gu)

    u.tape.record("narrow", out, pb)
    return out


def _grow_full(E: np.ndarray, R: int, base: tuple) -> np.ndarray:
    """(r, *small) -> (R, *base); added rows are zero (constants carry no
    derivative channels), base dims broadcast right-aligned."""
    if E.shape == (R,) + base:
        return E
    pad = (1,) * (len(base) - (E.ndim - 1))
    E = E.reshape(E.shape[:1] + pad + E.shape[1:])
    out = np.zeros((R,) + base)
    out[: E.shape[0]] = E
    return out


def where_mask(mask: np.ndarray, u, z) -> Var:
    """Elementwise select by a constant boolean mask over the base shape."""
    tape = _tape_of(u, z)
    Eu, vu = _parts(u)
    Ez, vz = _parts(z)
    ru, rz = Eu.shape[0], Ez.shape[0]
    R = max(ru, rz)
    base = np.broadcast_shapes(mask.shape, Eu.shape[1:], Ez.shape[1:])
    Eu = _grow_full(Eu, R, base)
    Ez = _grow_full(Ez, R, base)
    E = np.where(mask[None], Eu, Ez)
    out = Var(tape, E)

    def pb(g):
        if vu is not None:
            gu = np.where(mask[None], g, 0.0)
            vu.add_grad(gu if ru == R else gu[0:1])
        if vz is not None:
            gz = np.where(mask[None], 0.0, g)
            vz.add_grad(gz if rz == R else gz[0:1])

    tape.record("where", out, pb)
    return out


def take_per_dim(table: Var, idx: np.ndarray) -> Var:
    """Gather table[0, j, idx[b, j]] -> (1, B, d). Indices are constants."""
    if table.E.shape[0] != 1:
        raise ValueError("lookup tables must be channel-less")
    d = table.E.shape[1]
    B = idx.shape[0]
    cols = np.broadcast_to(np.arange(d)[None, :], (B, d))
    E = table.E[0][cols, idx][None]
    out = Var(table.tape, E)

    def pb(g):
        gt = np.zeros_like(table.E[0])
        np.add.at(gt, (cols, idx), g[0])
        table.add_grad(gt[None])

    table.tape.record("gather", out, pb)
    return out


def component(u: Var, row: int) -> Var:
    """Extract one derivative-channel row as a channel-less variable."""
    if not 0 <= row < u.E.shape[0]:
        raise ValueError("row out of range")
    out = Var(u.tape, u.E[row:row + 1])

    def pb(g):
        gu = np.zeros_like(u.E)
        gu[row] = g[0]
        u.add_grad(gu)

    u.tape.record("component", out, pb)
    return out


def reshape_base(u: Var, shape: tuple) -> Var:
    Eu = u.E
    E = Eu.reshape(Eu.shape[:1] + tuple(shape))
    out = Var(u.tape, E)

    def pb(g):
        u.add_grad(g.reshape(Eu.shape))

    u.tape.record("reshape", out, pb)
    return out


def spatial_derivs(f, x: np.ndarray, i: int, j: int, params=None):
    """Value, d/dx_i and d²/dx_i dx_j of a scalar field along a batch.

    ``f(xvar, params)`` (or ``f(xvar)`` when params is None) must be built
    from engine ops and return a variable with base shape (B,). Returns three
    channel-less variables on the same tape; anything computed from them
    remains differentiable with respect to recorded leaves. Use ``.v`` for
    plain numbers.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = x.shape[1]
    if not (0 <= i < d and 0 <= j < d):
        raise IndexError("derivative axis out of range")
    if i == j:
        tape = Tape(dirs=(i,), pairs=((0, 0),))
    else:
        tape = Tape(dirs=(i, j), pairs=((0, 1),))
    xv = spatial_leaf(tape, x)
    out = f(xv) if params is None else f(xv, params)
    value = component(out, 0)
    first = component(out, 1)
    second = component(out, tape.rows - 1)
    return value, first, second
