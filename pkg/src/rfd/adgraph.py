"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable quantity in the simulator is a :class:`Var`: a float64
array (0-d for a plain scalar) plus a handle into the active :class:`Tape`.
Complex quantities are :class:`DiffComplex` pairs of real ``Var`` objects, so
all complex derivatives fall out of real composition.

    >>> with Tape() as tape:
    ...     x = register_parameter(3.0)
    ...     g = backward(x * x)
    >>> float(g[x])
    6.0
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ConfigurationError", "CheckpointDivergence", "Tape", "Var", "DiffScalar",
    "DiffComplex", "Gradients", "active_tape", "register_parameter", "backward",
    "checkpoint_scope", "reduce_gradients", "custom", "constant", "stop_gradient",
    "exp", "log", "sqrt", "sin", "cos", "softplus", "clamp_min", "where", "absolute",
    "sum", "mean", "amax", "reshape", "transpose", "stack", "concatenate",
    "segment_sum", "linmap", "matmul", "dot", "cross", "norm", "normalize",
]


class ConfigurationError(RuntimeError):
    """Raised when the tape machinery is used outside a valid context."""


class CheckpointDivergence(RuntimeError):
    """A checkpointed computation produced different values on replay."""


_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


def _unbroadcast(g, shape):
    g = np.asarray(g, dtype=float)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return np.broadcast_to(g, shape).copy() if g.shape != shape else g


class Tape:
    """Append-only record of operations; one per worker thread.

    Nodes are stored as parallel lists (shape, parents, vector-Jacobian
    product). Parents always precede children, so a reverse sweep over node
    ids is a valid topological order.
    """

    def __init__(self, parent: "Tape | None" = None):
        self.parent = parent
        self.clear()

    def clear(self):
        self.shapes: list[tuple] = []
        self.parents: list[tuple] = []
        self.vjps: list = []
        self.parameter_ids: list[int] = []
        self.parameter_names: list = []
        self._imports: dict = {}
        self.import_sources: list = []

    def __len__(self):
        return len(self.shapes)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def _add(self, shape, parents, vjp) -> int:
        self.shapes.append(tuple(shape))
        self.parents.append(parents)
        self.vjps.append(vjp)
        return len(self.shapes) - 1

    def _has_ancestor(self, tape) -> bool:
        t = self.parent
        while t is not None:
            if t is tape:
                return True
            t = t.parent
        return False

    def local_node(self, var: "Var") -> int:
        if var.tape is self:
            return var.node
        if self._has_ancestor(var.tape):
            key = (id(var.tape), var.node)
            node = self._imports.get(key)
            if node is None:
                node = self._add(var.value.shape, (), None)
                self._imports[key] = node
                self.import_sources.append(var)
            return node
        raise ConfigurationError("value was recorded on an unrelated tape")

    def backprop(self, seeds: dict) -> list:
        """Propagate adjoints from ``seeds`` (node id -> array) to every node."""
        adj: list = [None] * len(self.shapes)
        if not seeds:
            return adj
        for node, g in seeds.items():
            g = np.asarray(g, dtype=float).reshape(self.shapes[node])
            adj[node] = g if adj[node] is None else adj[node] + g
        for i in range(max(seeds), -1, -1):
            g = adj[i]
            vjp = self.vjps[i]
            if g is None or vjp is None:
                continue
            pg = vjp(g)
            for pos, pid in self.parents[i]:
                gp = pg[pos]
                if gp is None:
                    continue
                gp = _unbroadcast(gp, self.shapes[pid])
                adj[pid] = gp if adj[pid] is None else adj[pid] + gp
        return adj


class Var:
    """A float64 array that may carry a node on a tape.

    ``node is None`` marks a constant; constants have zero gradient with
    respect to every parameter.
    """

    __slots__ = ("value", "tape", "node")
    __array_ufunc__ = None

    def __init__(self, value, tape: Tape | None = None, node: int | None = None):
        self.value = np.asarray(value, dtype=float)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.value)

    def __float__(self):
        return float(self.value)

    def item(self):
        return self.value.item()

    def __repr__(self):
        tag = "const" if self.node is None else f"node={self.node}"
        return f"Var({np.array2string(self.value, precision=6)}, {tag})"

    def __add__(self, o):
        if isinstance(o, DiffComplex):
            return NotImplemented
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        if isinstance(o, DiffComplex):
            return NotImplemented
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        if isinstance(o, DiffComplex):
            return NotImplemented
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        if isinstance(o, DiffComplex):
            return NotImplemented
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)


DiffScalar = Var


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _live(x) -> bool:
    return isinstance(x, Var) and x.node is not None


def custom(value, inputs: Sequence, vjp: Callable) -> Var:
    """Record a node with an explicit vector-Jacobian product.

    ``vjp(g)`` must return one gradient (or ``None``) per entry of ``inputs``.
    Inputs that are plain arrays or constant ``Var`` objects are ignored.
    """
    value = np.asarray(value, dtype=float)
    live = [(i, x) for i, x in enumerate(inputs) if _live(x)]
    if not live:
        return Var(value)
    tape = active_tape()
    if tape is None:
        tape = live[0][1].tape
    parents = tuple((i, tape.local_node(x)) for i, x in live)
    return Var(value, tape, tape._add(value.shape, parents, vjp))


def constant(x) -> Var:
    return Var(_val(x))


def stop_gradient(x):
    if isinstance(x, DiffComplex):
        return DiffComplex(constant(x.re), constant(x.im))
    return constant(x)


def register_parameter(initial, name=None) -> Var:
    """Create a leaf on the active tape whose gradient ``backward`` reports."""
    tape = active_tape()
    if tape is None:
        raise ConfigurationError("register_parameter needs an active tape")
    value = np.array(initial, dtype=float)
    node = tape._add(value.shape, (), None)
    tape.parameter_ids.append(node)
    tape.parameter_names.append(name)
    return Var(value, tape, node)


class Gradients(dict):
    """Mapping parameter index -> gradient; also indexable by the parameter ``Var``."""

    def __init__(self, data, tape):
        super().__init__(data)
        self._lookup = {node: pid for pid, node in enumerate(tape.parameter_ids)}
        self._tape = tape

    def __getitem__(self, key):
        if isinstance(key, Var):
            if key.tape is not self._tape or key.node not in self._lookup:
                raise KeyError("not a registered parameter of this tape")
            key = self._lookup[key.node]
        return super().__getitem__(key)


def backward(loss) -> Gradients:
    """d(loss)/d(parameter) for every parameter registered on the loss's tape."""
    if isinstance(loss, DiffComplex):
        raise TypeError("loss must be real-valued, got a complex value")
    if not isinstance(loss, Var) or loss.size != 1:
        raise TypeError("loss must be a real scalar Var")
    tape = loss.tape if loss.node is not None else active_tape()
    if tape is None:
        raise ConfigurationError("backward needs a tape")
    adj = tape.backprop({loss.node: 1.0} if loss.node is not None else {})
    out = {}
    for pid, node in enumerate(tape.parameter_ids):
        g = adj[node]
        out[pid] = np.zeros(tape.shapes[node]) if g is None else g
    return Gradients(out, tape)


def reduce_gradients(maps: Sequence[dict]) -> dict:
    """Sum per-worker gradient maps in list order (bitwise reproducible)."""
    out: dict = {}
    for m in maps:
        for k in sorted(m):
            out[k] = np.array(m[k], dtype=float) if k not in out else out[k] + m[k]
    return out


# ---------------------------------------------------------------- primitives


def add(a, b):
    return custom(_val(a) + _val(b), (a, b), lambda g: (g, g))


def sub(a, b):
    return custom(_val(a) - _val(b), (a, b), lambda g: (g, -g))


def mul(a, b):
    av, bv = _val(a), _val(b)
    return custom(av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b):
    av, bv = _val(a), _val(b)
    out = av / bv
    return custom(out, (a, b), lambda g: (g / bv, -g * out / bv))


def neg(a):
    return custom(-_val(a), (a,), lambda g: (-g,))


def power(a, p):
    if isinstance(p, Var):
        raise TypeError("only constant exponents are supported")
    av = _val(a)
    p = float(p)
    if p == 2.0:
        return custom(av * av, (a,), lambda g: (2.0 * g * av,))
    return custom(av ** p, (a,), lambda g: (g * p * av ** (p - 1.0),))


def exp(a):
    y = np.exp(_val(a))
    return custom(y, (a,), lambda g: (g * y,))


def log(a):
    av = _val(a)
    return custom(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a):
    y = np.sqrt(_val(a))
    return custom(y, (a,), lambda g: (g / (2.0 * y),))


def sin(a):
    av = _val(a)
    return custom(np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a):
    av = _val(a)
    return custom(np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def softplus(a):
    av = _val(a)
    return custom(np.logaddexp(0.0, av), (a,), lambda g: (g / (1.0 + np.exp(-av)),))


def clamp_min(a, lo=0.0):
    av = _val(a)
    mask = av > lo
    return custom(np.where(mask, av, lo), (a,), lambda g: (g * mask,))


def absolute(a):
    av = _val(a)
    return custom(np.abs(av), (a,), lambda g: (g * np.sign(av),))


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    return custom(np.where(cond, _val(a), _val(b)), (a, b),
                  lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)))


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    av = _val(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape),)

    return custom(out, (a,), vjp)


def mean(a, axis=None):
    n = _val(a).size if axis is None else _val(a).shape[axis]
    return sum(a, axis=axis) / float(n)


def amax(a):
    """Global maximum; the adjoint goes to the first maximal entry."""
    av = _val(a)
    k = int(np.argmax(av)) if av.size else 0

    def vjp(g):
        z = np.zeros(av.size)
        z[k] = g
        return (z.reshape(av.shape),)

    return custom(av.reshape(-1)[k], (a,), vjp)


def reshape(a, shape):
    av = _val(a)
    return custom(av.reshape(shape), (a,), lambda g: (np.reshape(g, av.shape),))


def transpose(a, axes=None):
    av = _val(a)
    inv = None if axes is None else np.argsort(axes)
    return custom(np.transpose(av, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx):
    av = _val(a)

    def vjp(g):
        z = np.zeros(av.shape)
        np.add.at(z, idx, g)
        return (z,)

    return custom(av[idx], (a,), vjp)


def stack(items, axis=0):
    vals = [_val(x) for x in items]
    out = np.stack(vals, axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(vals)))

    return custom(out, items, vjp)


def concatenate(items, axis=0):
    vals = [_val(x) for x in items]
    cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return custom(np.concatenate(vals, axis=axis), items,
                  lambda g: tuple(np.split(g, cuts, axis=axis)))


def segment_sum(a, segments, n: int):
    """Sum rows of ``a`` into ``n`` buckets given by integer ``segments``."""
    av = _val(a)
    segments = np.asarray(segments, dtype=np.intp)
    out = np.zeros((n,) + av.shape[1:])
    np.add.at(out, segments, av)
    return custom(out, (a,), lambda g: (g[segments],))


def linmap(a, matrix):
    """``matrix @ a`` for a constant (dense or scipy.sparse) matrix."""
    av = _val(a)
    mt = matrix.T
    return custom(matrix @ av, (a,), lambda g: (mt @ g,))


def matmul(a, b):
    av, bv = _val(a), _val(b)
    return custom(av @ bv, (a, b), lambda g: (g @ np.swapaxes(bv, -1, -2),
                                              np.swapaxes(av, -1, -2) @ g))


def dot(a, b):
    """Inner product over the last axis."""
    return sum(a * b, axis=-1)


def cross(a, b):
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def norm(a):
    return sqrt(dot(a, a))


def normalize(a):
    n = norm(a)
    return a / reshape(n, n.shape + (1,))


def _to_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


class DiffComplex:
    """Complex value held as two real tape nodes."""

    __slots__ = ("re", "im")
    __array_ufunc__ = None

    def __init__(self, re, im=0.0):
        self.re = _to_var(re)
        self.im = _to_var(im)
        if self.re.shape != self.im.shape:
            shape = np.broadcast_shapes(self.re.shape, self.im.shape)
            self.re = self.re + np.zeros(shape)
            self.im = self.im + np.zeros(shape)

    @classmethod
    def const(cls, z):
        z = np.asarray(z, dtype=complex)
        return cls(Var(z.real), Var(z.imag))

    @property
    def value(self) -> np.ndarray:
        return self.re.value + 1j * self.im.value

    @property
    def shape(self):
        return self.re.shape

    def __len__(self):
        return len(self.re)

    def __repr__(self):
        return f"DiffComplex({self.value})"

    @staticmethod
    def _lift(o):
        if isinstance(o, DiffComplex):
            return o
        if isinstance(o, Var):
            return DiffComplex(o, 0.0)
        z = np.asarray(o)
        if np.iscomplexobj(z):
            return DiffComplex(z.real, z.imag)
        return DiffComplex(z, 0.0)

    def __add__(self, o):
        o = self._lift(o)
        return DiffComplex(self.re + o.re, self.im + o.im)

    __radd__ = __add__

    def __sub__(self, o):
        o = self._lift(o)
        return DiffComplex(self.re - o.re, self.im - o.im)

    def __rsub__(self, o):
        return self._lift(o) - self

    def __neg__(self):
        return DiffComplex(-self.re, -self.im)

    def __mul__(self, o):
        if isinstance(o, DiffComplex) or np.iscomplexobj(o):
            o = self._lift(o)
            return DiffComplex(self.re * o.re - self.im * o.im,
                               self.re * o.im + self.im * o.re)
        return DiffComplex(self.re * o, self.im * o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, DiffComplex) or np.iscomplexobj(o):
            o = self._lift(o)
            den = o.re * o.re + o.im * o.im
            return DiffComplex((self.re * o.re + self.im * o.im) / den,
                               (self.im * o.re - self.re * o.im) / den)
        return DiffComplex(self.re / o, self.im / o)

    def __rtruediv__(self, o):
        return self._lift(o) / self

    def __getitem__(self, idx):
        return DiffComplex(self.re[idx], self.im[idx])

    def conj(self):
        return DiffComplex(self.re, -self.im)

    def abs2(self) -> Var:
        return self.re * self.re + self.im * self.im

    def sum(self, axis=None):
        return DiffComplex(sum(self.re, axis=axis), sum(self.im, axis=axis))

    def reshape(self, *shape):
        return DiffComplex(self.re.reshape(*shape), self.im.reshape(*shape))

    @property
    def real(self) -> Var:
        return self.re

    @property
    def imag(self) -> Var:
        return self.im


def cexp(z: DiffComplex) -> DiffComplex:
    m = exp(z.re)
    return DiffComplex(m * cos(z.im), m * sin(z.im))


def csqrt(z: DiffComplex) -> DiffComplex:
    """Principal square root; for Im(z) < 0 the result has Im <= 0.

    Recorded as two fused real nodes using dw = dz / (2w), which avoids the
    removable singularity of the half-angle formula on the real axis.
    """
    w = np.sqrt(z.value.astype(complex))
    c = 0.5 / w
    p, q = c.real, c.imag
    re = custom(w.real, (z.re, z.im), lambda g: (g * p, -g * q))
    im = custom(w.imag, (z.re, z.im), lambda g: (g * q, g * p))
    return DiffComplex(re, im)


def csegment_sum(z: DiffComplex, segments, n: int) -> DiffComplex:
    return DiffComplex(segment_sum(z.re, segments, n), segment_sum(z.im, segments, n))


# ------------------------------------------------------------- checkpointing


def _flatten(out):
    if isinstance(out, Var):
        return [out], lambda it: next(it)
    if isinstance(out, DiffComplex):
        return [out.re, out.im], lambda it: DiffComplex(next(it), next(it))
    if isinstance(out, (tuple, list)):
        parts = [_flatten(o) for o in out]
        leaves = [leaf for p in parts for leaf in p[0]]
        kind = type(out)
        return leaves, lambda it: kind(p[1](it) for p in parts)
    if isinstance(out, (int, float, np.ndarray, np.floating)):
        return [Var(out)], lambda it: next(it).value
    raise TypeError(f"cannot checkpoint output of type {type(out).__name__}")


def _run_child(f, outer):
    child = Tape(parent=outer)
    with child:
        out = f()
        leaves, rebuild = _flatten(out)
        # route outer values returned untouched through a child node
        leaves = [custom(x.value, (x,), lambda g: (g,)) if _live(x) and x.tape is not child else x
                  for x in leaves]
    return child, leaves, rebuild


def checkpoint_scope(f: Callable, rtol: float = 1e-9):
    """Evaluate ``f()`` without keeping its interior nodes on the tape.

    Only the outputs survive as one grouped node; on the backward sweep ``f``
    is re-executed on a scratch tape and differentiated there. ``f`` must be
    deterministic: a replay whose values drift by more than ``rtol``
    (relative) raises :class:`CheckpointDivergence`.
    """
    outer = active_tape()
    if outer is None:
        raise ConfigurationError("checkpoint_scope needs an active tape")
    child, leaves, rebuild = _run_child(f, outer)
    values = [x.value.copy() for x in leaves]
    sources = list(child.import_sources)
    flat = np.concatenate([v.ravel() for v in values]) if values else np.zeros(0)
    del child

    def vjp(g):
        replay, leaves2, _ = _run_child(f, outer)
        seeds: dict = {}
        off = 0
        for x, v in zip(leaves2, values):
            got = x.value
            scale = max(float(np.max(np.abs(v), initial=0.0)), 1e-300)
            if got.shape != v.shape or np.max(np.abs(got - v), initial=0.0) > rtol * scale:
                raise CheckpointDivergence("checkpointed function is not deterministic on replay")
            gi = g[off:off + v.size].reshape(v.shape)
            off += v.size
            if _live(x):
                seeds[x.node] = seeds[x.node] + gi if x.node in seeds else gi
        adj = replay.backprop(seeds)
        out = []
        for src in sources:
            node = replay._imports.get((id(src.tape), src.node))
            out.append(None if node is None else adj[node])
        return out

    group = custom(flat, sources, vjp)
    it = []
    off = 0
    for v in values:
        it.append(reshape(group[off:off + v.size], v.shape))
        off += v.size
    return rebuild(iter(it))
