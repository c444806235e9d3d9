"""Reverse-mode automatic differentiation on a recording tape.

Every value is a numpy array (0-d arrays play the role of scalars).  Operations
on :class:`Var` objects are appended to the :class:`Tape` of their operands in
execution order, so the recording order is already a topological order and
:meth:`Tape.backward` is a single reverse sweep.

All functions in this module are dual-mode: called with plain numbers or
arrays they evaluate with exactly the same numpy expressions and return plain
arrays, so value-only evaluation matches taped evaluation bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DomainError",
    "Tape",
    "Var",
    "ParamStore",
    "value_of",
    "is_var",
    "record",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "sigmoid",
    "relu",
    "tanh",
    "sin",
    "cos",
    "square",
    "absolute",
    "softplus",
    "binary_entropy",
    "minimum",
    "maximum",
    "clamp",
    "select",
    "unary",
    "sum",
    "mean",
    "matmul",
    "reshape",
    "getitem",
    "concatenate",
    "stack",
    "exclusive_cumsum",
    "topk_mean",
    "adam_step",
    "grad_check",
    "tape_gradient",
]


class DomainError(ValueError):
    """Raised when a primitive is evaluated outside its domain."""


class Tape:
    """Ordered record of primitive operations.

    Each entry holds the indices of its parent entries and a closure mapping
    the output adjoint to parent adjoints.  Leaves carry a *sink* that receives
    their accumulated adjoint.
    """

    def __init__(self) -> None:
        self._parents: list[tuple[int | None, ...]] = []
        self._backward: list[Callable | None] = []
        self._sinks: list[Callable[[np.ndarray], None] | None] = []
        self._released = False

    def __len__(self) -> int:
        return len(self._parents)

    def _push(self, value, parents, backward, sink=None) -> "Var":
        self._parents.append(tuple(parents))
        self._backward.append(backward)
        self._sinks.append(sink)
        return Var(value, self, len(self._parents) - 1)

    def leaf(self, value, sink: Callable[[np.ndarray], None] | None = None) -> "Var":
        """Register an input.  Without a sink, adjoints accumulate on ``var.grad``."""
        v = self._push(np.asarray(value, dtype=np.float64), (), None)
        if sink is None:
            v.grad = np.zeros_like(v.value)

            def sink(g, _v=v):
                _v.grad = _v.grad + g

        self._sinks[v.index] = sink
        return v

    def backward(self, output: "Var", seed=None, retain: bool = False) -> None:
        """Propagate adjoints from ``output`` into every reachable leaf sink.

        Closures are released after use unless ``retain`` is set; a retained
        tape can be swept again and the sinks accumulate.  Releasing matters:
        closures reference their parent Vars, which reference the tape, so the
        recorded arrays would otherwise wait for the cyclic collector.
        """
        if not isinstance(output, Var) or output.tape is not self:
            raise ValueError("output was not recorded on this tape")
        if self._released:
            raise ValueError("tape already swept; pass retain=True to sweep twice")
        if seed is None:
            seed = np.ones_like(output.value)
        adj: dict[int, np.ndarray] = {output.index: np.asarray(seed, dtype=np.float64)}
        for i in range(output.index, -1, -1):
            g = adj.pop(i, None)
            if g is None:
                continue
            sink = self._sinks[i]
            if sink is not None:
                sink(g)
                continue
            grads = self._backward[i](g)
            for p, gp in zip(self._parents[i], grads):
                if p is None or gp is None:
                    continue
                if p in adj:
                    adj[p] = adj[p] + gp
                else:
                    adj[p] = gp
        if not retain:
            self._backward = [None] * len(self._backward)
            self._released = True


class Var:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "index", "grad")
    __array_priority__ = 100.0

    def __init__(self, value, tape: Tape, index: int) -> None:
        self.value = value
        self.tape = tape
        self.index = index
        self.grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        return f"Var({self.value!r})"

    def __float__(self) -> float:
        return float(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def is_var(x) -> bool:
    return isinstance(x, Var)


def value_of(x) -> np.ndarray:
    """The numeric value of a Var, or ``x`` itself as an array."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(args: Iterable) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def record(value, parents: Sequence, backward: Callable) -> "Var | np.ndarray":
    """Record a custom primitive.

    ``parents`` may contain Vars and constants; ``backward(g)`` must return one
    adjoint (or None) per parent.  Returns ``value`` unchanged when no parent is
    a Var.
    """
    tape = _tape_of(parents)
    if tape is None:
        return value
    idx = tuple(p.index if isinstance(p, Var) else None for p in parents)
    return tape._push(value, idx, backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    return record(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    return record(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    return record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g * bv, av.shape) if isinstance(a, Var) else None,
            _unbroadcast(g * av, bv.shape) if isinstance(b, Var) else None,
        ),
    )


def div(a, b):
    av, bv = value_of(a), value_of(b)
    if np.any(bv == 0):
        raise DomainError("division by zero")
    out = av / bv
    return record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bv, av.shape) if isinstance(a, Var) else None,
            _unbroadcast(-g * out / bv, bv.shape) if isinstance(b, Var) else None,
        ),
    )


def neg(a):
    return record(-value_of(a), (a,), lambda g: (-g,))


def absolute(a):
    """|a|; the subgradient at 0 is taken as +1."""
    av = value_of(a)
    slope = np.where(av >= 0, 1.0, -1.0)
    return record(np.abs(av), (a,), lambda g: (g * slope,))


def square(a):
    av = value_of(a)
    return record(av * av, (a,), lambda g: (2.0 * av * g,))


def exp(a):
    out = np.exp(value_of(a))
    return record(out, (a,), lambda g: (g * out,))


def log(a):
    av = value_of(a)
    if np.any(av <= 0):
        raise DomainError("log of a non-positive value")
    return record(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a):
    av = value_of(a)
    if np.any(av < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(av)
    return record(out, (a,), lambda g: (g * 0.5 / out,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # stable in both tails
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    out = _sigmoid(value_of(a))
    return record(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    """log(1 + e^a), computed without overflow."""
    av = value_of(a)
    out = np.maximum(av, 0.0) + np.log1p(np.exp(-np.abs(av)))
    return record(out, (a,), lambda g: (g * _sigmoid(av),))


def relu(a):
    av = value_of(a)
    mask = av > 0
    return record(np.where(mask, av, 0.0), (a,), lambda g: (g * mask,))


def tanh(a):
    out = np.tanh(value_of(a))
    return record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sin(a):
    av = value_of(a)
    return record(np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a):
    av = value_of(a)
    return record(np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def binary_entropy(p):
    """-p ln p - (1-p) ln(1-p) in nats; zero (with zero slope) at p in {0, 1}."""
    pv = value_of(p)
    if np.any((pv < 0) | (pv > 1)):
        raise DomainError("binary entropy of a value outside [0, 1]")
    inner = (pv > 0) & (pv < 1)
    safe = np.where(inner, pv, 0.5)
    out = np.where(inner, -safe * np.log(safe) - (1.0 - safe) * np.log1p(-safe), 0.0)
    slope = np.where(inner, np.log1p(-safe) - np.log(safe), 0.0)
    return record(out, (p,), lambda g: (g * slope,))


def unary(a, f: Callable[[np.ndarray], np.ndarray], df: Callable[[np.ndarray], np.ndarray]):
    """Elementwise function with a caller-supplied derivative."""
    av = value_of(a)
    return record(f(av), (a,), lambda g: (g * df(av),))


def minimum(a, b):
    """Elementwise min; at ties the gradient goes to ``a``."""
    av, bv = value_of(a), value_of(b)
    first = av <= bv
    out = np.where(first, av, bv)
    return record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * first, av.shape), _unbroadcast(g * ~first, bv.shape)),
    )


def maximum(a, b):
    """Elementwise max; at ties the gradient goes to ``a``."""
    av, bv = value_of(a), value_of(b)
    first = av >= bv
    out = np.where(first, av, bv)
    return record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * first, av.shape), _unbroadcast(g * ~first, bv.shape)),
    )


def clamp(a, lo: float, hi: float):
    """Clip to [lo, hi]; the gradient passes on the closed interval."""
    av = value_of(a)
    mask = (av >= lo) & (av <= hi)
    return record(np.clip(av, lo, hi), (a,), lambda g: (g * mask,))


def select(cond, a, b):
    """``a`` where ``cond`` else ``b``."""
    cond = np.asarray(cond, dtype=bool)
    av, bv = value_of(a), value_of(b)
    out = np.where(cond, av, bv)
    return record(
        out,
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), av.shape), _unbroadcast(np.where(cond, 0.0, g), bv.shape)),
    )


# ---------------------------------------------------------------------------
# reductions and structural ops


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    av = value_of(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return record(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims=False):
    av = value_of(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def matmul(a, b):
    """numpy matmul including batched operands."""
    av, bv = value_of(a), value_of(b)
    out = av @ bv

    def backward(g):
        ga = gb = None
        if isinstance(a, Var):
            if bv.ndim == 1:
                ga = np.multiply.outer(g, bv) if av.ndim > 1 else g * bv
            else:
                ga = g @ np.swapaxes(bv, -1, -2) if av.ndim > 1 else (g[..., None, :] * bv).sum(-1)
            ga = _unbroadcast(ga, av.shape)
        if isinstance(b, Var):
            if av.ndim == 1:
                gb = np.multiply.outer(av, g) if bv.ndim > 1 else g * av
            elif bv.ndim == 1:
                gb = (np.swapaxes(av, -1, -2) @ g[..., None])[..., 0]
            else:
                gb = np.swapaxes(av, -1, -2) @ g
            gb = _unbroadcast(gb, bv.shape)
        return ga, gb

    return record(out, (a, b), backward)


def reshape(a, shape):
    av = value_of(a)
    return record(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def getitem(a, key):
    av = value_of(a)
    out = av[key]

    def backward(g):
        full = np.zeros_like(av)
        np.add.at(full, key, g)
        return (full,)

    return record(np.array(out, dtype=np.float64), (a,), backward)


def concatenate(parts: Sequence, axis: int = 0):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return record(out, tuple(parts), lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(parts: Sequence, axis: int = 0):
    vals = [np.broadcast_to(value_of(p), np.broadcast_shapes(*[value_of(q).shape for q in parts])) for p in parts]
    out = np.stack(vals, axis=axis)
    shapes = [value_of(p).shape for p in parts]

    def backward(g):
        pieces = np.moveaxis(g, axis, 0)
        return tuple(_unbroadcast(pieces[i], shapes[i]) for i in range(len(parts)))

    return record(out, tuple(parts), backward)


def exclusive_cumsum(a, axis: int = -1):
    """out[i] = sum_{j < i} a[j] along ``axis``."""
    av = value_of(a)
    inc = np.cumsum(av, axis=axis)
    out = inc - av

    def backward(g):
        # adjoint of an exclusive prefix sum is an exclusive suffix sum
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        return (rev - g,)

    return record(out, (a,), backward)


def topk_mean(a, k: int):
    """Mean of the ``k`` largest entries of a 1-d array.

    Ties are broken towards the lower index; the subgradient flows only to the
    selected entries.
    """
    av = value_of(a)
    n = av.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    order = np.argsort(-av, kind="stable")
    chosen = order[:k]
    out = np.asarray(np.sum(np.sort(av[chosen])[::-1]) / k)

    def backward(g):
        full = np.zeros_like(av)
        full[chosen] = g / k
        return (full,)

    return record(out, (a,), backward)


# ---------------------------------------------------------------------------
# parameters and optimisation


@dataclass
class _AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class ParamStore:
    """Named parameter arrays with gradient accumulators and Adam state."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    groups: dict[str, list[str]] = field(default_factory=dict)
    state: dict[str, _AdamState] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray, group: str = "default") -> None:
        value = np.ascontiguousarray(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.state[name] = _AdamState(np.zeros_like(value), np.zeros_like(value))
        self.groups.setdefault(group, []).append(name)

    def leaf(self, tape: Tape, name: str) -> Var:
        """A tape leaf whose adjoint accumulates into ``grads[name]``."""

        def sink(g, _name=name):
            self.grads[_name] += g

        return tape.leaf(self.params[name], sink)

    def names(self, group: str) -> list[str]:
        if group not in self.groups:
            raise KeyError(f"unknown parameter group {group!r}")
        return self.groups[group]

    def zero_grad(self, group: str | None = None) -> None:
        for name in self.names(group) if group else self.params:
            self.grads[name][...] = 0.0

    def reset_moments(self, group: str | None = None) -> None:
        for name in self.names(group) if group else self.params:
            st = self.state[name]
            st.m[...] = 0.0
            st.v[...] = 0.0
            st.step = 0

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for group, names in self.groups.items():
            for name in names:
                out.add(name, self.params[name].copy(), group)
                out.grads[name][...] = self.grads[name]
                st = self.state[name]
                out.state[name] = _AdamState(st.m.copy(), st.v.copy(), st.step)
        return out


def adam_step(
    store: ParamStore,
    group: str,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update of every array in ``group``; zeroes its gradients."""
    for name in store.names(group):
        p, g, st = store.params[name], store.grads[name], store.state[name]
        st.step += 1
        # in place, one scratch buffer: the hash tables dominate and are large
        st.m *= beta1
        st.v *= beta2
        tmp = np.multiply(g, 1.0 - beta1)
        st.m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - beta2
        st.v += tmp
        np.sqrt(st.v, out=tmp)
        tmp *= 1.0 / np.sqrt(1.0 - beta2**st.step)
        tmp += eps
        np.divide(st.m, tmp, out=tmp)
        tmp *= lr / (1.0 - beta1**st.step)
        p -= tmp
        g[...] = 0.0


# ---------------------------------------------------------------------------
# gradient checking


def tape_gradient(f: Callable, x) -> tuple[float, np.ndarray]:
    """Value and reverse-mode gradient of a dual-mode scalar function."""
    tape = Tape()
    xv = tape.leaf(np.array(x, dtype=np.float64))
    y = f(xv)
    if not isinstance(y, Var):
        return float(y), np.zeros_like(xv.value)
    tape.backward(y)
    return float(y.value), xv.grad


def grad_check(f: Callable, x, eps: float = 1e-5, analytic=None) -> float:
    """Max relative error between an analytic gradient and central differences.

    ``f`` maps an array to a scalar.  When ``analytic`` is omitted, ``f`` must
    be dual-mode and its gradient is taken from the tape.
    """
    x = np.array(x, dtype=np.float64)
    if analytic is None:
        _, analytic = tape_gradient(f, x)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += eps
        xm[i] -= eps
        fd = (float(value_of(f(xp.reshape(x.shape)))) - float(value_of(f(xm.reshape(x.shape))))) / (2.0 * eps)
        err = abs(analytic.reshape(-1)[i] - fd) / max(1e-8, abs(fd))
        worst = max(worst, err)
    return worst
