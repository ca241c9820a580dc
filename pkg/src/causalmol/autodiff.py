"""Minimal dense reverse-mode automatic differentiation on top of numpy.

Every op records its parents and a backward closure on the output tensor
(a dynamic tape).  ``backward`` walks the tape in reverse topological order
and returns gradients for the entries of a :class:`ParameterStore`.
"""

from __future__ import annotations

import contextlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ParameterStore",
    "GradientMap",
    "AutodiffError",
    "apply",
    "backward",
    "finite_difference_check",
    "sgd_step",
    "no_grad",
    "constant",
]


class AutodiffError(ValueError):
    """Raised for shape mismatches, non-finite values and misuse of the tape."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (forward-only evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise AutodiffError(f"item() needs a single value, got shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # Operator sugar keeps model code readable.
    def __add__(self, other):
        if np.isscalar(other):
            return shift(self, float(other))
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        if np.isscalar(other):
            return shift(self, -float(other))
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, values: np.ndarray, parents: Sequence[Tensor], grad_fn) -> Tensor:
    if not np.all(np.isfinite(values)):
        raise AutodiffError(f"{op}: non-finite output")
    out = Tensor(values)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise AutodiffError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise AutodiffError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values

    def grad_fn(g):
        return g @ bv.T, av.T @ g

    return _make("matmul", av @ bv, (a, b), grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make("add", a.values + b.values, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make("sub", a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("elementwise_mul", a, b)
    av, bv = a.values, b.values
    return _make("elementwise_mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    return _make("scale", a.values * c, (a,), lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    """Add a python constant elementwise."""
    return _make("shift", a.values + c, (a,), lambda g: (g,))


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply row i of ``x`` (n, d) by ``w[i]`` (n,)."""
    if x.values.ndim != 2 or w.values.ndim != 1 or w.shape[0] != x.shape[0]:
        raise AutodiffError(f"scale_rows: incompatible shapes {x.shape} and {w.shape}")
    xv, wv = x.values, w.values

    def grad_fn(g):
        return g * wv[:, None], np.einsum("ij,ij->i", g, xv)

    return _make("scale_rows", xv * wv[:, None], (x, w), grad_fn)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not xs:
        raise AutodiffError("concat: no inputs")
    nd = xs[0].values.ndim
    ax = axis % nd
    for x in xs[1:]:
        if x.values.ndim != nd or any(
            x.shape[i] != xs[0].shape[i] for i in range(nd) if i != ax
        ):
            raise AutodiffError(f"concat: shape mismatch {[t.shape for t in xs]}")
    sizes = [x.shape[ax] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return np.split(g, splits, axis=ax)

    return _make("concat", np.concatenate([x.values for x in xs], axis=ax), xs, grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    v = x.values
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _make("relu", np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,))


def log(x: Tensor) -> Tensor:
    v = x.values
    if np.any(v <= 0):
        raise AutodiffError("log: input outside domain (must be > 0)")
    return _make("log", np.log(v), (x,), lambda g: (g / v,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.values)
    return _make("exp", out, (x,), lambda g: (g * out,))


def sqrt(x: Tensor) -> Tensor:
    v = x.values
    if np.any(v <= 0):
        raise AutodiffError("sqrt: input outside domain (must be > 0)")
    out = np.sqrt(v)
    return _make("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def normalize_rows(x: Tensor, eps: float = 1e-6) -> Tensor:
    """``x_i / sqrt(|x_i|^2 + eps^2)`` for each row (smooth at the origin)."""
    v = x.values
    n = np.sqrt((v * v).sum(axis=1, keepdims=True) + eps * eps)
    out = v / n

    def grad(g):
        return ((g - out * (g * out).sum(axis=1, keepdims=True)) / n,)

    return _make("normalize_rows", out, (x,), grad)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero where clamping is active."""
    v = x.values
    inside = (v >= lo) & (v <= hi)
    return _make("clip", np.clip(v, lo, hi), (x,), lambda g: (g * inside,))


def softmax(x: Tensor) -> Tensor:
    v = x.values
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("softmax", out, (x,), grad_fn)


def segment_sum(x: Tensor, segments, num_segments: int | None = None) -> Tensor:
    """Sum rows of ``x`` that share a segment id."""
    seg = np.asarray(segments)
    if seg.ndim != 1 or seg.shape[0] != x.shape[0]:
        raise AutodiffError(f"segment_sum: segment ids {seg.shape} do not match input {x.shape}")
    if seg.size and (seg.dtype.kind not in "iu" or seg.min() < 0):
        raise AutodiffError("segment_sum: segment ids must be non-negative integers")
    n = int(num_segments) if num_segments is not None else (int(seg.max()) + 1 if seg.size else 0)
    out = np.zeros((n,) + x.shape[1:])
    np.add.at(out, seg, x.values)
    return _make("segment_sum", out, (x,), lambda g: (g[seg],))


def gather_rows(x: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise AutodiffError(f"gather_rows: index out of range for {x.shape}")

    def grad_fn(g):
        out = np.zeros_like(x.values)
        np.add.at(out, idx, g)
        return (out,)

    return _make("gather_rows", x.values[idx], (x,), grad_fn)


def reduce_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return _make("reduce_sum", np.asarray(x.values.sum()), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def reduce_mean(x: Tensor, axis: int | None = 0) -> Tensor:
    """Mean over ``axis`` (``None`` = all elements)."""
    v = x.values
    if axis is None:
        n = v.size
        return _make("reduce_mean", np.asarray(v.mean()), (x,),
                     lambda g: (np.full(v.shape, float(g) / n),))
    n = v.shape[axis]
    out = v.mean(axis=axis)
    return _make("reduce_mean", out, (x,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), v.shape) / n,))


def reduce_var(x: Tensor, axis: int = 0) -> Tensor:
    """Population variance over ``axis``."""
    v = x.values
    n = v.shape[axis]
    centered = v - v.mean(axis=axis, keepdims=True)
    out = (centered**2).mean(axis=axis)
    return _make("reduce_var", out, (x,),
                 lambda g: (2.0 / n * centered * np.expand_dims(g, axis),))


def broadcast_row(v: Tensor, n: int) -> Tensor:
    """Stack a (d,) vector into an (n, d) matrix."""
    if v.values.ndim != 1:
        raise AutodiffError(f"broadcast_row: expected a vector, got {v.shape}")
    return _make("broadcast_row", np.broadcast_to(v.values, (n, v.shape[0])).copy(), (v,),
                 lambda g: (g.sum(axis=0),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.values.reshape(shape)
    except ValueError as exc:
        raise AutodiffError(f"reshape: cannot reshape {old} to {shape}") from exc
    return _make("reshape", out, (x,), lambda g: (g.reshape(old),))


_OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "elementwise_mul": mul,
    "concat": lambda *xs, axis=-1: concat(xs, axis=axis),
    "sigmoid": sigmoid,
    "relu": relu,
    "log": log,
    "exp": exp,
    "sqrt": sqrt,
    "softmax": softmax,
    "normalize_rows": normalize_rows,
    "segment_sum": segment_sum,
    "reduce_mean": reduce_mean,
    "reduce_var": reduce_var,
    "reduce_sum": reduce_sum,
    "broadcast_row": broadcast_row,
    "gather_rows": gather_rows,
    "scale_rows": scale_rows,
    "clip": clip,
    "reshape": reshape,
}


def apply(op_kind: str, inputs: Sequence, **kwargs) -> Tensor:
    """Dispatch ``op_kind`` by name, e.g. ``apply("segment_sum", [x, ids])``."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise AutodiffError(f"unknown op {op_kind!r}") from None
    return fn(*inputs, **kwargs)


# --------------------------------------------------------------------------
# parameters and backward


class ParameterStore:
    """Ordered mapping of parameter name to trainable :class:`Tensor`."""

    def __init__(self, entries=None, rng_seed: int = 0):
        self.entries: OrderedDict[str, Tensor] = OrderedDict()
        self.rng_seed = int(rng_seed)
        for name, value in (entries or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self.entries:
            raise KeyError(f"duplicate parameter {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t = Tensor(t.values.copy(), requires_grad=True)
        self.entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def names(self) -> list[str]:
        return list(self.entries)

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: v.values for k, v in self.entries.items()}, self.rng_seed)

    def values(self) -> dict[str, np.ndarray]:
        return {k: v.values for k, v in self.entries.items()}

    def num_values(self) -> int:
        return sum(v.values.size for v in self.entries.values())


@dataclass
class GradientMap:
    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def items(self):
        return self.entries.items()

    def scaled(self, c: float) -> "GradientMap":
        return GradientMap({k: v * c for k, v in self.entries.items()})

    def plus(self, other: "GradientMap") -> "GradientMap":
        keys = list(self.entries) + [k for k in other.entries if k not in self.entries]
        out = {}
        for k in keys:
            a, b = self.entries.get(k), other.entries.get(k)
            out[k] = a + b if a is not None and b is not None else (a if b is None else b).copy()
        return GradientMap(out)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: ParameterStore) -> GradientMap:
    """Reverse-mode gradients of a scalar ``loss`` for every entry of ``params``.

    Parameters not reachable from ``loss`` get zero gradients.
    """
    if loss.values.size != 1:
        raise AutodiffError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.values)
        for node in reversed(_toposort(loss)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = np.array(pg, dtype=np.float64).reshape(parent.shape)
    out = {}
    for name, t in params.items():
        g = grads.get(id(t))
        t.grad = np.zeros_like(t.values) if g is None else g
        out[name] = t.grad
    return GradientMap(out)


def sgd_step(params: ParameterStore, grads: GradientMap, lr: float) -> ParameterStore:
    """Return a new store with ``value - lr * grad``.

    Entries missing from ``grads`` are treated as having zero gradient.  The
    input store is never modified, so the old and new parameters coexist.
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    new = ParameterStore(rng_seed=params.rng_seed)
    for name, t in params.items():
        g = grads.entries.get(name)
        if g is not None and g.shape != t.shape:
            raise AutodiffError(f"sgd_step: gradient for {name} has shape {g.shape}, expected {t.shape}")
        new.add(name, t.values - lr * g if g is not None else t.values)
    return new


def finite_difference_check(
    loss_fn: Callable[[ParameterStore], Tensor],
    params: ParameterStore,
    eps: float = 1e-6,
    floor: float = 1e-5,
) -> dict[str, float]:
    """Compare ``backward`` against central differences element by element.

    Returns the worst relative error per parameter, where the relative
    error is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    """
    if not 0 < eps <= 1e-3:
        raise ValueError("eps must lie in (0, 1e-3]")
    base = loss_fn(params)
    again = loss_fn(params)
    if base.item() != again.item():
        raise AutodiffError("finite_difference_check: loss_fn is not deterministic")
    analytic = backward(base, params)
    report = {}
    for name, t in params.items():
        worst = 0.0
        flat = t.values.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = loss_fn(params).item()
            flat[i] = orig - eps
            with no_grad():
                fm = loss_fn(params).item()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            denom = max(abs(ga[i]), abs(num), floor)
            worst = max(worst, abs(ga[i] - num) / denom)
        report[name] = worst
    return report
