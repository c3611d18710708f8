"""Dense reverse-mode automatic differentiation on numpy arrays.

The engine records a tape of :class:`Tensor` nodes while operations run and
replays it backwards in :func:`backward`.  It covers exactly the operations
needed by the recurrent imputer and the classifier heads; shapes must match
exactly except for adding a bias vector over the rows of a matrix.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NumericalError",
    "Tensor",
    "as_tensor",
    "precision",
    "default_dtype",
    "no_grad",
    "grad_enabled",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "linear",
    "sigmoid",
    "tanh",
    "exp",
    "relu",
    "absolute",
    "square",
    "total",
    "mean",
    "concat",
    "slice_cols",
    "repeat_cols",
    "softmax_rows",
    "bce_with_logits",
    "forward_eval",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op: str, a: tuple, b: tuple):
        super().__init__(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")
        self.op = op
        self.shapes = (tuple(a), tuple(b))


class NumericalError(FloatingPointError):
    """A non-finite value appeared where a finite one is required."""


_DTYPE = np.float32
_GRAD = True


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    global _DTYPE
    old, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


@contextlib.contextmanager
def no_grad():
    """Run operations without recording the tape."""
    global _GRAD
    old, _GRAD = _GRAD, False
    try:
        yield
    finally:
        _GRAD = old


def grad_enabled() -> bool:
    return _GRAD


class Tensor:
    """A node of the computation graph.

    Leaves created with ``requires_grad=True`` accumulate gradients in
    :attr:`grad` across calls to :func:`backward` until :meth:`zero_grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple, fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    if _GRAD and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _bias_like(a: Tensor, b: Tensor) -> bool:
    return a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        return _node(a.data + _DTYPE(b), (a,), lambda g: (g,))
    if _is_scalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _node(a.data + b.data, (a, b), lambda g: (g, g))
    if _bias_like(a, b):
        return _node(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    if _bias_like(b, a):
        return _node(a.data + b.data, (a, b), lambda g: (g.sum(axis=0), g))
    raise ShapeError("add", a.shape, b.shape)


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -float(b))
    if _is_scalar(a):
        b = as_tensor(b)
        return _node(_DTYPE(a) - b.data, (b,), lambda g: (-g,))
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("sub", a.shape, b.shape)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = _DTYPE(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        return scale(a, b)
    if _is_scalar(a):
        return scale(b, a)
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        ad, bd = a.data, b.data
        return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad))
    if _bias_like(a, b):
        ad, bd = a.data, b.data
        return _node(ad * bd, (a, b), lambda g: (g * bd, (g * ad).sum(axis=0)))
    if _bias_like(b, a):
        return mul(b, a)
    raise ShapeError("mul", a.shape, b.shape)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    return _node(s, (a,), lambda g: (g * s * (1 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _node(t, (a,), lambda g: (g * (1 - t * t),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return _node(e, (a,), lambda g: (g * e,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _node(np.where(pos, a.data, 0).astype(a.data.dtype, copy=False), (a,), lambda g: (g * pos,))


def clamp_max(a, hi: float) -> Tensor:
    """``min(a, hi)`` elementwise; the gradient is zero where clamped."""
    a = as_tensor(a)
    keep = a.data < hi
    return _node(np.where(keep, a.data, hi).astype(a.data.dtype, copy=False), (a,), lambda g: (g * keep,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sgn = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (g * sgn,))


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _node(x * x, (a,), lambda g: (2 * g * x,))


# ------------------------------------------------------------------- linear


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` for ``x`` [N, in], ``w`` [in, out], ``b`` [out]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("linear", x.shape, w.shape)
    xd, wd = x.data, w.data
    if b is None:
        return _node(xd @ wd, (x, w), lambda g: (g @ wd.T, xd.T @ g))
    b = as_tensor(b)
    if b.shape != (w.shape[1],):
        raise ShapeError("linear", w.shape, b.shape)
    return _node(xd @ wd + b.data, (x, w, b), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


# -------------------------------------------------------------- reductions


def total(a) -> Tensor:
    a = as_tensor(a)
    shape, dt = a.shape, a.data.dtype
    return _node(np.asarray(a.data.sum(), dtype=dt), (a,), lambda g: (np.full(shape, g, dtype=dt),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    return scale(total(a), 1.0 / a.data.size)


# ------------------------------------------------------------------ shaping


def concat(parts: Sequence, axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    ref = parts[0].shape
    for p in parts[1:]:
        if p.data.ndim != len(ref) or any(
            p.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)
        ):
            raise ShapeError("concat", ref, p.shape)
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])
    data = np.concatenate([p.data for p in parts], axis=axis)

    def fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts))
        )

    return _node(data, tuple(parts), fn)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _node(a.data[:, start:stop].copy(), (a,), fn)


def repeat_cols(a, k: int) -> Tensor:
    """Tile a column vector [N, 1] into [N, k]."""
    a = as_tensor(a)
    if a.data.ndim != 2 or a.shape[1] != 1:
        raise ShapeError("repeat_cols", a.shape, (a.shape[0], k))
    return _node(np.repeat(a.data, k, axis=1), (a,), lambda g: (g.sum(axis=1, keepdims=True),))


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _node(s, (a,), fn)


def bce_with_logits(logits, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=logits.data.dtype).reshape(logits.shape)
    z = logits.data
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    e = np.exp(-np.abs(z))
    p = np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype, copy=False)
    return _node(np.asarray(loss.mean(), dtype=z.dtype), (logits,), lambda g: (g * (p - y) / n,))


# ------------------------------------------------------------------ driving


def forward_eval(root: Tensor) -> np.ndarray:
    """Value of a graph root; values are computed eagerly as operations run."""
    if not np.all(np.isfinite(root.data)):
        raise NumericalError(f"non-finite value in graph root {root!r}")
    return root.data


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor] | None = None) -> dict:
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf.

    Returns a map from parameter name to its accumulated gradient.  When
    ``params`` is given, only those parameters appear in the map; otherwise
    every named leaf reached from ``loss`` does.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: list[Tensor] = []
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is not None:
                node.grad += g
                leaves.append(node)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if pg.shape != parent.data.shape:
                pg = pg.reshape(parent.data.shape)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    if params is None:
        return {leaf.name: leaf.grad for leaf in leaves if leaf.name is not None}
    if isinstance(params, Mapping):
        return {name: p.grad for name, p in params.items() if p.grad is not None}
    return {p.name: p.grad for p in params if p.grad is not None}


def grad_check(
    f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-3, dtype=np.float64
) -> float:
    """Largest relative disagreement between backprop and central differences.

    ``f`` maps a leaf tensor to a scalar tensor.  The error per coordinate is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.  Both sides
    are evaluated at ``dtype``; float32 captured weights are promoted, so the
    check isolates the derivative rules from float32 rounding noise.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    with precision(dtype):
        x = np.array(x, dtype=dtype)
        leaf = Tensor(x.copy(), requires_grad=True)
        backward(f(leaf))
        analytic = leaf.grad.astype(np.float64).ravel()
        numeric = np.empty_like(analytic)
        flat = x.ravel()
        with no_grad():
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + eps
                up = float(flat[i])
                hi = float(f(Tensor(x)).data)
                flat[i] = old - eps
                down = float(flat[i])
                lo = float(f(Tensor(x)).data)
                flat[i] = old
                # the rounded step, not eps, is what was actually taken
                numeric[i] = (hi - lo) / (up - down)
    if not analytic.size:
        return 0.0
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
