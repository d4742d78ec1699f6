"""Minimal reverse-mode differentiation over dense float64 numpy arrays.

Every differentiable operation builds a new :class:`Tensor` whose ``_backward``
closure maps the output gradient to one gradient per parent.  :func:`backward`
walks the graph in reverse topological order and accumulates gradients into
``Tensor.grad``.  Leaf gradients accumulate across calls; callers zero them
between optimizer steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

__all__ = [
    "Tensor",
    "NonFiniteError",
    "NonDeterministicError",
    "GradReport",
    "tensor",
    "parameter",
    "forward_op",
    "backward",
    "detach",
    "grad_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "linear",
    "conv2d",
    "relu",
    "sigmoid",
    "softplus",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "sum",
    "mean",
    "l2_normalize",
    "concat",
    "stack",
    "slice_",
    "reshape",
    "transpose",
    "smooth_l1",
    "bilinear_sample",
]


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf."""


class NonDeterministicError(RuntimeError):
    """A function evaluated twice on identical inputs gave different values."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"
        self.name = name

    # -- array-ish accessors -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operators -------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite output from {op}")
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if np.any(b.data == 0):
        raise NonFiniteError("division by zero")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape (M, D_in) and weight (D_in, D_out)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} x {weight.shape}")
    parents = [x, weight]
    out = x.data @ weight.data
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"linear bias shape {bias.shape} != ({weight.shape[1]},)")
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _make(out, parents, bw, "linear")


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a (C, H, W) map with (O, C, kh, kw) filters."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if stride < 1:
        raise ValueError("conv2d stride must be >= 1")
    if x.ndim != 3 or weight.ndim != 4 or x.shape[0] != weight.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}")
    C, H, W = x.shape
    O, _, kh, kw = weight.shape
    p = padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    Hp, Wp = H + 2 * p, W + 2 * p
    if Hp < kh or Wp < kw:
        raise ValueError("conv2d kernel larger than padded input")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(O, -1)
    out = (cols @ wmat.T).T.reshape(O, Ho, Wo)
    parents = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        out = out + bias.data[:, None, None]
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(O, Ho * Wo)
        gw = (g2 @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2.T @ wmat).reshape(Ho, Wo, C, kh, kw)
            dxp = np.zeros((C, Hp, Wp))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                        dcols[:, :, :, i, j].transpose(2, 0, 1))
            gx = dxp[:, p:p + H, p:p + W] if p else dxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2))

    return _make(out, parents, bw, "conv2d")


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softplus(x) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    x = _as_tensor(x)
    return _make(np.logaddexp(0.0, x.data), (x,), lambda g: (g * _sigmoid(x.data),), "softplus")


def exp(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,), "exp")


def log(x, clamp_min: Optional[float] = None) -> Tensor:
    """Natural log; with ``clamp_min`` the argument is floored and the
    gradient is zero wherever the floor is active."""
    x = _as_tensor(x)
    if clamp_min is None:
        if np.any(x.data <= 0):
            raise NonFiniteError("log of non-positive value")
        return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")
    active = x.data >= clamp_min
    safe = np.where(active, x.data, clamp_min)
    return _make(np.log(safe), (x,), lambda g: (np.where(active, g / safe, 0.0),), "log")


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), bw, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def _check_axis(x: Tensor, axis: int):
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} invalid for shape {x.shape}")


def smooth_l1(x, beta: float = 1.0) -> Tensor:
    """Elementwise 0.5 d^2 / beta for |d| < beta, |d| - 0.5 beta otherwise."""
    x = _as_tensor(x)
    ax = np.abs(x.data)
    small = ax < beta
    out = np.where(small, 0.5 * x.data ** 2 / beta, ax - 0.5 * beta)
    return _make(out, (x,), lambda g: (g * np.where(small, x.data / beta, np.sign(x.data)),),
                 "smooth_l1")


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = axis if isinstance(axis, tuple) else (axis,)
    return tuple(a % ndim for a in axes)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _make(out, (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ValueError("mean over an empty axis")
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return _make(out, (x,), bw, "mean")


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Divide by the l2 norm along ``axis``.  Norms below ``eps`` get ``eps``
    added to the denominator; :func:`tiny_norm_rows` reports where."""
    x = _as_tensor(x)
    _check_axis(x, axis)
    n = np.sqrt((x.data ** 2).sum(axis=axis, keepdims=True))
    d = np.where(n < eps, n + eps, n)
    y = x.data / d
    unit = np.divide(x.data, n, out=np.zeros_like(x.data), where=n > 0)

    def bw(g):
        return (g / d - (g * x.data).sum(axis=axis, keepdims=True) * unit / d ** 2,)

    return _make(y, (x,), bw, "l2_normalize")


def tiny_norm_rows(x, axis: int = -1, eps: float = 1e-12) -> np.ndarray:
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.sqrt((data ** 2).sum(axis=axis)) < eps


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of nothing")
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(ts)))

    return _make(out, ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts], axis=axis)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in items)


def slice_(x, idx) -> Tensor:
    x = _as_tensor(x)
    out = x.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        z = np.zeros_like(x.data)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _make(np.array(out), (x,), bw, "slice")


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


# ---------------------------------------------------------------------------
# sampling


def _interp_matrix(xs: np.ndarray, ys: np.ndarray, H: int, W: int) -> sparse.csr_matrix:
    x = np.clip(np.asarray(xs, dtype=np.float64).ravel(), 0.0, W - 1)
    y = np.clip(np.asarray(ys, dtype=np.float64).ravel(), 0.0, H - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    lx, ly = x - x0, y - y0
    M = x.size
    rows = np.repeat(np.arange(M), 4)
    cols = np.stack([y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1], axis=1).ravel()
    vals = np.stack([(1 - ly) * (1 - lx), (1 - ly) * lx, ly * (1 - lx), ly * lx], axis=1).ravel()
    # duplicate (row, col) pairs at the border are summed by csr construction
    return sparse.csr_matrix((vals, (rows, cols)), shape=(M, H * W))


def bilinear_sample(fmap, xs, ys) -> Tensor:
    """Bilinear samples of a (C, H, W) map at points (xs[i], ys[i]).

    Coordinates are in map cells (x along W, y along H) and are clamped to
    the border.  Returns a (C, M) tensor.  Sample locations are constants.
    """
    fmap = _as_tensor(fmap)
    if fmap.ndim != 3 or fmap.size == 0:
        raise ValueError("bilinear_sample needs a non-empty (C, H, W) map")
    C, H, W = fmap.shape
    S = _interp_matrix(xs, ys, H, W)
    flat = fmap.data.reshape(C, H * W)
    out = (S @ flat.T).T

    def bw(g):
        return (np.asarray((S.T @ g.T).T).reshape(C, H, W),)

    return _make(out, (fmap,), bw, "bilinear_sample")


# ---------------------------------------------------------------------------
# graph control


def detach(t) -> Tensor:
    """Value-identical tensor with no graph edge back to ``t``."""
    t = _as_tensor(t)
    out = Tensor(t.data)
    out.op = "detach"
    return out


def _toposort(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor, params: Optional[Iterable[Tensor]] = None) -> Dict[int, np.ndarray]:
    """Accumulate d(root)/d(tensor) into ``.grad`` of every reachable tensor.

    ``params`` that are unreachable from ``root`` receive a zero gradient.
    Returns a map from ``id(param)`` to its gradient for the given params.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    grads: Dict[int, np.ndarray] = {}
    if root.requires_grad:
        grads[id(root)] = np.ones_like(root.data)
        for node in reversed(_toposort(root)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg
    result = {}
    for p in params or ():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        result[id(p)] = p.grad
    return result


# ---------------------------------------------------------------------------
# dispatch


_OPS: Dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "linear": linear,
    "conv2d": conv2d,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "exp": exp,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "log": log,
    "sum": sum,
    "mean": mean,
    "l2_normalize": l2_normalize,
    "concat": lambda *ts, **kw: concat(ts, **kw),
    "stack": lambda *ts, **kw: stack(ts, **kw),
    "slice": slice_,
    "reshape": reshape,
    "transpose": transpose,
    "smooth_l1": smooth_l1,
    "bilinear_sample": bilinear_sample,
}


def forward_op(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Apply the named operation; ``attrs`` are passed as keyword arguments."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradReport:
    max_rel_error: float
    per_param: List[float]
    passed: bool
    eps: float
    tol: float
    analytic: List[np.ndarray] = field(default_factory=list, repr=False)
    numeric: List[np.ndarray] = field(default_factory=list, repr=False)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               tol: float = 1e-4, atol: float = 1e-8) -> GradReport:
    """Compare backward() gradients of the scalar ``f()`` with central differences.

    The error for each parameter is ``max|a - n| / max(max|a|, max|n|, atol)``,
    i.e. the discrepancy relative to that parameter's gradient scale.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        p.grad = None
    out = f()
    again = f()
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar function")
    if out.item() != again.item():
        raise NonDeterministicError("f returned different values on identical inputs")
    backward(out, params)
    per_param, analytic, numeric = [], [], []
    for p in params:
        a = p.grad.copy()
        n = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError("parameter data must be contiguous")
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            n.reshape(-1)[i] = (fp - fm) / (2 * eps)
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), atol)
        per_param.append(float(np.abs(a - n).max(initial=0.0) / scale))
        analytic.append(a)
        numeric.append(n)
    for p in params:
        p.grad = None
    worst = max(per_param, default=0.0)
    return GradReport(worst, per_param, worst < tol, eps, tol, analytic, numeric)
