"""Dense reverse-mode automatic differentiation over numpy arrays.

A :class:`Variable` wraps an ``ndarray`` (the tensor) and records the
operation that produced it. Calling :meth:`Variable.backward` on a scalar
walks the recorded graph in reverse topological order and accumulates
``d loss / d v`` into ``v.grad`` for every reachable variable that
requires a gradient.

Every op here is written against NCHW image layout where that matters.
Default precision is float32; pass float64 arrays (or use
``default_dtype(np.float64)``) for finite-difference gradient checks.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Tensor = np.ndarray

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _get_default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _get_default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def deterministic(enabled: bool = True):
    """Pin BLAS to one thread so reductions run in a fixed order."""
    if not enabled:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - threadpoolctl ships with scipy stacks
        yield
        return
    with threadpool_limits(limits=1):
        yield


class Variable:
    """A tensor node in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Variable):
            data = data.data
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_get_default_dtype())
        self.data: Tensor = arr
        self.grad: Tensor | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Variable, ...] = ()
        self._backward: Callable[[Tensor], Sequence[Tensor | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> Tensor:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Variable":
        return Variable(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def grad_or_zeros(self) -> Tensor:
        return np.zeros_like(self.data) if self.grad is None else self.grad

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Variable(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar output, got shape {self.shape}")
        order = _topological_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.shape:
                    raise RuntimeError(
                        f"gradient shape {g.shape} does not match operand shape {parent.shape}"
                    )
                parent.grad = g if parent.grad is None else parent.grad + g

    # operator sugar
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
        return scale(self, -1.0)


def _topological_order(root: Variable) -> list[Variable]:
    order: list[Variable] = []
    seen: set[int] = set()
    stack: list[tuple[Variable, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_variable(x, like: Variable | None = None) -> Variable:
    if isinstance(x, Variable):
        return x
    if like is not None and np.ndim(x) == 0:
        return Variable(np.asarray(x, dtype=like.dtype))
    return Variable(x)


def _operands(a, b) -> tuple[Variable, Variable]:
    # python scalars adopt the dtype of the other operand
    if isinstance(a, Variable):
        b = as_variable(b, like=a)
    else:
        b = as_variable(b)
        a = as_variable(a, like=b)
    _broadcast_shape(a, b)
    return a, b


def _make(data: Tensor, parents: Iterable[Variable], backward) -> Variable:
    parents = tuple(parents)
    out = Variable(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Variable, b: Variable) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Variable:
    a, b = _operands(a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Variable:
    a, b = _operands(a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Variable:
    a, b = _operands(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Variable:
    a, b = _operands(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def elementwise(a, b, kind: str) -> Variable:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def scale(x: Variable, c: float) -> Variable:
    c = float(c)
    return _make(x.data * x.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def log(x: Variable) -> Variable:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def clip(x: Variable, lo: float, hi: float) -> Variable:
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------- activations

def relu(x: Variable) -> Variable:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Variable, alpha: float = 0.2) -> Variable:
    slope = np.where(x.data > 0, 1.0, alpha).astype(x.dtype)
    return _make(x.data * slope, (x,), lambda g: (g * slope,))


def sigmoid(x: Variable) -> Variable:
    # split by sign so large |x| never overflows exp
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return _make(out, (x,), lambda g: (g * out * (1 - out),))


def tanh(x: Variable) -> Variable:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1 - out * out),))


def activation(x: Variable, kind: str, alpha: float = 0.2) -> Variable:
    if kind == "relu":
        return relu(x)
    if kind == "lrelu":
        return leaky_relu(x, alpha)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- reductions / shape

def sum(x: Variable) -> Variable:  # noqa: A001 - mirrors numpy naming
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Variable) -> Variable:
    n = x.data.size
    return _make(
        np.asarray(x.data.mean()),
        (x,),
        lambda g: (np.full(x.shape, g / n, dtype=x.dtype),),
    )


def reshape(x: Variable, shape: Sequence[int]) -> Variable:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence[Variable], axis: int = 1) -> Variable:
    xs = [as_variable(x) for x in xs]
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g):
        out = []
        for i in range(len(xs)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(idx)])
        return out

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, backward)


def linear(x: Variable, weight: Variable, bias: Variable | None = None) -> Variable:
    """``x @ weight.T + bias`` for 2-D ``x`` of shape (N, in)."""
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward)


# ---------------------------------------------------------------- pooling

def pool_spatial(x: Variable, kind: str) -> Variable:
    """Global avg/max over H×W, giving N×C×1×1."""
    n, c, h, w = x.shape
    if kind == "avg":
        out = x.data.mean(axis=(2, 3), keepdims=True)
        return _make(
            out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).astype(x.dtype),)
        )
    if kind == "max":
        flat = x.data.reshape(n, c, h * w)
        idx = flat.argmax(axis=2)[..., None]  # first occurrence on ties
        out = np.take_along_axis(flat, idx, axis=2).reshape(n, c, 1, 1)

        def backward(g):
            gx = np.zeros_like(flat)
            np.put_along_axis(gx, idx, g.reshape(n, c, 1), axis=2)
            return (gx.reshape(x.shape),)

        return _make(out, (x,), backward)
    raise ValueError(f"unknown pooling kind {kind!r}")


def pool_channel(x: Variable, kind: str) -> Variable:
    """Avg/max over the channel axis, giving N×1×H×W."""
    c = x.shape[1]
    if kind == "avg":
        out = x.data.mean(axis=1, keepdims=True)
        return _make(out, (x,), lambda g: (np.broadcast_to(g / c, x.shape).astype(x.dtype),))
    if kind == "max":
        idx = x.data.argmax(axis=1)[:, None]
        out = np.take_along_axis(x.data, idx, axis=1)

        def backward(g):
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, idx, g, axis=1)
            return (gx,)

        return _make(out, (x,), backward)
    raise ValueError(f"unknown pooling kind {kind!r}")


# ---------------------------------------------------------------- spatial ops

def upsample_nearest(x: Variable, factor: int) -> Variable:
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    if factor == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,))
    n, c, h, w = x.shape
    out = np.broadcast_to(
        x.data[:, :, :, None, :, None], (n, c, h, factor, w, factor)
    ).reshape(n, c, h * factor, w * factor)
    return _make(
        out,
        (x,),
        lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),),
    )


def _normalize_padding(padding) -> tuple[int, int, int, int]:
    if isinstance(padding, (int, np.integer)):
        p = int(padding)
        pads = (p, p, p, p)
    else:
        pads = tuple(int(p) for p in padding)
        if len(pads) != 4:
            raise ValueError("padding must be an int or (top, bottom, left, right)")
    if min(pads) < 0:
        raise ValueError("padding must be >= 0")
    return pads


def _im2col(x: Tensor, kh: int, kw: int, stride: int, pads) -> Tensor:
    """Patch matrix of shape (C*kh*kw, N*Ho*Wo); rows ordered like a flattened kernel."""
    n, c = x.shape[:2]
    pt, pb, pl, pr = pads
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2:4]
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)


def _from_cnhw(m: Tensor, n: int, c: int, h: int, w: int) -> Tensor:
    out = m.reshape(c, n, h, w)
    return out.reshape(n, c, h, w) if n == 1 else np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _to_cnhw(t: Tensor) -> Tensor:
    n, c = t.shape[:2]
    if n == 1:
        return t.reshape(c, -1)
    return np.ascontiguousarray(t.transpose(1, 0, 2, 3)).reshape(c, -1)


def _input_grad_by_correlation(g: Tensor, weight: Tensor, hw, pads) -> Tensor:
    # stride-1 only: dx is g correlated with the flipped, channel-swapped kernel
    n, o, ho, wo = g.shape
    _, c, kh, kw = weight.shape
    h, w = hw
    pt, pb, pl, pr = pads
    flipped = np.ascontiguousarray(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(c, o * kh * kw)
    # full correlation spans padded-input coordinates; crop back to the unpadded input
    cols = _im2col(g, kh, kw, 1, (kh - 1, kh - 1, kw - 1, kw - 1))
    dxp = _from_cnhw(flipped @ cols, n, c, ho + kh - 1, wo + kw - 1)
    return dxp[:, :, pt:pt + h, pl:pl + w]


def _input_grad_by_col2im(dcols: Tensor, xshape, ksize, oshape, stride: int, pads) -> Tensor:
    n, c, h, w = xshape
    kh, kw = ksize
    ho, wo = oshape
    pt, pb, pl, pr = pads
    blocks = dcols.reshape(c, kh, kw, n, ho, wo)
    dxp = np.zeros((c, n, h + pt + pb, w + pl + pr), dtype=dcols.dtype)
    he, we = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + he:stride, j:j + we:stride] += blocks[:, i, j]
    return dxp.transpose(1, 0, 2, 3)[:, :, pt:pt + h, pl:pl + w]


def conv2d(
    x: Variable,
    weight: Variable,
    bias: Variable | None = None,
    stride: int = 1,
    padding=0,
) -> Variable:
    """Cross-correlation of N×C×H×W input with an O×C×kh×kw kernel.

    ``padding`` is zero padding, either symmetric (int) or
    ``(top, bottom, left, right)``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise ValueError(f"input has {c} channels but weight expects {cw} (weight shape {weight.shape})")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"bias shape {bias.shape} does not match {o} output channels")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    pt, pb, pl, pr = _normalize_padding(padding)
    hp, wp = h + pt + pb, w + pl + pr
    if hp < kh or wp < kw:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    cols = _im2col(x.data, kh, kw, stride, (pt, pb, pl, pr))
    wmat = weight.data.reshape(o, c * kh * kw)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = _from_cnhw(out, n, o, ho, wo)

    def backward(g):
        gmat = _to_cnhw(g)
        gw = (gmat @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1 and o < c:
                gx = _input_grad_by_correlation(g, weight.data, (h, w), (pt, pb, pl, pr))
            else:
                gx = _input_grad_by_col2im(wmat.T @ gmat, (n, c, h, w), (kh, kw), (ho, wo), stride, (pt, pb, pl, pr))
        if bias is None:
            return gx, gw
        gb = gmat.sum(axis=1) if bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


def instance_norm(x: Variable, scale_: Variable, offset: Variable, eps: float = 1e-5) -> Variable:
    """Per-sample, per-channel normalization over H×W with affine scale/offset."""
    if x.ndim != 4:
        raise ValueError(f"instance_norm expects N×C×H×W, got {x.shape}")
    c = x.shape[1]
    if scale_.shape != (c,) or offset.shape != (c,):
        raise ValueError(f"scale/offset must have shape ({c},)")
    m = x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv_std
    s = scale_.data.reshape(1, c, 1, 1)
    out = xhat * s + offset.data.reshape(1, c, 1, 1)

    def backward(g):
        gs = (g * xhat).sum(axis=(0, 2, 3)) if scale_.requires_grad else None
        go = g.sum(axis=(0, 2, 3)) if offset.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * s
            gx = (inv_std / m) * (
                m * dxhat
                - dxhat.sum(axis=(2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(2, 3), keepdims=True)
            )
        return gx, gs, go

    return _make(out, (x, scale_, offset), backward)


# ---------------------------------------------------------------- gradient checking

def numeric_gradient(
    fn: Callable[[], Variable],
    param: Variable,
    indices: Iterable[tuple[int, ...]],
    h: float = 1e-5,
) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. selected elements."""
    out = []
    with no_grad():
        for idx in indices:
            orig = param.data[idx]
            param.data[idx] = orig + h
            fp = float(fn().data)
            param.data[idx] = orig - h
            fm = float(fn().data)
            param.data[idx] = orig
            out.append((fp - fm) / (2 * h))
    return np.asarray(out)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradcheck(
    fn: Callable[[], Variable],
    params: Sequence[Variable],
    n_samples: int = 100,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and finite-difference gradients.

    Samples up to ``n_samples`` elements spread across ``params`` (all
    elements when there are fewer).
    """
    for p in params:
        p.zero_grad()
    fn().backward()
    rng = np.random.default_rng(seed)
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    flat = np.arange(total) if total <= n_samples else np.sort(rng.choice(total, n_samples, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for k, p in enumerate(params):
        local = flat[(flat >= offsets[k]) & (flat < offsets[k + 1])] - offsets[k]
        if local.size == 0:
            continue
        idxs = [np.unravel_index(int(i), p.shape) for i in local]
        analytic = np.array([p.grad_or_zeros()[i] for i in idxs])
        numeric = numeric_gradient(fn, p, idxs, h)
        worst = max(worst, float(relative_error(analytic, numeric).max()))
    return worst
