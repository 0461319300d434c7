"""Dense tensors with reverse-mode automatic differentiation.

A small numpy-backed engine providing exactly the operators the focal
modulation classifier needs: linear maps, depth-wise 2-d convolution, GeLU,
layer normalization, pooling, bilinear resizing and softmax, each with a
hand-written backward rule. Gradients are recorded on a tape of nodes
ordered by creation, so `backward` is a single reverse sweep.

Conventions fixed here and used everywhere else in the package:

* default dtype is float32; float64 is available for gradient-check oracles
  (pass ``dtype=np.float64`` to the factories or feed float64 arrays),
* GeLU is the exact erf form, not the tanh approximation,
* bilinear resizing uses align-corners sampling (output corner pixels map
  onto input corner pixels; a singleton output axis samples coordinate 0),
* depth-wise convolution is a stride-1 cross-correlation with zero
  same-padding.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327

_seq_counter = itertools.count()
_grad_enabled = True


class NumericalError(ArithmeticError):
    """A tensor left the finite-value domain (NaN/Inf) or a norm collapsed."""


class no_grad:
    """Context manager disabling tape recording (evaluation mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional real array plus the tape node that produced it.

    ``data`` is always a float32 or float64 ndarray. ``grad`` is filled in
    by :func:`backward` for every tensor on the path to the loss that has
    ``requires_grad`` set.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(dtype or DEFAULT_DTYPE)
        elif dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self._op = "leaf"
        self._seq = next(_seq_counter)

    # -- basic introspection -------------------------------------------------

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, op={self._op})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _attach(out: Tensor, parents: Sequence[Tensor], op: str, backward: Callable[[], None]) -> Tensor:
    """Record the tape node if grad mode is on and any parent needs it."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def bw():
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _attach(out, (a, b), "add", bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def bw():
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _attach(out, (a, b), "mul", bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)

    def bw():
        if a.requires_grad:
            _accum(a, -out.grad)

    return _attach(out, (a,), "neg", bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data / b.data)

    def bw():
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _attach(out, (a, b), "div", bw)


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))

    def bw():
        if a.requires_grad:
            _accum(a, out.grad * out.data)

    return _attach(out, (a,), "exp", bw)


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))

    def bw():
        if a.requires_grad:
            _accum(a, out.grad / a.data)

    return _attach(out, (a,), "log", bw)


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data))

    def bw():
        if a.requires_grad:
            _accum(a, out.grad * (0.5 / out.data))

    return _attach(out, (a,), "sqrt", bw)


# ---------------------------------------------------------------------------
# reductions and shape surgery
# ---------------------------------------------------------------------------

def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bw():
        if not a.requires_grad:
            return
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _attach(out, (a,), "sum", bw)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])

    def bw():
        if not a.requires_grad:
            return
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape) / a.data.dtype.type(count))

    return _attach(out, (a,), "mean", bw)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def bw():
        if a.requires_grad:
            _accum(a, out.grad.reshape(a.shape))

    return _attach(out, (a,), "reshape", bw)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def bw():
        if a.requires_grad:
            _accum(a, out.grad.transpose(inv))

    return _attach(out, (a,), "transpose", bw)


def moveaxis(a: Tensor, src: int, dst: int) -> Tensor:
    axes = list(range(a.ndim))
    axes.insert(dst % a.ndim, axes.pop(src % a.ndim))
    return transpose(a, axes)


def getitem(a: Tensor, idx) -> Tensor:
    out = Tensor(a.data[idx])

    def bw():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            _accum(a, g)

    return _attach(out, (a,), "getitem", bw)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = Tensor(np.broadcast_to(a.data, shape).copy())

    def bw():
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad, a.shape))

    return _attach(out, (a,), "broadcast", bw)


def pad_bottom_right(a: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Zero-pad the last two axes at the bottom/right edge only."""
    if pad_h == 0 and pad_w == 0:
        return a
    widths = [(0, 0)] * (a.ndim - 2) + [(0, pad_h), (0, pad_w)]
    out = Tensor(np.pad(a.data, widths))
    h, w = a.shape[-2], a.shape[-1]

    def bw():
        if a.requires_grad:
            _accum(a, out.grad[..., :h, :w])

    return _attach(out, (a,), "pad", bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw():
        g = out.grad
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(lo), int(hi))
                _accum(t, g[tuple(sl)])

    return _attach(out, tuple(tensors), "concat", bw)


# ---------------------------------------------------------------------------
# neural operators
# ---------------------------------------------------------------------------

def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ W.T + b along the trailing dimension of x.

    x: [..., in], W: [out, in], b: [out] or None.
    """
    x, W = _as_tensor(x), _as_tensor(W)
    if x.shape[-1] != W.shape[-1]:
        raise ValueError(
            f"linear: trailing dim of x is {x.shape[-1]}, W expects {W.shape[-1]}"
        )
    y = x.data @ W.data.T
    if b is not None:
        b = _as_tensor(b)
        y = y + b.data
    out = Tensor(y)
    parents = (x, W) if b is None else (x, W, b)

    def bw():
        g = out.grad
        g2 = g.reshape(-1, W.shape[0])
        if x.requires_grad:
            _accum(x, (g2 @ W.data).reshape(x.shape))
        if W.requires_grad:
            _accum(W, g2.T @ x.data.reshape(-1, x.shape[-1]))
        if b is not None and b.requires_grad:
            _accum(b, g2.sum(axis=0))

    return _attach(out, parents, "linear", bw)


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU: x * Phi(x) with Phi the standard normal CDF (erf form)."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * x.dtype.type(_INV_SQRT2)))
    out = Tensor(x.data * cdf)

    def bw():
        if x.requires_grad:
            pdf = np.exp(-0.5 * x.data * x.data) * x.dtype.type(_INV_SQRT2PI)
            _accum(x, out.grad * (cdf + x.data * pdf))

    return _attach(out, (x,), "gelu", bw)


def _dwconv_raw(x4: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Stride-1 depth-wise cross-correlation with zero same-padding.

    x4: [B, C, H, W], k: [C, kh, kw].
    """
    kh, kw = k.shape[-2], k.shape[-1]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x4, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return np.einsum("bchwuv,cuv->bchw", win, k, optimize=True)


def dwconv2d(x: Tensor, k: Tensor) -> Tensor:
    """Depth-wise 2-d convolution: each channel sees only its own kernel.

    x: [C, H, W] or [B, C, H, W]; k: [C, kh, kw] with odd kh, kw.
    Spatial size is preserved by zero same-padding.
    """
    x, k = _as_tensor(x), _as_tensor(k)
    if k.ndim != 3:
        raise ValueError(f"dwconv2d: kernel must be [C, kh, kw], got {k.shape}")
    kh, kw = k.shape[1], k.shape[2]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"dwconv2d: kernel sizes must be odd, got ({kh}, {kw})")
    squeeze = x.ndim == 3
    x4 = x.data[None] if squeeze else x.data
    if x4.ndim != 4 or x4.shape[1] != k.shape[0]:
        raise ValueError(
            f"dwconv2d: input {x.shape} incompatible with kernel {k.shape}"
        )
    y = _dwconv_raw(x4, k.data)
    out = Tensor(y[0] if squeeze else y)

    def bw():
        g = out.grad
        g4 = g[None] if squeeze else g
        if x.requires_grad:
            gx = _dwconv_raw(g4, k.data[:, ::-1, ::-1])
            _accum(x, gx[0] if squeeze else gx)
        if k.requires_grad:
            ph, pw = kh // 2, kw // 2
            xp = np.pad(x4, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
            win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
            _accum(k, np.einsum("bchwuv,bchw->cuv", win, g4, optimize=True))

    return _attach(out, (x, k), "dwconv2d", bw)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Zero mean / unit variance over one axis, then affine with gamma/beta.

    gamma and beta are 1-d of length x.shape[axis].
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if eps <= 0:
        raise ValueError("layernorm: eps must be positive")
    ax = axis % x.ndim
    n = x.shape[ax]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ValueError(f"layernorm: gamma/beta must have shape ({n},)")
    bshape = [1] * x.ndim
    bshape[ax] = n
    mu = x.data.mean(axis=ax, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = Tensor(gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape))
    reduce_axes = tuple(i for i in range(x.ndim) if i != ax)

    def bw():
        g = out.grad
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=reduce_axes))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=reduce_axes))
        if x.requires_grad:
            gx_hat = g * gamma.data.reshape(bshape)
            m1 = gx_hat.mean(axis=ax, keepdims=True)
            m2 = (gx_hat * xhat).mean(axis=ax, keepdims=True)
            _accum(x, inv * (gx_hat - m1 - xhat * m2))

    return _attach(out, (x, gamma, beta), "layernorm", bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel mean over the two trailing spatial axes: [..., C, H, W] -> [..., C]."""
    x = _as_tensor(x)
    if x.ndim < 3:
        raise ValueError(f"global_avg_pool: expected [..., C, H, W], got {x.shape}")
    h, w = x.shape[-2], x.shape[-1]
    out = Tensor(x.data.mean(axis=(-2, -1)))

    def bw():
        if x.requires_grad:
            g = out.grad[..., None, None] / x.dtype.type(h * w)
            _accum(x, np.broadcast_to(g, x.shape).copy())

    return _attach(out, (x,), "global_avg_pool", bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along `axis` (max-subtracted, hence shift-invariant)."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bw():
        if x.requires_grad:
            g = out.grad
            _accum(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _attach(out, (x,), "softmax", bw)


def _interp_coeffs(in_len: int, out_len: int, dtype):
    """Align-corners source indices and blend weights for one axis."""
    if out_len < 1:
        raise ValueError("bilinear_resize: output size must be >= 1")
    if in_len == 1 or out_len == 1:
        pos = np.zeros(out_len, dtype=np.float64)
    else:
        pos = np.arange(out_len, dtype=np.float64) * (in_len - 1) / (out_len - 1)
    i0 = np.minimum(pos.astype(np.int64), max(in_len - 2, 0))
    i1 = np.minimum(i0 + 1, in_len - 1)
    w = (pos - i0).astype(dtype)
    return i0, i1, w


def _resize_axis(data: np.ndarray, out_len: int, axis: int) -> np.ndarray:
    i0, i1, w = _interp_coeffs(data.shape[axis], out_len, data.dtype)
    shape = [1] * data.ndim
    shape[axis] = out_len
    w = w.reshape(shape)
    a = np.take(data, i0, axis=axis)
    b = np.take(data, i1, axis=axis)
    # a + (b - a) * w is exact for equal endpoints (constant images resize exactly)
    return a + (b - a) * w


def bilinear_resize_array(data: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain-array bilinear resize of the two trailing axes (align-corners)."""
    return _resize_axis(_resize_axis(data, out_h, data.ndim - 2), out_w, data.ndim - 1)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the two trailing axes under align-corners sampling."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ValueError(f"bilinear_resize: expected at least 2 axes, got {x.shape}")
    out = Tensor(bilinear_resize_array(x.data, out_h, out_w))
    in_h, in_w = x.shape[-2], x.shape[-1]

    def bw():
        if not x.requires_grad:
            return
        g = out.grad
        # adjoint of the two separable interpolations, applied in reverse
        for axis, in_len in ((x.ndim - 1, in_w), (x.ndim - 2, in_h)):
            i0, i1, w = _interp_coeffs(in_len, g.shape[axis], g.dtype)
            gm = np.moveaxis(g, axis, 0)
            acc = np.zeros((in_len,) + gm.shape[1:], dtype=g.dtype)
            wr = w.reshape((-1,) + (1,) * (gm.ndim - 1))
            np.add.at(acc, i0, gm * (1 - wr))
            np.add.at(acc, i1, gm * wr)
            g = np.moveaxis(acc, 0, axis)
        _accum(x, g)

    return _attach(out, (x,), "bilinear_resize", bw)


# ---------------------------------------------------------------------------
# backward sweep
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss, accumulating into `.grad` fields."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._backward is not None:
            nodes.append(t)
            stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq)
    loss.grad = np.ones_like(loss.data)
    for t in reversed(nodes):
        t._backward()


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

class Module:
    """Minimal parameter container with recursive named traversal."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            yield from _walk_params(full, value)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk_params(name: str, value) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk_params(f"{name}.{i}", v)


def trunc_normal(shape, rng: np.random.Generator, std: float = 0.02, dtype=DEFAULT_DTYPE) -> Tensor:
    """Normal(0, std) resampled until within 2 std, as a trainable parameter."""
    vals = rng.normal(0.0, std, size=shape)
    bad = np.abs(vals) > 2 * std
    while bad.any():
        vals[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(vals) > 2 * std
    return Tensor(vals.astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def check_finite(data: np.ndarray, where: str) -> None:
    if not np.isfinite(data).all():
        raise NumericalError(f"non-finite values detected in {where}")


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def numeric_grad(fn: Callable[[], Tensor], t: Tensor, step: float = 1e-5,
                 entries: Iterable[int] | None = None) -> np.ndarray:
    """Central finite differences of a scalar-valued closure w.r.t. `t`.

    Returns a flat array over the checked entries (all of them by default).
    The closure is re-evaluated with the tape disabled.
    """
    idxs = list(range(t.data.size)) if entries is None else list(entries)
    g = np.zeros(len(idxs), dtype=np.float64)
    with no_grad():
        for j, i in enumerate(idxs):
            pos = np.unravel_index(i, t.data.shape)
            orig = t.data[pos]
            t.data[pos] = orig + step
            fp = float(fn().data)
            t.data[pos] = orig - step
            fm = float(fn().data)
            t.data[pos] = orig
            g[j] = (fp - fm) / (2.0 * step)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-ratio error: ||a - b|| / max(||a|| + ||b||, tiny)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def gradient_check(fn: Callable[[], Tensor], tensors: dict[str, Tensor],
                   step: float = 1e-5, max_entries: int | None = None,
                   rng: np.random.Generator | None = None) -> dict[str, float]:
    """Compare analytic gradients of fn() against central differences.

    fn must rebuild the graph from the current tensor values on each call.
    Returns the relative error per named tensor. When `max_entries` is set,
    a seeded random subset of coordinates is checked per tensor.
    """
    for t in tensors.values():
        t.grad = None
    loss = fn()
    backward(loss)
    analytic = {k: (np.zeros_like(t.data) if t.grad is None else t.grad).reshape(-1).copy()
                for k, t in tensors.items()}
    errs = {}
    for k, t in tensors.items():
        n = t.data.size
        if max_entries is not None and n > max_entries:
            rng = rng or np.random.default_rng(0)
            entries = sorted(rng.choice(n, size=max_entries, replace=False).tolist())
        else:
            entries = list(range(n))
        num = numeric_grad(fn, t, step=step, entries=entries)
        errs[k] = relative_error(analytic[k][entries], num)
    return errs
