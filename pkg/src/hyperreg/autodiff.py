"""Reverse-mode gradient engine over a fixed op vocabulary.

Tensors wrap numpy arrays. While a Tape is active, every op whose inputs
touch a gradient path appends an entry; backward() replays the tape in
reverse execution order. The op set is exactly what the registration
model and its losses need, nothing more.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EPS = 1e-7

_default_dtype = np.float32


def set_default_dtype(dtype):
    global _default_dtype
    _default_dtype = np.dtype(dtype).type


def get_default_dtype():
    return _default_dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the default compute dtype (float64 for checks)."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all arithmetic goes through the module-level ops
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return mul(self, _lift(-1.0))


def _lift(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_default_dtype))


class TapeEntry:
    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out, inputs, bwd):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


class Tape:
    """Wengert list: ordered record of executed ops."""

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._tracked: set[int] = set()

    def __len__(self):
        return len(self.entries)


_ACTIVE: Tape | None = None
_CHECK_FINITE = False


def set_check_finite(flag: bool):
    """Fail fast on non-finite op inputs (off by default for speed)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(flag)


@contextmanager
def record():
    """Activate a fresh tape for the duration of the block."""
    global _ACTIVE
    prev = _ACTIVE
    tape = Tape()
    _ACTIVE = tape
    try:
        yield tape
    finally:
        _ACTIVE = prev


@contextmanager
def no_grad():
    global _ACTIVE
    prev = _ACTIVE
    _ACTIVE = None
    try:
        yield
    finally:
        _ACTIVE = prev


def _tracked(t: Tensor) -> bool:
    if t.requires_grad:
        return True
    return _ACTIVE is not None and id(t) in _ACTIVE._tracked


def _register(out: Tensor, inputs, bwd):
    if _ACTIVE is None:
        return out
    if not any(_tracked(t) for t in inputs):
        return out
    if _CHECK_FINITE:
        for t in inputs:
            if not np.all(np.isfinite(t.data)):
                raise FloatingPointError("non-finite input to differentiable op")
    _ACTIVE.entries.append(TapeEntry(out, tuple(inputs), bwd))
    _ACTIVE._tracked.add(id(out))
    return out


def backward(loss: Tensor, tape: Tape):
    """Populate .grad on every requires_grad leaf reachable from loss.

    Repeated calls accumulate (caller resets grads between steps).
    """
    if loss.data.size != 1:
        raise ValueError("backward target must be scalar")
    if _ACTIVE is not None:
        raise RuntimeError("backward inside an active record() block")
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        _accumulate(loss, adjoint[id(loss)])
    seen = False
    for entry in reversed(tape.entries):
        g = adjoint.pop(id(entry.out), None)
        if g is None:
            continue
        seen = True
        grads = entry.bwd(g)
        for t, gt in zip(entry.inputs, grads):
            if gt is None:
                continue
            if t.requires_grad:
                _accumulate(t, gt)
            prev = adjoint.get(id(t))
            adjoint[id(t)] = gt if prev is None else prev + gt
    if not seen and not loss.requires_grad:
        raise ValueError("loss is not connected to the given tape")


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g.astype(t.data.dtype, copy=False)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient g down to the given (broadcast-source) shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _register(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    return _register(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    return _register(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)
    return _register(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape),
                   _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data @ b.data)

    def bwd(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:  # inner product
            return g * bd, g * ad
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return g @ bd.T, np.outer(ad, g)
        return g @ bd.T, ad.T @ g

    return _register(out, (a, b), bwd)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with x of shape (..., fan_in)."""
    return add(matmul(x, w), b)


# --------------------------------------------------------------- elementwise

def _elementwise(a: Tensor, value: np.ndarray, dfn) -> Tensor:
    out = Tensor(value)
    return _register(out, (a,), lambda g: (g * dfn(),))


def relu(a: Tensor) -> Tensor:
    return _elementwise(a, np.maximum(a.data, 0), lambda: (a.data > 0).astype(a.data.dtype))


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    val = np.where(a.data > 0, a.data, alpha * a.data)
    return _elementwise(a, val, lambda: np.where(a.data > 0, 1.0, alpha).astype(a.data.dtype))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _elementwise(a, t, lambda: 1.0 - t * t)


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _elementwise(a, s, lambda: s * (1.0 - s))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _elementwise(a, e, lambda: e)


def log(a: Tensor) -> Tensor:
    return _elementwise(a, np.log(a.data + EPS), lambda: 1.0 / (a.data + EPS))


def square(a: Tensor) -> Tensor:
    return _elementwise(a, a.data * a.data, lambda: 2.0 * a.data)


def sqrt(a: Tensor) -> Tensor:
    r = np.sqrt(a.data + EPS)
    return _elementwise(a, r, lambda: 0.5 / r)


# ---------------------------------------------------------------- reductions

def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _register(out, (a,), bwd)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else np.prod(
        [a.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(sum_(a, axis=axis, keepdims=keepdims), _lift(1.0 / float(n)))


# ------------------------------------------------------------ shape plumbing

def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _register(out, (a,), lambda g: (g.reshape(a.shape),))


def slice1d(a: Tensor, offset: int, length: int) -> Tensor:
    """Contiguous segment of a flat vector (parameter unpacking)."""
    if a.data.ndim != 1:
        raise ValueError("slice1d expects a flat vector")
    out = Tensor(a.data[offset:offset + length].copy())

    def bwd(g):
        full = np.zeros_like(a.data)
        full[offset:offset + length] = g
        return (full,)

    return _register(out, (a,), bwd)


def concat(tensors, axis=1) -> Tensor:
    datas = [t.data for t in tensors]
    out = Tensor(np.concatenate(datas, axis=axis))
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _register(out, tuple(tensors), bwd)


# ------------------------------------------------------------------- spatial
# Spatial tensors are (N, C, H, W).

def conv2d(x: Tensor, k: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 convolution with zero 'same' padding; kernel (kh, kw, cin, cout)."""
    n, c, h, w = x.shape
    kh, kw, cin, cout = k.shape
    if cin != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, kernel {cin}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # n,c,h,w,kh,kw
    cols = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * w, c * kh * kw)
    kmat = np.ascontiguousarray(k.data.transpose(2, 0, 1, 3)).reshape(c * kh * kw, cout)
    val = cols @ kmat
    if b is not None:
        val = val + b.data
    out = Tensor(val.reshape(n, h, w, cout).transpose(0, 3, 1, 2))

    def bwd(g):
        gflat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * h * w, cout)
        gk = (cols.T @ gflat).reshape(c, kh, kw, cout).transpose(1, 2, 0, 3)
        # input grad = same-padded correlation with the spatially flipped,
        # channel-transposed kernel
        kf = k.data[::-1, ::-1].transpose(0, 1, 3, 2)  # kh,kw,cout,cin
        gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        gcols = sliding_window_view(gp, (kh, kw), axis=(2, 3))
        gcols = np.ascontiguousarray(gcols.transpose(0, 2, 3, 1, 4, 5)).reshape(
            n * h * w, cout * kh * kw)
        kfm = np.ascontiguousarray(kf.transpose(2, 0, 1, 3)).reshape(cout * kh * kw, c)
        gx = (gcols @ kfm).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        gb = None if b is None else gflat.sum(axis=0).reshape(b.shape)
        if b is None:
            return gx, gk
        return gx, gk, gb

    inputs = (x, k) if b is None else (x, k, b)
    return _register(out, inputs, bwd)


def avg_pool2d(x: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    f = factor
    if h % f or w % f:
        raise ValueError("avg_pool2d requires divisible spatial dims")
    val = x.data.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))
    out = Tensor(val)

    def bwd(g):
        g = g[:, :, :, None, :, None] / (f * f)
        return (np.broadcast_to(g, (n, c, h // f, f, w // f, f)).reshape(n, c, h, w).copy(),)

    return _register(out, (x,), bwd)


def upsample2d(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbor upsampling."""
    n, c, h, w = x.shape
    f = factor
    val = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)
    out = Tensor(val)

    def bwd(g):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return _register(out, (x,), bwd)


def diff_x(x: Tensor) -> Tensor:
    """Forward difference along width; replicate boundary (last column 0)."""
    val = np.zeros_like(x.data)
    val[..., :-1] = x.data[..., 1:] - x.data[..., :-1]
    out = Tensor(val)

    def bwd(g):
        gx = np.zeros_like(g)
        gx[..., 1:] += g[..., :-1]
        gx[..., :-1] -= g[..., :-1]
        return (gx,)

    return _register(out, (x,), bwd)


def diff_y(x: Tensor) -> Tensor:
    """Forward difference along height; replicate boundary (last row 0)."""
    val = np.zeros_like(x.data)
    val[..., :-1, :] = x.data[..., 1:, :] - x.data[..., :-1, :]
    out = Tensor(val)

    def bwd(g):
        gx = np.zeros_like(g)
        gx[..., 1:, :] += g[..., :-1, :]
        gx[..., :-1, :] -= g[..., :-1, :]
        return (gx,)

    return _register(out, (x,), bwd)


def spatial_gradient(x: Tensor) -> tuple[Tensor, Tensor]:
    """(d/dx, d/dy) forward differences of each channel."""
    return diff_x(x), diff_y(x)


def bilinear_sample(img: Tensor, disp: Tensor) -> Tensor:
    """Sample img at p + u(p); u = disp channels (x=cols, y=rows), clamped to the grid.

    img (N,C,H,W), disp (N,2,H,W); differentiable w.r.t. both.
    """
    n, c, h, w = img.shape
    if disp.shape != (n, 2, h, w):
        raise ValueError(f"displacement shape {disp.shape} != {(n, 2, h, w)}")
    dt = img.data.dtype
    gy, gx = np.meshgrid(np.arange(h, dtype=dt), np.arange(w, dtype=dt), indexing="ij")
    px = np.clip(gx[None] + disp.data[:, 0], 0.0, w - 1.0)
    py = np.clip(gy[None] + disp.data[:, 1], 0.0, h - 1.0)
    # clamp interacts with gradients: zero where the clamp is active
    active_x = ((gx[None] + disp.data[:, 0]) > 0.0) & ((gx[None] + disp.data[:, 0]) < w - 1.0)
    active_y = ((gy[None] + disp.data[:, 1]) > 0.0) & ((gy[None] + disp.data[:, 1]) < h - 1.0)
    x0 = np.floor(px).astype(np.intp)
    y0 = np.floor(py).astype(np.intp)
    x0 = np.minimum(x0, w - 2)
    y0 = np.minimum(y0, h - 2)
    fx = px - x0
    fy = py - y0
    bidx = np.arange(n)[:, None, None]
    i00 = img.data[bidx, :, y0, x0]        # (n,h,w,c)
    i01 = img.data[bidx, :, y0, x0 + 1]
    i10 = img.data[bidx, :, y0 + 1, x0]
    i11 = img.data[bidx, :, y0 + 1, x0 + 1]
    fxc = fx[..., None]
    fyc = fy[..., None]
    top = i00 * (1 - fxc) + i01 * fxc
    bot = i10 * (1 - fxc) + i11 * fxc
    val = top * (1 - fyc) + bot * fyc      # (n,h,w,c)
    out = Tensor(np.ascontiguousarray(val.transpose(0, 3, 1, 2)))

    def bwd(g):
        gc = g.transpose(0, 2, 3, 1)       # (n,h,w,c)
        w00 = (1 - fxc) * (1 - fyc)
        w01 = fxc * (1 - fyc)
        w10 = (1 - fxc) * fyc
        w11 = fxc * fyc
        gimg = np.zeros_like(img.data)
        bfull = np.broadcast_to(bidx, y0.shape)
        for wt, yy, xx in ((w00, y0, x0), (w01, y0, x0 + 1),
                           (w10, y0 + 1, x0), (w11, y0 + 1, x0 + 1)):
            np.add.at(gimg.transpose(0, 2, 3, 1), (bfull, yy, xx), gc * wt)
        dvdx = ((i01 - i00) * (1 - fyc) + (i11 - i10) * fyc)
        dvdy = ((i10 - i00) * (1 - fxc) + (i11 - i01) * fxc)
        gux = (gc * dvdx).sum(axis=-1) * active_x
        guy = (gc * dvdy).sum(axis=-1) * active_y
        gdisp = np.stack([gux, guy], axis=1)
        return gimg, gdisp

    return _register(out, (img, disp), bwd)


# ------------------------------------------------------------- verification

def check_gradients(f, inputs, h: float = 1e-5) -> float:
    """Max relative error of analytic grads vs central differences.

    f maps a list of Tensors to a scalar Tensor; runs in 64-bit.
    """
    with precision(np.float64):
        xs = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in inputs]
        with record() as tape:
            loss = f(xs)
        backward(loss, tape)
        worst = 0.0
        for x in xs:
            analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
            flat = x.data.reshape(-1)
            numeric = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                with no_grad():
                    fp = f(xs).item()
                flat[i] = orig - h
                with no_grad():
                    fm = f(xs).item()
                flat[i] = orig
                numeric[i] = (fp - fm) / (2 * h)
            an = analytic.reshape(-1)
            denom = np.maximum(1e-8, np.abs(an) + np.abs(numeric))
            worst = max(worst, float(np.max(np.abs(an - numeric) / denom)))
        return worst
