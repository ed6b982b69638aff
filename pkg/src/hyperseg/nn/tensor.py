"""Minimal reverse-mode autodiff over float32 numpy arrays.

Only what the segmenter needs: elementwise arithmetic, matmul, activations,
softmax, reductions, shape ops, 2-D convolution (dense and depthwise),
layer/batch norm, bilinear resizing and a masked sigmoid-BCE loss. Every op
validates that its output is finite; a NaN anywhere is treated as a hard
numerical error rather than something to propagate silently.

Graph recording can be suspended with the ``no_grad`` context manager (used
for validation/inference passes).
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import NumericError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _f32(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32)


def _check(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")
    return data


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _f32(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad: np.ndarray | None = None):
        if grad is None:
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = _f32(grad)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), Tensor(-1.0)))

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(_check(data, op))
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _acc(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    g = _f32(g)
    t.grad = g if t.grad is None else t.grad + g


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
# elementwise and linear algebra
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))
    return _make(a.data + b.data, (a, b), bwd, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))
    return _make(a.data * b.data, (a, b), bwd, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _acc(a, _unbroadcast(ga, a.data.shape))
        _acc(b, _unbroadcast(gb, b.data.shape))
    return _make(np.matmul(a.data, b.data), (a, b), bwd, "matmul")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        _acc(a, g * out_data)
    return _make(out_data, (a,), bwd, "exp")


def log(a: Tensor) -> Tensor:
    def bwd(g):
        _acc(a, g / a.data)
    return _make(np.log(a.data), (a,), bwd, "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        _acc(a, g * mask)
    return _make(a.data * mask, (a,), bwd, "relu")


def sigmoid(a: Tensor) -> Tensor:
    out_data = _sigmoid_np(a.data)

    def bwd(g):
        _acc(a, g * out_data * (1.0 - out_data))
    return _make(out_data, (a,), bwd, "sigmoid")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(g):
        _acc(a, g * (1.0 - out_data * out_data))
    return _make(out_data, (a,), bwd, "tanh")


_GELU_C = np.float32(np.sqrt(2.0 / np.pi))
_GELU_A = np.float32(0.044715)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    u = _GELU_C * (x + _GELU_A * x * x * x)
    th = np.tanh(u)

    def bwd(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        _acc(a, g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du))
    return _make(0.5 * x * (1.0 + th), (a,), bwd, "gelu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _acc(a, out_data * (g - dot))
    return _make(out_data, (a,), bwd, "softmax")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.data.shape))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(gg, a.data.shape))
    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / count))


def reshape(a: Tensor, shape) -> Tensor:
    def bwd(g):
        _acc(a, g.reshape(a.data.shape))
    return _make(a.data.reshape(shape), (a,), bwd, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def bwd(g):
        _acc(a, np.transpose(g, inv))
    return _make(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), bwd, "transpose")


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _acc(t, piece)
    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), bwd, "concat")


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation on NCHW input; weight (O, I, kh, kw), bias (O,)."""
    bsz, cin, h, wdt = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise NumericError(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
    if kh == kw == 1 and stride == 1 and padding == 0:
        return _conv1x1(x, w, b)
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wdt + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise NumericError(f"conv2d output would be empty for input {x.data.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        bsz * oh * ow, cin * kh * kw)
    wf = w.data.reshape(cout, cin * kh * kw)
    out_data = (cols @ wf.T).reshape(bsz, oh, ow, cout).transpose(0, 3, 1, 2)
    if b is not None:
        out_data = out_data + b.data[None, :, None, None]

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(bsz * oh * ow, cout)
        if w.requires_grad:
            _acc(w, (g2.T @ cols).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            _acc(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            if stride == 1:
                # input gradient = correlation of g with the flipped kernel
                gp = np.pad(g, ((0, 0), (0, 0), (kh - 1 - padding, kh - 1 - padding),
                                (kw - 1 - padding, kw - 1 - padding)))
                gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
                gcols = np.ascontiguousarray(gwin.transpose(0, 2, 3, 1, 4, 5)).reshape(
                    bsz * h * wdt, cout * kh * kw)
                wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(
                    cin, cout * kh * kw)
                _acc(x, (gcols @ wflip.T).reshape(bsz, h, wdt, cin).transpose(0, 3, 1, 2))
            else:
                dcols = (g2 @ wf).reshape(bsz, oh, ow, cin, kh, kw)
                dxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + oh * stride : stride,
                            j : j + ow * stride : stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                if padding:
                    dxp = dxp[:, :, padding:padding + h, padding:padding + wdt]
                _acc(x, dxp)

    parents = (x, w) if b is None else (x, w, b)
    return _make(np.ascontiguousarray(out_data), parents, bwd, "conv2d")


def _conv1x1(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """Pointwise convolution as a single GEMM over flattened pixels."""
    bsz, cin, h, wdt = x.data.shape
    cout = w.data.shape[0]
    xf = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(-1, cin)
    wf = w.data.reshape(cout, cin)
    out = xf @ wf.T
    if b is not None:
        out = out + b.data
    out_data = out.reshape(bsz, h, wdt, cout).transpose(0, 3, 1, 2)

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        if w.requires_grad:
            _acc(w, (g2.T @ xf).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            _acc(b, g2.sum(axis=0))
        if x.requires_grad:
            _acc(x, (g2 @ wf).reshape(bsz, h, wdt, cin).transpose(0, 3, 1, 2))

    parents = (x, w) if b is None else (x, w, b)
    return _make(np.ascontiguousarray(out_data), parents, bwd, "conv1x1")


def depthwise_conv3x3(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """Per-channel 3x3 convolution, stride 1, padding 1; weight (C, 3, 3)."""
    bsz, c, h, wdt = x.data.shape
    if w.data.shape != (c, 3, 3):
        raise NumericError(f"depthwise weight must be ({c}, 3, 3), got {w.data.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out_data = np.zeros_like(x.data)
    for i in range(3):
        for j in range(3):
            out_data += w.data[None, :, i, j, None, None] * xp[:, :, i : i + h, j : j + wdt]
    if b is not None:
        out_data = out_data + b.data[None, :, None, None]

    def bwd(g):
        if w.requires_grad:
            dw = np.empty_like(w.data)
            for i in range(3):
                for j in range(3):
                    dw[:, i, j] = np.einsum("bchw,bchw->c", g, xp[:, :, i : i + h, j : j + wdt])
            _acc(w, dw)
        if b is not None and b.requires_grad:
            _acc(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    dxp[:, :, i : i + h, j : j + wdt] += w.data[None, :, i, j, None, None] * g
            _acc(x, dxp[:, :, 1:-1, 1:-1])

    parents = (x, w) if b is None else (x, w, b)
    return _make(out_data, parents, bwd, "depthwise_conv3x3")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = (x.data - mu) * inv
    out_data = gamma.data * xhat + beta.data

    def bwd(g):
        if gamma.requires_grad:
            _acc(gamma, (g * xhat).sum(axis=tuple(range(g.ndim - 1))))
        if beta.requires_grad:
            _acc(beta, g.sum(axis=tuple(range(g.ndim - 1))))
        if x.requires_grad:
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _acc(x, inv * (gx - m1 - xhat * m2))
    return _make(out_data, (x, gamma, beta), bwd, "layer_norm")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """NCHW batch normalization over (N, H, W) per channel.

    In training mode batch statistics normalize the input and the running
    buffers are updated in place; in eval mode the frozen buffers are used.
    """
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.data.size // x.data.shape[1]
        unbiased = var * (m / max(m - 1, 1))
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        running_var *= (1.0 - momentum)
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(np.float32)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(g):
        if gamma.requires_grad:
            _acc(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _acc(beta, g.sum(axis=axes))
        if x.requires_grad:
            gx = g * gamma.data[None, :, None, None]
            if training:
                m = x.data.size // x.data.shape[1]
                m1 = gx.mean(axis=axes)
                m2 = (gx * xhat).mean(axis=axes)
                dx = inv[None, :, None, None] * (
                    gx - m1[None, :, None, None] - xhat * m2[None, :, None, None])
            else:
                dx = gx * inv[None, :, None, None]
            _acc(x, dx)
    return _make(out_data, (x, gamma, beta), bwd, "batch_norm")


# ---------------------------------------------------------------------------
# resizing
# ---------------------------------------------------------------------------

_RESIZE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) bilinear interpolation operator (half-pixel centers)."""
    key = (n_in, n_out)
    cached = _RESIZE_CACHE.get(key)
    if cached is not None:
        return cached
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = (src - i0).astype(np.float32)
    mat = np.zeros((n_out, n_in), dtype=np.float32)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1.0 - t)
    np.add.at(mat, (rows, i1), t)
    _RESIZE_CACHE[key] = mat
    return mat


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear interpolation of NCHW maps to (out_h, out_w)."""
    _, _, h, w = x.data.shape
    rr = _resize_matrix(h, out_h)
    rc = _resize_matrix(w, out_w)
    out_data = np.matmul(rr, np.matmul(x.data, rc.T))

    def bwd(g):
        _acc(x, np.matmul(rr.T, np.matmul(g, rc)))
    return _make(out_data, (x,), bwd, "bilinear_resize")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets: np.ndarray,
                    valid: np.ndarray | None = None,
                    pixel_weights: np.ndarray | None = None) -> Tensor:
    """Mean sigmoid binary cross-entropy over valid pixels and all classes.

    ``logits``/``targets`` are (N, C, H, W); ``valid`` and ``pixel_weights``
    broadcast as (N, 1, H, W). Invalid pixels contribute nothing; weights
    multiply per-pixel terms before the mean.
    """
    z = logits.data
    y = _f32(targets)
    if y.shape != z.shape:
        raise NumericError(f"target shape {y.shape} != logits shape {z.shape}")
    w = np.ones_like(z) if pixel_weights is None else np.broadcast_to(
        _f32(pixel_weights), z.shape)
    if valid is None:
        v = np.ones_like(z)
    else:
        v = np.broadcast_to(_f32(valid), z.shape)
    denom = float(v.sum())
    if denom == 0:
        raise NumericError("no valid pixels for loss")
    elem = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out_data = np.asarray((elem * w * v).sum() / denom, dtype=np.float32)

    def bwd(g):
        _acc(logits, g * (_sigmoid_np(z) - y) * w * v / np.float32(denom))
    return _make(out_data, (logits,), bwd, "bce_with_logits")
