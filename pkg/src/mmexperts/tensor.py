"""Small reverse-mode autodiff engine over numpy arrays.

Only the layers needed by the expert / gating networks are provided:
conv2d, maxpool2d, dense, batchnorm, relu, tanh, softmax, log_softmax,
concat, crop_cols, plus the elementwise plumbing the losses need.
Arrays are NCHW for images and (B, n) for vectors.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "ConfigurationError", "NumericError", "no_grad",
    "conv2d", "maxpool2d", "dense", "batchnorm", "relu", "tanh",
    "softmax", "log_softmax", "concat", "crop_cols", "conv_out_size",
    "conv2d_nhwc", "maxpool2d_nhwc", "transpose", "add", "mul", "square", "log", "xlogx",
    "reshape", "getitem", "tsum", "tmean", "scatter_rows",
]


class ConfigurationError(ValueError):
    """Shapes or layer parameters that cannot be wired together."""


class NumericError(ArithmeticError):
    """NaN or Inf produced during a forward or backward pass."""


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- graph ---------------------------------------------------------
    def _topo(self):
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self, grad=None):
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite value in forward output {self.name or ''}".strip())
        if grad is None:
            grad = np.ones_like(self.data)
        order = self._topo()
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is None and node.grad is not None:
                if not np.all(np.isfinite(node.grad)):
                    raise NumericError(f"non-finite gradient for {node.name or 'leaf'}")

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def _as_tensor(x, dtype=np.float32):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), bw)


def mul(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return _result(a.data * c, (a,), lambda g: (_unbroadcast(g * c, a.shape),))
    av, bv = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return _result(av * bv, (a, b), bw)


def square(x):
    v = x.data
    return _result(v * v, (x,), lambda g: (2.0 * v * g,))


def log(x):
    v = x.data
    return _result(np.log(v), (x,), lambda g: (g / v,))


def xlogx(x):
    """x * log(x) with the 0 * log 0 = 0 convention (gradient 0 there too)."""
    v = x.data
    pos = v > 0
    safe = np.where(pos, v, 1.0)
    out = np.where(pos, v * np.log(safe), 0.0).astype(v.dtype)

    def bw(g):
        return (np.where(pos, g * (np.log(safe) + 1.0), 0.0).astype(v.dtype),)

    return _result(out, (x,), bw)


def relu(x):
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def tanh(x):
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def reshape(x, shape):
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def getitem(x, idx):
    shape, dtype = x.shape, x.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        out[idx] = g
        return (out,)

    return _result(x.data[idx], (x,), bw)


def tsum(x, axis=None):
    shape = x.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis)), (x,), bw)


def tmean(x, axis=None):
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def concat(parts, axis=-1):
    """Concatenate tensors along ``axis``; gradient is split back."""
    parts = [_as_tensor(p) for p in parts]
    ax = axis % parts[0].data.ndim
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        sl = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[ax] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return tuple(out)

    return _result(np.concatenate([p.data for p in parts], axis=ax), parts, bw)


def crop_cols(x, start, width):
    """Column slice ``[start, start + width)`` of the last axis.

    ``start`` may be an int or a per-sample integer array (leading axis).
    The crop position itself carries no gradient.
    """
    W = x.shape[-1]
    if width > W:
        raise ConfigurationError(f"crop width {width} exceeds input width {W}")
    starts = np.asarray(start)
    if starts.ndim == 0:
        s = int(np.clip(int(starts), 0, W - width))
        shape = x.shape

        def bw(g):
            out = np.zeros(shape, dtype=g.dtype)
            out[..., s:s + width] = g
            return (out,)

        return _result(x.data[..., s:s + width], (x,), bw)
    starts = np.clip(starts.astype(np.int64), 0, W - width)
    if starts.shape[0] != x.shape[0]:
        raise ConfigurationError("one crop start per sample required")
    cols = starts[:, None] + np.arange(width)[None, :]
    data = np.stack([x.data[i][..., cols[i]] for i in range(x.shape[0])])
    shape = x.shape

    def bw_batch(g):
        out = np.zeros(shape, dtype=g.dtype)
        for i in range(shape[0]):
            out[i][..., cols[i]] = g[i]
        return (out,)

    return _result(data, (x,), bw_batch)


def scatter_rows(parts, rows, n):
    """Place ``parts[k]`` at row indices ``rows[k]`` of an (n, ...) zero tensor.

    Used to reassemble a batch after routing disjoint row groups through
    different subnetworks.
    """
    parts = [_as_tensor(p) for p in parts]
    rows = [np.asarray(r, dtype=np.int64) for r in rows]
    tail = parts[0].shape[1:]
    out = np.zeros((n,) + tail, dtype=parts[0].dtype)
    for p, r in zip(parts, rows):
        if p.shape[0] != len(r) or p.shape[1:] != tail:
            raise ConfigurationError(f"scatter_rows: part {p.shape} does not fit rows {len(r)}")
        out[r] = p.data

    def bw(g):
        return tuple(g[r] for r in rows)

    return _result(out, parts, bw)


# -- dense / softmax --------------------------------------------------------

def dense(x, w, b=None):
    """Affine map ``x @ w.T + b`` with w of shape (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise ConfigurationError(
            f"dense: input features {x.shape[-1]} do not match weight columns {w.shape[1]}")
    xv, wv = x.data, w.data
    out = xv @ wv.T
    parents = [x, w]
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ConfigurationError(f"dense: bias shape {b.shape} != ({w.shape[0]},)")
        out = out + b.data
        parents.append(b)

    def bw(g):
        gx = g @ wv if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xv.reshape(-1, xv.shape[-1]) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out, parents, bw)


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), bw)


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), bw)


# -- convolution / pooling --------------------------------------------------

def conv_out_size(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d_nhwc(x, w, b=None, stride=(1, 1), pad=(0, 0)):
    """Channels-last convolution: x (N, H, W, C), w (C_out, C_in, kh, kw)."""
    N, H, W, C = x.shape
    Co, Ci, kh, kw = w.shape
    if C != Ci:
        raise ConfigurationError(f"conv2d: input has {C} channels, weight expects {Ci}")
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    Ho, Wo = conv_out_size(H, kh, sh, ph), conv_out_size(W, kw, sw, pw)
    if Ho < 1 or Wo < 1:
        raise ConfigurationError(f"conv2d: input {H}x{W} too small for kernel {kh}x{kw}")
    xp = x.data
    if ph or pw:
        xp = np.pad(xp, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    Hp, Wp = xp.shape[1], xp.shape[2]
    if kh == kw == 1:
        cols = np.ascontiguousarray(xp[:, : (Ho - 1) * sh + 1: sh, : (Wo - 1) * sw + 1: sw, :]).reshape(-1, C)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, : (Ho - 1) * sh + 1: sh, : (Wo - 1) * sw + 1: sw]
        # (N, Ho, Wo, C, kh, kw) -> rows ordered (kh, kw, C)
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(N * Ho * Wo, kh * kw * C)
    wmat = np.ascontiguousarray(w.data.transpose(0, 2, 3, 1)).reshape(Co, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = out.reshape(N, Ho, Wo, Co)
    parents = [x, w] + ([b] if b is not None else [])

    def bw(g):
        g2 = g.reshape(-1, Co)
        gw = None
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(Co, kh, kw, C).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(N, Ho, Wo, kh, kw, C)
            gxp = np.zeros((N, Hp, Wp, C), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i: i + sh * (Ho - 1) + 1: sh, j: j + sw * (Wo - 1) + 1: sw] += gcols[:, :, :, i, j]
            gx = gxp[:, ph: ph + H, pw: pw + W]
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out, parents, bw)


def maxpool2d_nhwc(x, kernel=(2, 2), stride=None, pad=(0, 0)):
    """Channels-last max pooling; -inf padding, ties go to the first element."""
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    ph, pw = _pair(pad)
    N, H, W, C = x.shape
    Ho, Wo = conv_out_size(H, kh, sh, ph), conv_out_size(W, kw, sw, pw)
    if Ho < 1 or Wo < 1:
        raise ConfigurationError(f"maxpool2d: kernel {kh}x{kw} does not fit input {H}x{W}")
    xp = x.data
    if ph or pw:
        xp = np.pad(xp, ((0, 0), (ph, ph), (pw, pw), (0, 0)), constant_values=-np.inf)
    Hp, Wp = xp.shape[1], xp.shape[2]
    if (kh, kw) == (sh, sw) and not (ph or pw):
        blocks = xp[:, : Ho * kh, : Wo * kw].reshape(N, Ho, kh, Wo, kw, C)
        flat = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(N, Ho, Wo, C, kh * kw)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, : (Ho - 1) * sh + 1: sh, : (Wo - 1) * sw + 1: sw]
        flat = win.reshape(N, Ho, Wo, C, kh * kw)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        di, dj = np.divmod(arg, kw)
        rows = np.arange(Ho).reshape(1, Ho, 1, 1) * sh + di
        cols = np.arange(Wo).reshape(1, 1, Wo, 1) * sw + dj
        flat_idx = ((np.arange(N).reshape(N, 1, 1, 1) * Hp + rows) * Wp + cols) * C + np.arange(C)
        gp = np.bincount(flat_idx.ravel(), weights=g.ravel(), minlength=N * Hp * Wp * C)
        gp = gp.reshape(N, Hp, Wp, C).astype(g.dtype)
        return (gp[:, ph: ph + H, pw: pw + W],)

    return _result(out, (x,), bw)


def _nchw_wrap(fn, x, *args, **kw):
    squeeze = x.data.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    y = transpose(fn(transpose(x, (0, 2, 3, 1)), *args, **kw), (0, 3, 1, 2))
    if squeeze:
        y = reshape(y, y.shape[1:])
    return y


def conv2d(x, w, b=None, stride=(1, 1), pad=(0, 0)):
    """2-D cross-correlation with zero padding on (C, H, W) or (N, C, H, W) input.

    Weight is (C_out, C_in, kh, kw). Output size per axis is
    ``floor((n + 2 p - k) / s) + 1``.
    """
    return _nchw_wrap(conv2d_nhwc, x, w, b, stride, pad)


def maxpool2d(x, kernel=(2, 2), stride=None, pad=(0, 0)):
    """Max pooling on (C, H, W) or (N, C, H, W) input."""
    return _nchw_wrap(maxpool2d_nhwc, x, kernel, stride, pad)


def transpose(x, axes):
    inv = np.argsort(axes)
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def batchnorm(x, gamma, beta, running_mean, running_var, train, momentum=0.1, eps=1e-5,
              channel_axis=-1):
    """Per-channel batch normalisation.

    Statistics are taken over every axis except ``channel_axis`` (the last
    one for channels-last images and for (B, n) vectors). ``running_mean``
    and ``running_var`` are numpy arrays, updated in place in train mode.
    """
    v = x.data
    cax = channel_axis % v.ndim
    axes = tuple(a for a in range(v.ndim) if a != cax)
    bshape = [1] * v.ndim
    bshape[cax] = -1
    if train:
        if v.shape[0] < 2:
            raise ConfigurationError("batchnorm in train mode needs batch size >= 2")
        mu = v.mean(axis=axes)
        var = v.var(axis=axes)
        n = v.size // v.shape[cax]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(v.dtype).reshape(bshape)
    xhat = (v - mu.astype(v.dtype).reshape(bshape)) * inv
    gv = gamma.data.reshape(bshape)
    out = xhat * gv + beta.data.reshape(bshape)

    def bw(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gv
            if train:
                m1 = gxhat.mean(axis=axes, keepdims=True)
                m2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
                gx = (gxhat - m1 - xhat * m2) * inv
            else:
                gx = gxhat * inv
        return gx, gg, gb

    return _result(out.astype(v.dtype, copy=False), (x, gamma, beta), bw)
