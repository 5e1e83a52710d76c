"""Differentiable NCHW primitives built on :mod:`cspdet.tensor.core`."""
from __future__ import annotations

import math

import numba
import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..errors import InvalidArgument, NumericError
from . import profiler
from .core import Tensor, _sigmoid, as_tensor, make_result, relu, sigmoid, swish

__all__ = [
    "conv2d", "conv_transpose2d", "pool", "apply_activation", "batch_norm",
    "interpolate", "linear", "cross_entropy", "bce_with_logits", "smooth_l1",
    "softmax", "channel_mean", "channel_max",
]


def _check_finite(out: np.ndarray, what: str) -> None:
    if not np.isfinite(out).all():
        raise NumericError(f"{what} produced non-finite values")


# -- convolution --------------------------------------------------------------

def _windows(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Strided view (N, C, Ho, Wo, k, k) over a padded input."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return as_strided(xp, shape=(n, c, ho, wo, k, k),
                      strides=(sn, sc, sh * s, sw * s, sh, sw), writeable=False)


def _out_extent(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation of an NCHW input with an (O, C/groups, K, K) kernel."""
    if x.ndim != 4 or weight.ndim != 4:
        raise InvalidArgument(f"conv2d expects NCHW input and OIKK weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if k != k2:
        raise InvalidArgument("conv2d supports square kernels only")
    if c % groups or o % groups or ci != c // groups:
        raise InvalidArgument(
            f"conv2d channel mismatch: input {c}, weight in {ci}, groups {groups}")
    ho, wo = _out_extent(h, k, stride, padding), _out_extent(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise InvalidArgument(f"kernel {k} larger than padded input {h}x{w}")
    profiler.record_macs(n * o * ho * wo * ci * k * k)

    if groups == 1:
        out = _dense_conv(x, weight, stride, padding, ho, wo)
    elif groups == c and o == c:
        out = _depthwise_conv(x, weight, stride, padding, ho, wo)
    else:
        xs = _split_channels(x, groups)
        ws = _split_channels(weight, groups, axis=0)
        from .core import concat
        out = concat([_dense_conv(xi, wi, stride, padding, ho, wo) for xi, wi in zip(xs, ws)], axis=1)
    if bias is not None:
        out = out + bias.reshape(1, o, 1, 1)
    _check_finite(out.data, "conv2d")
    return out


def _split_channels(t: Tensor, groups: int, axis: int = 1):
    from .core import getitem
    step = t.shape[axis] // groups
    keys = []
    for gi in range(groups):
        key = [slice(None)] * t.ndim
        key[axis] = slice(gi * step, (gi + 1) * step)
        keys.append(tuple(key))
    return [getitem(t, key) for key in keys]


def _pad(a: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))


def _dense_conv(x: Tensor, weight: Tensor, s: int, p: int, ho: int, wo: int) -> Tensor:
    xd, wd = x.data, weight.data
    n, c, h, w = xd.shape
    o, _, k, _ = wd.shape
    if k == 1 and s == 1 and p == 0:
        xf = xd.reshape(n, c, h * w)
        wm = wd.reshape(o, c)
        out = np.matmul(wm, xf).reshape(n, o, h, w)

        def bw1(g):
            gf = g.reshape(n, o, h * w)
            gx = np.matmul(wm.T, gf).reshape(xd.shape) if x.requires_grad else None
            gw = None
            if weight.requires_grad:
                gw = np.tensordot(gf, xf, axes=([0, 2], [0, 2])).reshape(wd.shape)
            return gx, gw

        return make_result(out, (x, weight), bw1)

    xp = _pad(xd, p)
    cols = _windows(xp, k, s, ho, wo).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wm = wd.reshape(o, c * k * k)
    out = (cols @ wm.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(wd.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wm).reshape(n, ho, wo, c, k, k)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, p:p + h, p:p + w] if p else dxp
        return gx, gw

    return make_result(out, (x, weight), bw)


def _depthwise_conv(x: Tensor, weight: Tensor, s: int, p: int, ho: int, wo: int) -> Tensor:
    xd, wd = x.data, weight.data
    h, w = xd.shape[2:]
    xp = _pad(xd, p)
    phases = _polyphase(xp, s)
    wk = np.ascontiguousarray(wd[:, 0])
    out = _dw_forward(phases, wk, s, ho, wo)

    def bw(g):
        dph, gw = _dw_backward(np.ascontiguousarray(g), phases, wk, s)
        gx = None
        if x.requires_grad:
            dxp = np.zeros((xd.shape[0], xd.shape[1], phases.shape[4] * s, phases.shape[5] * s), dtype=g.dtype)
            for a in range(s):
                for b in range(s):
                    dxp[:, :, a::s, b::s] = dph[a, b]
            gx = dxp[:, :, p:p + h, p:p + w]
        return gx, gw.reshape(wd.shape) if weight.requires_grad else None

    return make_result(out, (x, weight), bw)


def _polyphase(xp: np.ndarray, s: int) -> np.ndarray:
    """(s, s, N, C, H/s, W/s) stack with ``out[a, b] = xp[..., a::s, b::s]`` (zero padded)."""
    n, c, h, w = xp.shape
    hs, ws = -(-h // s), -(-w // s)
    if s == 1:
        return np.ascontiguousarray(xp)[None, None]
    full = np.zeros((n, c, hs * s, ws * s), dtype=xp.dtype)
    full[:, :, :h, :w] = xp
    return np.ascontiguousarray(full.reshape(n, c, hs, s, ws, s).transpose(3, 5, 0, 1, 2, 4))


# Depthwise kernels index the polyphase stack so every inner loop is unit-stride.
@numba.njit(cache=True, fastmath=True)
def _dw_forward(ph, wk, s, ho, wo):
    n, c = ph.shape[2], ph.shape[3]
    k = wk.shape[1]
    out = np.zeros((n, c, ho, wo), dtype=ph.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    wv = wk[ch, i, j]
                    di, dj = i // s, j // s
                    src = ph[i % s, j % s, b, ch]
                    for r in range(ho):
                        row = src[r + di]
                        o = out[b, ch, r]
                        for q in range(wo):
                            o[q] += wv * row[q + dj]
    return out


@numba.njit(cache=True, fastmath=True)
def _dw_backward(g, ph, wk, s):
    n, c, ho, wo = g.shape
    k = wk.shape[1]
    dph = np.zeros_like(ph)
    gw = np.zeros_like(wk)
    for b in range(n):
        for ch in range(c):
            for i in range(k):
                for j in range(k):
                    wv = wk[ch, i, j]
                    di, dj = i // s, j // s
                    src = ph[i % s, j % s, b, ch]
                    dst = dph[i % s, j % s, b, ch]
                    acc = 0.0
                    for r in range(ho):
                        row = src[r + di]
                        grow = g[b, ch, r]
                        for q in range(wo):
                            acc += grow[q] * row[q + dj]
                    gw[ch, i, j] += acc
                    for r in range(ho):
                        drow = dst[r + di]
                        grow = g[b, ch, r]
                        for q in range(wo):
                            drow[q + dj] += grow[q] * wv
    return dph, gw


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed convolution with kernel == stride (non-overlapping upsampling).

    ``weight`` has shape (C_in, C_out, k, k).
    """
    n, c, h, w = x.shape
    ci, o, k, _ = weight.shape
    if ci != c:
        raise InvalidArgument(f"conv_transpose2d expects {ci} input channels, got {c}")
    if k != stride:
        raise InvalidArgument("conv_transpose2d supports kernel == stride only")
    profiler.record_macs(n * c * h * w * o * k * k)
    xd, wd = x.data, weight.data
    xf = xd.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    wm = wd.reshape(c, o * k * k)
    y = (xf @ wm).reshape(n, h, w, o, k, k)
    out = np.ascontiguousarray(y.transpose(0, 3, 1, 4, 2, 5).reshape(n, o, h * k, w * k))

    def bw(g):
        gy = g.reshape(n, o, h, k, w, k).transpose(0, 2, 4, 1, 3, 5).reshape(n * h * w, o * k * k)
        gx = (gy @ wm.T).reshape(n, h, w, c).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (xf.T @ gy).reshape(wd.shape) if weight.requires_grad else None
        return gx, gw

    res = make_result(out, (x, weight), bw)
    if bias is not None:
        res = res + bias.reshape(1, o, 1, 1)
    return res


# -- pooling -------------------------------------------------------------------

def pool(x: Tensor, kind: str, kernel: int = 2, stride: int | None = None) -> Tensor:
    """Max/avg pooling without padding, or global pooling to 1x1."""
    n, c, h, w = x.shape
    if kind == "global_avg":
        return x.mean(axis=(2, 3), keepdims=True)
    if kind == "global_max":
        flat = x.reshape(n, c, h * w).max(axis=2, keepdims=True)
        return flat.reshape(n, c, 1, 1)
    stride = stride or kernel
    if kernel > h or kernel > w:
        raise InvalidArgument(f"pool kernel {kernel} larger than input {h}x{w}")
    ho, wo = (h - kernel) // stride + 1, (w - kernel) // stride + 1
    xd = x.data
    win = _windows(xd, kernel, stride, ho, wo)
    if kind == "avg":
        out = win.mean(axis=(4, 5)).astype(xd.dtype, copy=False)
        scale = 1.0 / (kernel * kernel)

        def bw_avg(g):
            dx = np.zeros_like(xd)
            gs = g * scale
            for i in range(kernel):
                for j in range(kernel):
                    dx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gs
            return (dx,)

        return make_result(out, (x,), bw_avg)
    if kind != "max":
        raise InvalidArgument(f"unknown pool kind {kind!r}")
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw_max(g):
        ki, kj = np.divmod(arg, kernel)
        rows = np.arange(ho).reshape(1, 1, ho, 1) * stride + ki
        cols = np.arange(wo).reshape(1, 1, 1, wo) * stride + kj
        plane = np.arange(n * c).reshape(n, c, 1, 1) * (h * w)
        idx = (plane + rows * w + cols).ravel()
        dx = np.bincount(idx, weights=g.ravel(), minlength=n * c * h * w)
        return (dx.reshape(xd.shape).astype(xd.dtype, copy=False),)

    return make_result(np.ascontiguousarray(out), (x,), bw_max)


def channel_mean(x: Tensor) -> Tensor:
    return x.mean(axis=1, keepdims=True)


def channel_max(x: Tensor) -> Tensor:
    return x.max(axis=1, keepdims=True)


# -- activations ------------------------------------------------------------------

def apply_activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "swish":
        return swish(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise InvalidArgument(f"unknown activation {kind!r}")


# -- normalization ------------------------------------------------------------------

class RunningStats:
    """Per-channel running mean/variance updated by an exponential moving average."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: RunningStats, mode: str = "train") -> Tensor:
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise InvalidArgument(f"batch_norm affine length must equal channel count {c}")
    xd = x.data
    eps = state.eps
    if mode == "train":
        m = n * h * w
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        mom = state.momentum
        state.mean[...] = (1 - mom) * state.mean + mom * mu
        unbiased = var * (m / (m - 1)) if m > 1 else var
        state.var[...] = (1 - mom) * state.var + mom * unbiased
    elif mode == "eval":
        m = None
        mu, var = state.mean.astype(xd.dtype), state.var.astype(xd.dtype)
    else:
        raise InvalidArgument(f"batch_norm mode must be train or eval, got {mode!r}")
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    gd = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gd + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        ggamma = np.einsum("nchw,nchw->c", g, xhat) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            if m is None:
                gx = dxhat * inv_std.reshape(1, c, 1, 1)
            else:
                s1 = dxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                s2 = np.einsum("nchw,nchw->c", dxhat, xhat).reshape(1, c, 1, 1)
                gx = (inv_std.reshape(1, c, 1, 1) / m) * (m * dxhat - s1 - xhat * s2)
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), bw)


# -- resampling -----------------------------------------------------------------------

def _resample_matrix(n_in: int, n_out: int, mode: str, dtype) -> np.ndarray:
    """(n_out, n_in) linear map along one axis, half-pixel-center convention."""
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    dst = np.arange(n_out)
    if mode == "nearest":
        src = np.minimum(np.floor((dst + 0.5) * scale).astype(int), n_in - 1)
        mat[dst, src] = 1.0
    elif mode == "bilinear":
        src = np.maximum((dst + 0.5) * scale - 0.5, 0.0)
        i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = src - i0
        np.add.at(mat, (dst, i0), 1.0 - frac)
        np.add.at(mat, (dst, i1), frac)
    elif mode == "area":
        for i in range(n_out):
            lo = int(math.floor(i * scale))
            hi = max(int(math.ceil((i + 1) * scale)), lo + 1)
            mat[i, lo:hi] = 1.0 / (hi - lo)
    else:
        raise InvalidArgument(f"unknown interpolation mode {mode!r}")
    return mat.astype(dtype)


def interpolate(x: Tensor, target_hw: tuple[int, int], mode: str = "nearest") -> Tensor:
    n, c, h, w = x.shape
    th, tw = int(target_hw[0]), int(target_hw[1])
    if th < 1 or tw < 1:
        raise InvalidArgument(f"interpolation target must be positive, got {target_hw}")
    if (th, tw) == (h, w):
        return x
    xd = x.data
    if mode == "nearest" and th % h == 0 and tw % w == 0:
        fy, fx = th // h, tw // w
        out = np.broadcast_to(xd[:, :, :, None, :, None], (n, c, h, fy, w, fx)).reshape(n, c, th, tw)
        return make_result(np.ascontiguousarray(out), (x,),
                           lambda g: (g.reshape(n, c, h, fy, w, fx).sum(axis=(3, 5)),))
    ry = _resample_matrix(h, th, mode, xd.dtype)
    rx = _resample_matrix(w, tw, mode, xd.dtype)
    out = np.matmul(ry, np.matmul(xd, rx.T))

    def bw(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return make_result(out, (x,), bw)


# -- dense layers & losses --------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape (in_features, out_features)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise InvalidArgument(f"linear shape mismatch {x.shape} x {weight.shape}")
    profiler.record_macs(x.shape[0] * weight.shape[0] * weight.shape[1])
    out = x @ weight
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise InvalidArgument(f"linear bias shape {bias.shape} != ({weight.shape[1]},)")
        out = out + bias
    return out


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over rows; ``targets`` are class indices."""
    targets = np.asarray(targets, dtype=np.int64)
    ld = logits.data
    nrows = ld.shape[0]
    if nrows == 0:
        return make_result(np.zeros((), ld.dtype), (logits,), lambda g: (np.zeros_like(ld),))
    p = softmax(ld, axis=1)
    rows = np.arange(nrows)
    loss = -np.log(np.maximum(p[rows, targets], np.finfo(ld.dtype).tiny)).mean()

    def bw(g):
        d = p.copy()
        d[rows, targets] -= 1.0
        return (d * (g / nrows),)

    return make_result(np.asarray(loss, dtype=ld.dtype), (logits,), bw)


def bce_with_logits(logits: Tensor, targets: np.ndarray, reduction: str = "mean") -> Tensor:
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    s = _sigmoid(z)
    if reduction == "mean":
        denom = max(z.size, 1)
        return make_result(np.asarray(per.sum() / denom, dtype=z.dtype), (logits,),
                           lambda g: ((s - t) * (g / denom),))
    if reduction == "sum":
        return make_result(np.asarray(per.sum(), dtype=z.dtype), (logits,), lambda g: ((s - t) * g,))
    return make_result(per, (logits,), lambda g: ((s - t) * g,))


def smooth_l1(pred: Tensor, target: np.ndarray, beta: float = 1.0) -> Tensor:
    """Summed smooth-L1 (Huber with transition at ``beta``)."""
    d = pred.data - np.asarray(target, dtype=pred.dtype)
    ad = np.abs(d)
    if beta > 0:
        quad = ad < beta
        per = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
        grad = np.where(quad, d / beta, np.sign(d))
    else:
        per, grad = ad, np.sign(d)
    return make_result(np.asarray(per.sum(), dtype=pred.dtype), (pred,), lambda g: (grad * g,))
