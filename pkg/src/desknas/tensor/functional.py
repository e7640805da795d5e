"""Image operations on NCHW tensors: convolution, pooling, normalization, resampling."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ShapeError, Tensor


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _out_size(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride, dilation, ho: int, wo: int) -> np.ndarray:
    sh, sw = stride
    dh, dw = dilation
    view = sliding_window_view(xp, (dh * (kh - 1) + 1, dw * (kw - 1) + 1), axis=(2, 3))
    # (N, C, Hp', Wp', eh, ew) -> strided output positions and dilated taps
    return view[:, :, : sh * (ho - 1) + 1 : sh, : sw * (wo - 1) + 1 : sw, ::dh, ::dw]


def _scatter_windows(dcols: np.ndarray, padded_shape, kh, kw, stride, dilation, ho, wo) -> np.ndarray:
    """Adjoint of :func:`_windows`: add window gradients back onto the padded input."""
    sh, sw = stride
    dh, dw = dilation
    dxp = np.zeros(padded_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i * dh : i * dh + sh * (ho - 1) + 1 : sh,
                j * dw : j * dw + sw * (wo - 1) + 1 : sw] += dcols[..., i, j]
    return dxp


def _unpad(a: np.ndarray, ph: int, pw: int) -> np.ndarray:
    h, w = a.shape[2], a.shape[3]
    return a[:, :, ph : h - ph, pw : w - pw]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0,
           dilation=1, groups: int = 1, name: str = "conv2d") -> Tensor:
    """2-D cross-correlation. ``groups`` must be 1 or equal to the input channel count."""
    if x.ndim != 4:
        raise ShapeError(name, "(N, C, H, W)", x.shape)
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if c != cg * groups:
        raise ShapeError(name, f"(N, {cg * groups}, H, W)", x.shape)
    if groups not in (1, c):
        raise ValueError(f"{name}: groups must be 1 or {c}, got {groups}")
    depthwise = groups == c and groups > 1
    if depthwise and o != c:
        raise ShapeError(name, f"depthwise weight ({c}, 1, kh, kw)", weight.shape)
    stride, padding, dilation = _pair(stride), _pair(padding), _pair(dilation)
    ph, pw = padding
    ho = _out_size(h, kh, stride[0], ph, dilation[0])
    wo = _out_size(w, kw, stride[1], pw, dilation[1])
    if ho < 1 or wo < 1:
        raise ShapeError(name, f"input at least kernel extent {kh}x{kw}", x.shape)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _windows(xp, kh, kw, stride, dilation, ho, wo)
    wd = weight.data
    if depthwise:
        out = np.einsum("nchwij,cij->nchw", cols, wd[:, 0], optimize=True)
        flat = None
    else:
        flat = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
        out = (flat @ wd.reshape(o, -1).T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = gw = gb = None
        if depthwise:
            if weight.requires_grad:
                gw = np.einsum("nchw,nchwij->cij", g, cols, optimize=True)[:, None]
            if x.requires_grad:
                dcols = g[..., None, None] * wd[:, 0][None, :, None, None]
                gx = _unpad(_scatter_windows(dcols, xp.shape, kh, kw, stride, dilation, ho, wo), ph, pw)
        else:
            g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
            if weight.requires_grad:
                gw = (g2.T @ flat).reshape(wd.shape)
            if x.requires_grad:
                dflat = (g2 @ wd.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
                gx = _unpad(_scatter_windows(dflat, xp.shape, kh, kw, stride, dilation, ho, wo), ph, pw)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return Tensor._from_op(out, parents, backward)


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    n, c, h, w = x.shape
    ho = _out_size(h, kernel, stride, padding, 1)
    wo = _out_size(w, kernel, stride, padding, 1)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf)
    cols = _windows(xp, kernel, kernel, (stride, stride), (1, 1), ho, wo)
    flat = cols.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dcols = np.zeros((n, c, ho, wo, kernel * kernel), dtype=g.dtype)
        np.put_along_axis(dcols, arg[..., None], g[..., None], axis=-1)
        dcols = dcols.reshape(n, c, ho, wo, kernel, kernel)
        dxp = _scatter_windows(dcols, xp.shape, kernel, kernel, (stride, stride), (1, 1), ho, wo)
        return (_unpad(dxp, padding, padding),)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward)


def avg_pool2d(x: Tensor, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Average pooling that excludes padded positions from the divisor."""
    n, c, h, w = x.shape
    ho = _out_size(h, kernel, stride, padding, 1)
    wo = _out_size(w, kernel, stride, padding, 1)
    pads = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pads)
    ones = np.pad(np.ones((1, 1, h, w), dtype=x.dtype), pads)
    counts = _windows(ones, kernel, kernel, (stride, stride), (1, 1), ho, wo).sum(axis=(-2, -1))
    out = _windows(xp, kernel, kernel, (stride, stride), (1, 1), ho, wo).sum(axis=(-2, -1)) / counts

    def backward(g):
        share = (g / counts)[..., None, None]
        dcols = np.broadcast_to(share, (n, c, ho, wo, kernel, kernel))
        dxp = _scatter_windows(dcols, xp.shape, kernel, kernel, (stride, stride), (1, 1), ho, wo)
        return (_unpad(dxp, padding, padding),)

    return Tensor._from_op(out.astype(x.dtype, copy=False), (x,), backward)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel standardization over the spatial axes."""
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def backward(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gxm = (g * xhat).mean(axis=(2, 3), keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return Tensor._from_op(xhat.astype(x.dtype, copy=False), (x,), backward)


def subsample(x: Tensor, stride: int) -> Tensor:
    if stride == 1:
        return x
    return x[:, :, ::stride, ::stride]


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(g):
        n, c, h, w = x.shape
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return Tensor._from_op(out, (x,), backward)


def downsample_avg(x: Tensor, factor: int) -> Tensor:
    """Mean over non-overlapping ``factor x factor`` blocks."""
    if factor == 1:
        return x
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError("downsample_avg", f"H, W divisible by {factor}", x.shape)
    out = x.data.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))

    def backward(g):
        share = g / (factor * factor)
        return (share.repeat(factor, axis=2).repeat(factor, axis=3),)

    return Tensor._from_op(out.astype(x.dtype, copy=False), (x,), backward)


def bilinear_matrix(out_size: int, in_size: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic interpolation matrix with half-pixel centres (align_corners=False)."""
    m = np.zeros((out_size, in_size), dtype=dtype)
    scale = in_size / out_size
    for i in range(out_size):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), in_size - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, in_size - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    n, c, h, w = x.shape
    if (h, w) == tuple(size):
        return x
    mh = bilinear_matrix(size[0], h, x.dtype)
    mw = bilinear_matrix(size[1], w, x.dtype)
    out = np.einsum("oh,nchw,pw->ncop", mh, x.data, mw, optimize=True)

    def backward(g):
        return (np.einsum("oh,ncop,pw->nchw", mh, g, mw, optimize=True),)

    return Tensor._from_op(out, (x,), backward)
