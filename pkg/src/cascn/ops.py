"""Neural-network operators over Tensor: convolutions, pooling, batchnorm,
activations, and channel utilities.

Every op validates its shape contract, computes the forward pass in numpy,
and registers a backward closure via tensor.record. Convolutions use an
im2col patch-gather matmul; `conv2d_direct` is an independent loop-based
reference used as an internal oracle in tests.
"""
from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, record


def _require(cond: bool, exc, msg: str) -> None:
    if not cond:
        raise exc(msg)


def _conv_out_len(n: int, k: int, stride: int, pad: int, dilation: int) -> int:
    extent = dilation * (k - 1) + 1
    _require(n + 2 * pad >= extent, DimensionError,
             f"kernel extent {extent} exceeds padded input extent {n + 2 * pad}")
    return (n + 2 * pad - extent) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int,
            dilation: int) -> np.ndarray:
    """Gather sliding patches of x[N,C,H,W] into [N, C*kh*kw, L], L=Ho*Wo."""
    n, c, h, w = x.shape
    ho = _conv_out_len(h, kh, stride, pad, dilation)
    wo = _conv_out_len(w, kw, stride, pad, dilation)
    img = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    col = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        i0 = i * dilation
        i1 = i0 + stride * ho
        for j in range(kw):
            j0 = j * dilation
            j1 = j0 + stride * wo
            col[:, :, i, j] = img[:, :, i0:i1:stride, j0:j1:stride]
    return col.reshape(n, c * kh * kw, ho * wo)


def _col2im(col: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int,
            dilation: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch columns back onto the image."""
    n, c, h, w = x_shape
    ho = _conv_out_len(h, kh, stride, pad, dilation)
    wo = _conv_out_len(w, kw, stride, pad, dilation)
    col = col.reshape(n, c, kh, kw, ho, wo)
    img = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=col.dtype)
    for i in range(kh):
        i0 = i * dilation
        i1 = i0 + stride * ho
        for j in range(kw):
            j0 = j * dilation
            j1 = j0 + stride * wo
            img[:, :, i0:i1:stride, j0:j1:stride] += col[:, :, i, j]
    if pad:
        return img[:, :, pad:pad + h, pad:pad + w]
    return img


def _check_4d(x: Tensor, name: str) -> None:
    _require(x.ndim == 4, DimensionError,
             f"{name} must be 4-D (batch, channels, height, width), "
             f"got {x.ndim}-D {x.shape}")


# ---------------------------------------------------------------------------
# convolutions


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding: int = 0) -> Tensor:
    """Standard 2-D convolution (cross-correlation), square odd kernel.

    x: [N, Cin, H, W], w: [Cout, Cin, k, k], b: [Cout] or None.
    Output spatial dims follow floor((H + 2p - d*(k-1) - 1)/stride) + 1.
    """
    _check_4d(x, "conv2d input")
    _require(w.ndim == 4 and w.shape[2] == w.shape[3], DimensionError,
             f"conv2d kernel must be [Cout, Cin, k, k], got {w.shape}")
    k = w.shape[2]
    _require(k % 2 == 1, ContractError, f"conv2d kernel size must be odd, got {k}")
    _require(stride >= 1 and dilation >= 1 and padding >= 0, ContractError,
             "conv2d requires stride >= 1, dilation >= 1, padding >= 0")
    _require(x.shape[1] == w.shape[1], DimensionError,
             f"channel axis mismatch: input has {x.shape[1]} channels, "
             f"kernel expects {w.shape[1]}")
    if b is not None:
        _require(b.shape == (w.shape[0],), DimensionError,
                 f"bias axis mismatch: expected ({w.shape[0]},), got {b.shape}")

    xd, wd = x.data, w.data
    n, cin, h, win = xd.shape
    cout = wd.shape[0]
    ho = _conv_out_len(h, k, stride, padding, dilation)
    wo = _conv_out_len(win, k, stride, padding, dilation)

    cols = _im2col(xd, k, k, stride, padding, dilation)      # [N, Cin*k*k, L]
    wmat = wd.reshape(cout, -1)
    out = np.matmul(wmat[None], cols)                        # [N, Cout, L]
    if b is not None:
        out = out + b.data[:, None]
    out = out.reshape(n, cout, ho, wo)

    has_bias = b is not None

    def backward_fn(g):
        return _conv2d_grads(g, cols, wmat, xd.shape, k, stride, padding,
                             dilation, has_bias)

    inputs = (x, w) if b is None else (x, w, b)
    return record("conv2d", inputs, out, backward_fn)


def _conv2d_grads(g, cols, wmat, x_shape, k, stride, padding, dilation,
                  has_bias):
    n = x_shape[0]
    cout = wmat.shape[0]
    gm = g.reshape(n, cout, -1)                              # [N, Cout, L]
    dw = np.tensordot(gm, cols, axes=([0, 2], [0, 2]))       # [Cout, Cin*k*k]
    dcols = np.matmul(wmat.T[None], gm)                      # [N, Cin*k*k, L]
    dx = _col2im(dcols, x_shape, k, k, stride, padding, dilation)
    dw = dw.reshape(cout, x_shape[1], k, k)
    if has_bias:
        return dx, dw, gm.sum(axis=(0, 2))
    return dx, dw


def conv2d_direct(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
                  stride: int = 1, dilation: int = 1,
                  padding: int = 0) -> np.ndarray:
    """Loop-based reference convolution; independent oracle for conv2d."""
    n, cin, h, win = x.shape
    cout, _, kh, kw = w.shape
    ho = _conv_out_len(h, kh, stride, padding, dilation)
    wo = _conv_out_len(win, kw, stride, padding, dilation)
    img = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    for bi in range(n):
        for m in range(cout):
            for oi in range(ho):
                for oj in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += (img[bi, c, oi * stride + ki * dilation,
                                            oj * stride + kj * dilation]
                                        * w[m, c, ki, kj])
                    out[bi, m, oi, oj] = acc
            if b is not None:
                out[bi, m] += b[m]
    return out


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Per-channel spatial convolution: w is [C, 1, k, k], no channel mixing."""
    _check_4d(x, "depthwise input")
    _require(w.ndim == 4 and w.shape[1] == 1 and w.shape[2] == w.shape[3],
             DimensionError, f"depthwise kernel must be [C, 1, k, k], got {w.shape}")
    _require(w.shape[0] == x.shape[1], DimensionError,
             f"channel axis mismatch: input has {x.shape[1]} channels, "
             f"kernel has {w.shape[0]}")
    k = w.shape[2]
    xd, wd = x.data, w.data
    n, c, h, win = xd.shape
    ho = _conv_out_len(h, k, stride, padding, 1)
    wo = _conv_out_len(win, k, stride, padding, 1)

    col = _im2col(xd, k, k, stride, padding, 1).reshape(n, c, k * k, -1)
    wk = wd.reshape(c, k * k)
    out = np.einsum("nckl,ck->ncl", col, wk).reshape(n, c, ho, wo)

    def backward_fn(g):
        gm = g.reshape(n, c, -1)
        dw = np.einsum("nckl,ncl->ck", col, gm).reshape(c, 1, k, k)
        dcol = np.einsum("ncl,ck->nckl", gm, wk).reshape(n, c * k * k, -1)
        dx = _col2im(dcol, xd.shape, k, k, stride, padding, 1)
        return dx, dw

    return record("depthwise_conv2d", (x, w), out, backward_fn)


def pointwise_conv(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """1x1 cross-channel convolution: a per-pixel matrix multiply."""
    _check_4d(x, "pointwise input")
    _require(w.ndim == 4 and w.shape[2:] == (1, 1), DimensionError,
             f"pointwise kernel must be [M, C, 1, 1], got {w.shape}")
    _require(w.shape[1] == x.shape[1], DimensionError,
             f"channel axis mismatch: input has {x.shape[1]} channels, "
             f"kernel expects {w.shape[1]}")
    xd = x.data
    n, c, h, win = xd.shape
    m = w.shape[0]
    wm = w.data.reshape(m, c)
    flat = xd.reshape(n, c, h * win)
    out = np.matmul(wm[None], flat)
    if b is not None:
        _require(b.shape == (m,), DimensionError,
                 f"bias axis mismatch: expected ({m},), got {b.shape}")
        out = out + b.data[:, None]
    out = out.reshape(n, m, h, win)
    has_bias = b is not None

    def backward_fn(g):
        gm = g.reshape(n, m, -1)
        dx = np.matmul(wm.T[None], gm).reshape(xd.shape)
        dw = np.tensordot(gm, flat, axes=([0, 2], [0, 2])).reshape(m, c, 1, 1)
        if has_bias:
            return dx, dw, gm.sum(axis=(0, 2))
        return dx, dw

    inputs = (x, w) if b is None else (x, w, b)
    return record("pointwise_conv", inputs, out, backward_fn)


def transposed_conv2d(x: Tensor, w: Tensor, stride: int = 2) -> Tensor:
    """2x upsampling transposed convolution, fixed stride 2 / kernel 2.

    w is [Cin, Cout, 2, 2]. With stride == kernel the scatter windows never
    overlap, so out[n,m,2i+a,2j+b] = sum_c x[n,c,i,j] * w[c,m,a,b].
    """
    _check_4d(x, "transposed_conv2d input")
    _require(stride == 2, ContractError, "transposed_conv2d supports stride 2 only")
    _require(w.ndim == 4 and w.shape[2:] == (2, 2), DimensionError,
             f"transposed kernel must be [Cin, Cout, 2, 2], got {w.shape}")
    _require(w.shape[0] == x.shape[1], DimensionError,
             f"channel axis mismatch: input has {x.shape[1]} channels, "
             f"kernel expects {w.shape[0]}")
    xd, wd = x.data, w.data
    n, c, h, win = xd.shape
    m = wd.shape[1]
    out6 = np.einsum("nchw,cmab->nmhawb", xd, wd)
    out = out6.reshape(n, m, 2 * h, 2 * win)

    def backward_fn(g):
        g6 = g.reshape(n, m, h, 2, win, 2)
        dx = np.einsum("nmhawb,cmab->nchw", g6, wd)
        dw = np.einsum("nchw,nmhawb->cmab", xd, g6)
        return dx, dw

    return record("transposed_conv2d", (x, w), out, backward_fn)


# ---------------------------------------------------------------------------
# pooling


def _pool_windows(xd: np.ndarray, window: int, stride: int, pad: int,
                  fill: float):
    n, c, h, w = xd.shape
    ho = (h + 2 * pad - window) // stride + 1
    wo = (w + 2 * pad - window) // stride + 1
    img = xd
    if pad:
        img = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                     constant_values=fill)
    view = np.lib.stride_tricks.sliding_window_view(img, (window, window),
                                                    axis=(2, 3))
    # windows flattened in row-major order so argmax picks the first max
    return img.shape, view[:, :, ::stride, ::stride].reshape(
        n, c, ho, wo, window * window)


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2,
              padding: int = 0) -> Tensor:
    """Max pooling; gradient routes to the first max in row-major order."""
    _check_4d(x, "maxpool input")
    _require(window in (2, 3), ContractError,
             f"maxpool window must be 2 or 3, got {window}")
    if padding == 0:
        _require(x.shape[2] % stride == 0 and x.shape[3] % stride == 0,
                 DimensionError,
                 f"maxpool needs spatial dims divisible by {stride}, "
                 f"got {x.shape[2]}x{x.shape[3]}")
    xd = x.data
    n, c = xd.shape[:2]
    padded_shape, win = _pool_windows(xd, window, stride, padding, -np.inf)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    ho, wo = out.shape[2:]

    def backward_fn(g):
        # scatter each output grad onto its argmax position in the padded grid
        dimg = np.zeros(padded_shape, dtype=g.dtype)
        oy, ox = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
        rows = oy * stride + idx // window          # [N,C,Ho,Wo]
        cols_ = ox * stride + idx % window
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(dimg, (ni, ci, rows, cols_), g)
        if padding:
            dimg = dimg[:, :, padding:padding + xd.shape[2],
                        padding:padding + xd.shape[3]]
        return (dimg,)

    return record("maxpool2d", (x,), out, backward_fn)


def avgpool2d(x: Tensor) -> Tensor:
    """2x2 stride-2 average pooling; gradient spreads uniformly."""
    _check_4d(x, "avgpool input")
    _require(x.shape[2] % 2 == 0 and x.shape[3] % 2 == 0, DimensionError,
             f"avgpool needs even spatial dims, got {x.shape[2]}x{x.shape[3]}")
    xd = x.data
    n, c, h, w = xd.shape
    out = xd.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward_fn(g):
        dx = np.empty_like(xd)
        quarter = g * 0.25
        dx.reshape(n, c, h // 2, 2, w // 2, 2)[:] = quarter[:, :, :, None, :, None]
        return (dx,)

    return record("avgpool2d", (x,), out, backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: [N,C,H,W] -> [N,C]."""
    _check_4d(x, "global_avg_pool input")
    xd = x.data
    n, c, h, w = xd.shape
    out = xd.mean(axis=(2, 3))

    def backward_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), xd.shape).copy(),)

    return record("global_avg_pool", (x,), out, backward_fn)


def global_max_pool(x: Tensor) -> Tensor:
    """Per-channel spatial max: [N,C,H,W] -> [N,C]; first-max tie rule."""
    _check_4d(x, "global_max_pool input")
    xd = x.data
    n, c, h, w = xd.shape
    flat = xd.reshape(n, c, h * w)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
        return (dflat.reshape(xd.shape),)

    return record("global_max_pool", (x,), out, backward_fn)


def broadcast_spatial(x: Tensor, h: int, w: int) -> Tensor:
    """Broadcast a [N,C,1,1] map to [N,C,h,w] (constant upsampling)."""
    _check_4d(x, "broadcast_spatial input")
    _require(x.shape[2:] == (1, 1), DimensionError,
             f"broadcast_spatial expects 1x1 spatial dims, got {x.shape}")
    xd = x.data
    out = np.broadcast_to(xd, xd.shape[:2] + (h, w)).copy()

    def backward_fn(g):
        return (g.sum(axis=(2, 3), keepdims=True),)

    return record("broadcast_spatial", (x,), out, backward_fn)


# ---------------------------------------------------------------------------
# channel utilities


def conv1d_channels(v: Tensor, w: Tensor) -> Tensor:
    """1-D convolution along the channel axis of [N, C] descriptors.

    Odd kernel w[k], zero padding (k-1)/2 at both ends, shared weights
    across channel positions; output is again [N, C].
    """
    _require(v.ndim == 2, DimensionError,
             f"conv1d_channels expects [N, C], got {v.shape}")
    _require(w.ndim == 1 and w.shape[0] % 2 == 1, ContractError,
             f"conv1d_channels kernel must be odd-length 1-D, got {w.shape}")
    k = w.shape[0]
    pad = (k - 1) // 2
    vd, wd = v.data, w.data
    n, c = vd.shape
    vp = np.pad(vd, ((0, 0), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(vp, k, axis=1)  # [N,C,k]
    out = windows @ wd

    def backward_fn(g):
        dw = np.einsum("nck,nc->k", windows, g)
        dvp = np.zeros_like(vp)
        for j in range(k):
            dvp[:, j:j + c] += wd[j] * g
        return dvp[:, pad:pad + c], dw

    return record("conv1d_channels", (v, w), out, backward_fn)


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply x[N,C,H,W] by per-(batch, channel) factors s[N,C]."""
    _check_4d(x, "scale_channels input")
    _require(s.ndim == 2 and s.shape == x.shape[:2], DimensionError,
             f"scale factors must be [N, C] = {x.shape[:2]}, got {s.shape}")
    xd, sd = x.data, s.data
    out = xd * sd[:, :, None, None]

    def backward_fn(g):
        dx = g * sd[:, :, None, None]
        ds = np.einsum("nchw,nchw->nc", g, xd)
        return dx, ds

    return record("scale_channels", (x, s), out, backward_fn)


def concat_channels(xs: list[Tensor]) -> Tensor:
    """Concatenate along the channel axis; all other dims must match."""
    _require(len(xs) >= 1, ContractError, "concat_channels needs at least one input")
    first = xs[0]
    for t in xs[1:]:
        _require(t.ndim == first.ndim, DimensionError,
                 f"concat rank mismatch: {t.ndim} vs {first.ndim}")
        _require(t.shape[0] == first.shape[0], DimensionError,
                 f"batch axis mismatch: {t.shape[0]} vs {first.shape[0]}")
        _require(t.shape[2:] == first.shape[2:], DimensionError,
                 f"spatial axes mismatch: {t.shape[2:]} vs {first.shape[2:]}")
    out = np.concatenate([t.data for t in xs], axis=1)
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=1))

    return record("concat_channels", tuple(xs), out, backward_fn)


# ---------------------------------------------------------------------------
# normalization and activations


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, training: bool,
                running_mean: np.ndarray, running_var: np.ndarray,
                momentum: float = 0.1, eps: float = 1e-5,
                update_running: bool = True) -> Tensor:
    """Per-channel batch normalization over the (N, H, W) axes.

    Train mode normalizes with batch statistics and (optionally) folds them
    into the running arrays in place; eval mode uses the running statistics.
    """
    _check_4d(x, "batchnorm input")
    c = x.shape[1]
    _require(gamma.shape == (c,) and beta.shape == (c,), DimensionError,
             f"batchnorm affine params must be ({c},), got {gamma.shape}/{beta.shape}")
    xd = x.data
    gd, bd = gamma.data, beta.data

    if training:
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        if update_running:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * var
    else:
        mean = running_mean
        var = running_var

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gd[None, :, None, None] * xhat + bd[None, :, None, None]

    def backward_fn(g):
        dgamma = np.einsum("nchw,nchw->c", g, xhat)
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd[None, :, None, None]
        if training:
            # gradient through the batch statistics themselves
            m1 = dxhat.mean(axis=(0, 2, 3))
            m2 = np.einsum("nchw,nchw->c", dxhat, xhat) / xhat[:, 0].size
            dx = inv[None, :, None, None] * (
                dxhat - m1[None, :, None, None]
                - xhat * m2[None, :, None, None])
        else:
            dx = dxhat * inv[None, :, None, None]
        return dx, dgamma, dbeta

    return record("batchnorm2d", (x, gamma, beta), out, backward_fn)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0

    def backward_fn(g):
        return (g * mask,)

    return record("relu", (x,), np.maximum(xd, 0), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward_fn(g):
        return (g * out * (1.0 - out),)

    return record("sigmoid", (x,), out, backward_fn)
