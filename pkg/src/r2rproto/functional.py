"""Neural-network ops on top of :mod:`r2rproto.tensor`.

Spatial ops take ``[C, H, W]`` or batched ``[B, C, H, W]`` inputs; the
batched form is what training uses, the unbatched one is the per-sample
contract.  Padding is always zeros.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ContractError, DimensionError
from .tensor import DTYPE, Tensor, _record, as_tensor

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _batched(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise DimensionError(f"{op}: expected [C,H,W] or [B,C,H,W], got {x.shape}")


def _out_extent(n: int, k: int, stride: int, padding: int, op: str) -> int:
    if stride < 1:
        raise DimensionError(f"{op}: stride must be >= 1, got {stride}")
    out = (n + 2 * padding - k) // stride + 1
    if out < 1:
        raise DimensionError(
            f"{op}: non-positive output extent ({n}+2*{padding}-{k})//{stride}+1 = {out}"
        )
    return out


def _windows(xb: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _scatter_windows(gw_fn, xshape, k, stride, padding, ho, wo) -> np.ndarray:
    """Adjoint of the windowing: sum per-offset contributions into padded input."""
    b, c, h, w = xshape
    gp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            gp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += gw_fn(i, j)
    return gp[:, :, padding : padding + h, padding : padding + w]


def depthwise_conv2d(x, weight, stride: int = 1, padding: int | None = None) -> Tensor:
    """Per-channel spatial convolution; ``weight`` is ``[C, k, k]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    xb, squeeze = _batched(x, "depthwise_conv2d")
    if weight.ndim != 3 or weight.shape[1] != weight.shape[2]:
        raise DimensionError(f"depthwise_conv2d: kernel must be [C,k,k], got {weight.shape}")
    c, k = weight.shape[0], weight.shape[1]
    if k % 2 == 0:
        raise DimensionError(f"depthwise_conv2d: kernel size must be odd, got {k}")
    if xb.shape[1] != c:
        raise DimensionError(f"depthwise_conv2d: input {x.shape} vs kernel {weight.shape}")
    padding = k // 2 if padding is None else padding
    ho = _out_extent(xb.shape[2], k, stride, padding, "depthwise_conv2d")
    wo = _out_extent(xb.shape[3], k, stride, padding, "depthwise_conv2d")
    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding)))

    def tap(i, j):
        return xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]

    wd = weight.data
    out = np.zeros((xb.shape[0], c, ho, wo), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            out += tap(i, j) * wd[None, :, i, j, None, None]

    def bw(g):
        gb = g[None] if squeeze else g
        gx = gw = None
        if x.requires_grad:
            gx = _scatter_windows(
                lambda i, j: gb * wd[None, :, i, j, None, None],
                xb.shape, k, stride, padding, ho, wo,
            )
            gx = gx[0] if squeeze else gx
        if weight.requires_grad:
            gw = np.empty_like(wd)
            for i in range(k):
                for j in range(k):
                    gw[:, i, j] = (tap(i, j) * gb).sum(axis=(0, 2, 3))
        return gx, gw

    return _record("depthwise_conv2d", out[0] if squeeze else out, (x, weight), bw)


def pointwise_conv2d(x, weight, bias=None) -> Tensor:
    """1x1 convolution mixing channels; ``weight`` is ``[C_out, C_in]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    xb, squeeze = _batched(x, "pointwise_conv2d")
    b, c, h, w = xb.shape
    if weight.ndim != 2 or weight.shape[1] != c:
        raise DimensionError(f"pointwise_conv2d: input {x.shape} vs weight {weight.shape}")
    o = weight.shape[0]
    flat = xb.reshape(b, c, h * w)
    out = np.matmul(weight.data, flat)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise DimensionError(f"pointwise_conv2d: bias {bias.shape} vs {o} outputs")
        out = out + bias.data[None, :, None]
        parents.append(bias)
    out = out.reshape(b, o, h, w)

    def bw(g):
        gf = g.reshape(b, o, h * w)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(weight.data.T, gf).reshape(xb.shape)
            gx = gx[0] if squeeze else gx
        if weight.requires_grad:
            gw = np.matmul(gf, flat.transpose(0, 2, 1)).sum(axis=0)
        if bias is not None and bias.requires_grad:
            gb = gf.sum(axis=(0, 2))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return _record("pointwise_conv2d", out[0] if squeeze else out, parents, bw)


def depthwise_separable_conv2d(x, depthwise, pointwise, stride: int = 1, padding: int | None = None, bias=None) -> Tensor:
    """Depthwise ``[C,k,k]`` spatial filter followed by pointwise ``[C_out,C]`` mixing."""
    return pointwise_conv2d(depthwise_conv2d(x, depthwise, stride, padding), pointwise, bias)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int | None = None) -> Tensor:
    """Dense convolution; ``weight`` is ``[C_out, C_in, k, k]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    xb, squeeze = _batched(x, "conv2d")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3] or weight.shape[1] != xb.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} vs kernel {weight.shape}")
    o, c, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if k % 2 == 0:
        raise DimensionError(f"conv2d: kernel size must be odd, got {k}")
    padding = k // 2 if padding is None else padding
    ho = _out_extent(xb.shape[2], k, stride, padding, "conv2d")
    wo = _out_extent(xb.shape[3], k, stride, padding, "conv2d")
    win = _windows(xb, k, stride, padding)[:, :, :ho, :wo]
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise DimensionError(f"conv2d: bias {bias.shape} vs {o} outputs")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def bw(g):
        gb_ = g[None] if squeeze else g
        gx = gw = gbias = None
        if x.requires_grad:
            gcol = np.tensordot(gb_, weight.data, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
            gx = _scatter_windows(lambda i, j: gcol[:, :, i, j], xb.shape, k, stride, padding, ho, wo)
            gx = gx[0] if squeeze else gx
        if weight.requires_grad:
            gw = np.tensordot(gb_, win, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gbias = gb_.sum(axis=(0, 2, 3))
        return (gx, gw, gbias) if bias is not None else (gx, gw)

    return _record("conv2d", out[0] if squeeze else out, parents, bw)


def gelu(x) -> Tensor:
    """Exact (erf) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = x.data * cdf

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data**2)
        return (g * (cdf + x.data * pdf),)

    return _record("gelu", out, (x,), bw)


def layer_norm(x, gamma, beta, axis: int = -3, eps: float = 1e-5) -> Tensor:
    """Normalise over one axis (the channel axis by default) with affine ``gamma``/``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axis = axis % x.ndim
    n = x.shape[axis]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(f"layer_norm: affine {gamma.shape}/{beta.shape} vs axis extent {n}")
    bshape = [1] * x.ndim
    bshape[axis] = n
    gam = gamma.data.reshape(bshape)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gam + beta.data.reshape(bshape)
    others = tuple(i for i in range(x.ndim) if i != axis)

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gam
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=axis, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True)
            )
        ggam = (g * xhat).sum(axis=others) if gamma.requires_grad else None
        gbet = g.sum(axis=others) if beta.requires_grad else None
        return gx, ggam, gbet

    return _record("layer_norm", out, (x, gamma, beta), bw)


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 ``targets``."""
    logits = as_tensor(logits)
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=DTYPE)
    if logits.shape != t.shape:
        raise DimensionError(f"bce_with_logits: logits {logits.shape} vs targets {t.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ContractError("bce_with_logits: targets must be 0 or 1")
    x = logits.data
    n = x.size
    loss = (np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))).sum() / n

    def bw(g):
        e = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * (sig - t) / n,)

    return _record("bce_with_logits", np.asarray(loss, dtype=DTYPE), (logits,), bw)
