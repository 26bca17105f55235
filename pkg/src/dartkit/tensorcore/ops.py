"""Differentiable layer primitives on (N, C, H, W) tensors.

Every primitive also accepts a single (C, H, W) sample and returns an output
of the same rank.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, grad_enabled


class ShapeError(ValueError):
    """Raised when tensor geometry is incompatible with an operation."""


def _batched(x: Tensor, name: str = "input"):
    if x.ndim == 4:
        return x, False
    if x.ndim == 3:
        from .tensor import reshape
        return reshape(x, (1,) + x.shape), True
    raise ShapeError(f"{name} must be C×H×W or N×C×H×W, got shape {x.shape}")


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    if not squeeze:
        return y
    from .tensor import reshape
    return reshape(y, y.shape[1:])


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (C*k*k, N*ho*wo) patch matrix."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)


def _col2im(cols: np.ndarray, shape, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add patch columns back into an image."""
    n, c, hp, wp = shape
    cols = cols.reshape(c, k, k, n, ho, wo).transpose(3, 0, 1, 2, 4, 5)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding (no kernel flip)."""
    x, squeeze = _batched(x)
    n, c, h, w = x.shape
    if weight.ndim != 4:
        raise ShapeError(f"weight must be C_out×C_in×k×k, got {weight.shape}")
    o, ci, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"kernel must be square, got {k}×{k2}")
    if ci != c:
        raise ShapeError(f"input channels: input has C_in={c}, weight expects C_in={ci}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias: expected shape ({o},), got {bias.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError("stride must be positive and padding non-negative")
    if k > h + 2 * padding:
        raise ShapeError(f"height: kernel {k} exceeds padded height {h + 2 * padding}")
    if k > w + 2 * padding:
        raise ShapeError(f"width: kernel {k} exceeds padded width {w + 2 * padding}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    w2 = weight.data.reshape(o, -1)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    needs = grad_enabled() and (x.requires_grad or weight.requires_grad
                                or (bias is not None and bias.requires_grad))
    if not needs:
        cols = None

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        res = []
        if weight.requires_grad:
            res.append((weight, (g2 @ cols.T).reshape(weight.shape)))
        if bias is not None and bias.requires_grad:
            res.append((bias, g2.sum(axis=1)))
        if x.requires_grad:
            dxp = _col2im(w2.T @ g2, xp.shape, k, stride, ho, wo)
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + w]
            res.append((x, dxp))
        return res

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _unbatch(Tensor._make(np.ascontiguousarray(out), parents, "conv2d", backward), squeeze)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 2) -> Tensor:
    """Fractionally strided convolution, the adjoint of ``conv2d`` (no padding)."""
    x, squeeze = _batched(x)
    n, c, h, w = x.shape
    if weight.ndim != 4:
        raise ShapeError(f"weight must be C_in×C_out×k×k, got {weight.shape}")
    ci, o, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"kernel must be square, got {k}×{k2}")
    if ci != c:
        raise ShapeError(f"input channels: input has C_in={c}, weight expects C_in={ci}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias: expected shape ({o},), got {bias.shape}")
    if stride < 1:
        raise ShapeError("stride must be positive")
    ho = (h - 1) * stride + k
    wo = (w - 1) * stride + k
    w2 = weight.data.reshape(ci, o * k * k)
    x2 = x.data.transpose(1, 0, 2, 3).reshape(ci, -1)
    cols = w2.T @ x2  # (o*k*k, n*h*w)
    out = _col2im(cols, (n, o, ho, wo), k, stride, h, w)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gcols = _im2col(g, k, stride, h, w)  # (o*k*k, n*h*w)
        res = []
        if weight.requires_grad:
            res.append((weight, (x2 @ gcols.T).reshape(weight.shape)))
        if bias is not None and bias.requires_grad:
            res.append((bias, g.sum(axis=(0, 2, 3))))
        if x.requires_grad:
            res.append((x, (w2 @ gcols).reshape(ci, n, h, w).transpose(1, 0, 2, 3)))
        return res

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _unbatch(Tensor._make(out, parents, "conv_transpose2d", backward), squeeze)


def maxpool2x2(x: Tensor) -> Tensor:
    """2×2/2 max pooling; ties send the gradient to the first row-major element."""
    x, squeeze = _batched(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even H and W, got {h}×{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        onehot = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        dx = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return ((x, dx),)

    return _unbatch(Tensor._make(out, (x,), "maxpool2x2", backward), squeeze)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over (N, H, W), then affine transform.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance for the running
    estimate). In eval mode the running statistics are used.
    """
    x, squeeze = _batched(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"channels: input has C={c}, gamma/beta have {gamma.shape}/{beta.shape}")
    g4 = gamma.data.reshape(1, c, 1, 1)
    b4 = beta.data.reshape(1, c, 1, 1)
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        unbiased = var.reshape(c) * (m / max(m - 1, 1))
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        inv = (1.0 / np.sqrt(running_var + eps)).reshape(1, c, 1, 1).astype(x.dtype)
        xhat = (x.data - running_mean.reshape(1, c, 1, 1).astype(x.dtype)) * inv
    out = (xhat * g4 + b4).astype(x.dtype, copy=False)

    def backward(g):
        res = []
        if gamma.requires_grad:
            res.append((gamma, (g * xhat).sum(axis=(0, 2, 3))))
        if beta.requires_grad:
            res.append((beta, g.sum(axis=(0, 2, 3))))
        if x.requires_grad:
            gx = g * g4
            if training:
                dx = inv * (gx - gx.mean(axis=(0, 2, 3), keepdims=True)
                            - xhat * (gx * xhat).mean(axis=(0, 2, 3), keepdims=True))
            else:
                dx = gx * inv
            res.append((x, dx))
        return res

    return _unbatch(Tensor._make(out, (x, gamma, beta), "batch_norm", backward), squeeze)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), "relu", lambda g: ((x, g * mask),))


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return Tensor._make(out, (x,), "sigmoid", lambda g: ((x, g * out * (1.0 - out)),))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes, keeping them as size-1 dims."""
    x, squeeze = _batched(x)
    h, w = x.shape[2], x.shape[3]
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _unbatch(Tensor._make(out, (x,), "global_avg_pool",
                                 lambda g: ((x, np.broadcast_to(g / (h * w), x.shape)),)), squeeze)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, sa = _batched(a, "a")
    b, _ = _batched(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: spatial/batch mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _unbatch(Tensor._make(out, (a, b), "concat",
                                 lambda g: ((a, g[:, :ca]), (b, g[:, ca:]))), sa)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Shape-checked elementwise sum (skip/residual fusion)."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return a + b


def pad_replicate(x: Tensor, p: int) -> Tensor:
    """Edge-replicating spatial padding by ``p`` pixels on each side."""
    x, squeeze = _batched(x)
    n, c, h, w = x.shape
    out = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge")

    def backward(g):
        g = g.copy()
        g[:, :, p, :] += g[:, :, :p, :].sum(axis=2)
        g[:, :, h + p - 1, :] += g[:, :, h + p:, :].sum(axis=2)
        g[:, :, :, p] += g[:, :, :, :p].sum(axis=3)
        g[:, :, :, w + p - 1] += g[:, :, :, w + p:].sum(axis=3)
        return ((x, g[:, :, p:p + h, p:p + w]),)

    return _unbatch(Tensor._make(out, (x,), "pad_replicate", backward), squeeze)
