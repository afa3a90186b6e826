"""Forward/backward pairs for every layer the segmentation network uses.

Tensors are plain ``ndarray`` objects of shape ``(N, C, H, W)``. Each
``*_forward`` returns its output plus a cache; the matching ``*_backward``
consumes the upstream gradient and that cache. Both float32 and float64
inputs are supported; outputs follow the input dtype.
"""
from __future__ import annotations

import numpy as np

from ..errors import DegenerateBatchError, ShapeError


def _check4(x, name="input"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N, C, H, W), got shape {x.shape}")


# --------------------------------------------------------------------------- conv


def _im2col(x, kh, kw, pad):
    """Rows indexed by (c, i, j), columns by (n, y, x): shape (C*kh*kw, N*Ho*Wo)."""
    n, c, h, w = x.shape
    xp = x.transpose(1, 0, 2, 3)
    if pad:
        xp = np.pad(xp, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    h_out, w_out = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {h}x{w} with pad {pad}")
    cols = np.empty((c, kh, kw, n, h_out, w_out), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + h_out, j:j + w_out]
    return cols.reshape(c * kh * kw, -1), h_out, w_out


def conv2d_forward(x, weight, bias, pad=None):
    """Stride-1 cross-correlation. ``weight`` is ``(C_out, C_in, kh, kw)``.

    ``pad`` defaults to ``kh // 2`` (1 for 3x3, 0 for 1x1).
    """
    _check4(x)
    c_out, c_in, kh, kw = weight.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv expects {c_in} input channels, got {x.shape[1]}")
    if pad is None:
        pad = kh // 2
    n = x.shape[0]
    cols, h_out, w_out = _im2col(x, kh, kw, pad)
    out = weight.reshape(c_out, -1) @ cols + bias[:, None]
    out = out.reshape(c_out, n, h_out, w_out).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), (cols, weight, pad)


def conv2d_backward(grad, cache):
    cols, weight, pad = cache
    c_out, _, kh, _ = weight.shape
    g = grad.transpose(1, 0, 2, 3).reshape(c_out, -1)
    grad_w = (g @ cols.T).reshape(weight.shape)
    grad_b = g.sum(axis=1)
    # input gradient = full correlation of grad with the flipped, channel-swapped kernel
    flipped = np.ascontiguousarray(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    zero_bias = np.zeros(flipped.shape[0], dtype=grad.dtype)
    grad_x, _ = conv2d_forward(grad, flipped, zero_bias, kh - 1 - pad)
    return grad_x, grad_w, grad_b


# --------------------------------------------------------------------------- batch norm


def batchnorm_forward(x, gamma, beta, running_mean, running_var, training,
                      momentum=0.9, eps=1e-5):
    """Per-channel normalization over (N, H, W).

    In training mode ``running_mean``/``running_var`` are updated in place:
    ``running = momentum * running + (1 - momentum) * batch``. Batch
    statistics are accumulated in float64.
    """
    _check4(x)
    n, c, h, w = x.shape
    if training:
        if n * h * w < 2:
            raise DegenerateBatchError("batch norm needs at least 2 values per channel in training")
        x64 = x.astype(np.float64)
        mean = x64.mean(axis=(0, 2, 3))
        var = x64.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mean.astype(x.dtype)[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out.astype(x.dtype, copy=False), (xhat, inv_std, gamma, training)


def batchnorm_backward(grad, cache):
    xhat, inv_std, gamma, training = cache
    axes = (0, 2, 3)
    g64 = grad.astype(np.float64)
    grad_beta = g64.sum(axis=axes)
    grad_gamma = (g64 * xhat).sum(axis=axes)
    if not training:
        grad_x = grad * (gamma * inv_std)[None, :, None, None]
        return grad_x.astype(grad.dtype), grad_gamma.astype(grad.dtype), grad_beta.astype(grad.dtype)
    m = grad.shape[0] * grad.shape[2] * grad.shape[3]
    mean_g = (grad_beta / m).astype(grad.dtype)[None, :, None, None]
    mean_gx = (grad_gamma / m).astype(grad.dtype)[None, :, None, None]
    grad_x = (gamma * inv_std)[None, :, None, None] * (grad - mean_g - xhat * mean_gx)
    return grad_x.astype(grad.dtype), grad_gamma.astype(grad.dtype), grad_beta.astype(grad.dtype)


# --------------------------------------------------------------------------- relu


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(grad, mask):
    return grad * mask


# --------------------------------------------------------------------------- max pool


def maxpool2x2_forward(x):
    """2x2 max pooling, stride 2. Returns ``(out, argmax)``.

    ``argmax`` holds the window offset 0..3 in row-major order; ties go to the
    first maximum.
    """
    _check4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max pooling needs even H and W, got {h}x{w}")
    windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    return out, argmax


def maxpool2x2_backward(grad, argmax):
    n, c, h2, w2 = grad.shape
    scatter = (argmax[..., None] == np.arange(4)) * grad[..., None]
    return scatter.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)


# --------------------------------------------------------------------------- transposed conv


def tconv2x2_forward(x, weight, bias):
    """Kernel 2, stride 2 transposed convolution; ``weight`` is ``(C_in, C_out, 2, 2)``.

    ``out[n, o, 2i+a, 2j+b] = sum_c x[n, c, i, j] * weight[c, o, a, b] + bias[o]``.
    """
    _check4(x)
    c_in, c_out, kh, kw = weight.shape
    if (kh, kw) != (2, 2):
        raise ShapeError("transposed convolution kernel must be 2x2")
    if x.shape[1] != c_in:
        raise ShapeError(f"transposed conv expects {c_in} input channels, got {x.shape[1]}")
    n, _, h, w = x.shape
    rows = x.transpose(0, 2, 3, 1).reshape(-1, c_in)
    out = (rows @ weight.reshape(c_in, -1)).reshape(n, h, w, c_out, 2, 2)
    out = out.transpose(0, 3, 1, 4, 2, 5).reshape(n, c_out, 2 * h, 2 * w) + bias[None, :, None, None]
    return out, (rows, x.shape, weight)


def tconv2x2_backward(grad, cache):
    rows, x_shape, weight = cache
    c_in, c_out = weight.shape[:2]
    n, _, h, w = x_shape
    g = grad.reshape(n, c_out, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(n * h * w, c_out * 4)
    grad_w = (rows.T @ g).reshape(weight.shape)
    grad_b = grad.sum(axis=(0, 2, 3))
    grad_x = (g @ weight.reshape(c_in, -1).T).reshape(n, h, w, c_in).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def strided_conv2x2(y, weight):
    """Stride-2 2x2 convolution, the adjoint of :func:`tconv2x2_forward` (bias-free)."""
    c_in, c_out = weight.shape[:2]
    n, _, h2, w2 = y.shape
    g = y.reshape(n, c_out, h2 // 2, 2, w2 // 2, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, c_out * 4)
    return (g @ weight.reshape(c_in, -1).T).reshape(n, h2 // 2, w2 // 2, c_in).transpose(0, 3, 1, 2)


# --------------------------------------------------------------------------- concat


def concat_forward(a, b):
    _check4(a, "a")
    _check4(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} with {b.shape}")
    return np.concatenate([a, b], axis=1), a.shape[1]


def concat_backward(grad, split):
    return grad[:, :split], grad[:, split:]
