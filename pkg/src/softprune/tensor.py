"""Numerical kernels with forward and backward passes.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Spatial kernels
accept either a single sample ``(C, H, W)`` or a batch ``(N, C, H, W)`` and
return the same rank they were given.

Convolution is cross-correlation (the deep-learning convention) and carries no
bias; biases are owned by the layer graph.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, InputError

DTYPE = np.float64


def as_tensor(x):
    return np.asarray(x, dtype=DTYPE)


def _batched(x, rank):
    x = as_tensor(x)
    if x.ndim == rank - 1:
        return x[None], True
    if x.ndim != rank:
        raise DimensionError(f"expected a {rank - 1}-d sample or {rank}-d batch, got shape {x.shape}")
    return x, False


def conv_output_size(size, kernel_size, stride, padding):
    if stride < 1 or padding < 0:
        raise InputError(f"stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    out = (size + 2 * padding - kernel_size) // stride + 1
    if out < 1:
        raise DimensionError(
            f"kernel {kernel_size} does not fit input extent {size} with padding {padding}")
    return out


def _im2col(x, s, stride, padding):
    """(N, m, H, W) -> columns of shape (N*h'*w', m*s*s) plus (h', w')."""
    n_batch, m, h, w = x.shape
    ho = conv_output_size(h, s, stride, padding)
    wo = conv_output_size(w, s, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (s, s), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n_batch * ho * wo, m * s * s)
    return cols, ho, wo


def _check_conv(x, kernel):
    kernel = as_tensor(kernel)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"kernel must be (n, m, s, s), got {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(
            f"input channel axis has {x.shape[1]} channels but kernel axis 1 expects {kernel.shape[1]}")
    return kernel


def conv2d_forward(x, kernel, stride=1, padding=0):
    x, single = _batched(x, 4)
    kernel = _check_conv(x, kernel)
    n, _, s, _ = kernel.shape
    cols, ho, wo = _im2col(x, s, stride, padding)
    out = cols @ kernel.reshape(n, -1).T
    out = out.reshape(x.shape[0], ho, wo, n).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    return out[0] if single else out


def conv2d_backward(x, kernel, grad_output, stride=1, padding=0):
    """Return ``(grad_input, grad_kernel)`` for :func:`conv2d_forward`."""
    x, single = _batched(x, 4)
    kernel = _check_conv(x, kernel)
    grad_output, _ = _batched(grad_output, 4)
    n, m, s, _ = kernel.shape
    cols, ho, wo = _im2col(x, s, stride, padding)
    expected = (x.shape[0], n, ho, wo)
    if grad_output.shape != expected:
        raise DimensionError(f"grad_output has shape {grad_output.shape}, expected {expected}")

    go = grad_output.transpose(0, 2, 3, 1).reshape(-1, n)
    grad_kernel = (go.T @ cols).reshape(kernel.shape)

    gcols = (go @ kernel.reshape(n, -1)).reshape(x.shape[0], ho, wo, m, s, s)
    nb, _, h, w = x.shape
    gpad = np.zeros((nb, m, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
    hspan = (ho - 1) * stride + 1
    wspan = (wo - 1) * stride + 1
    for i in range(s):
        for j in range(s):
            gpad[:, :, i : i + hspan : stride, j : j + wspan : stride] += gcols[..., i, j].transpose(0, 3, 1, 2)
    grad_input = gpad[:, :, padding : padding + h, padding : padding + w]
    grad_input = np.ascontiguousarray(grad_input)
    return (grad_input[0] if single else grad_input), grad_kernel


def dense_forward(x, weight, bias=None):
    x, single = _batched(x, 2)
    weight = as_tensor(weight)
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise DimensionError(f"input has {x.shape[1]} features, weight shape is {weight.shape}")
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out[0] if single else out


def dense_backward(x, weight, grad_output):
    """Return ``(grad_input, grad_weight, grad_bias)``."""
    x, single = _batched(x, 2)
    grad_output, _ = _batched(grad_output, 2)
    weight = as_tensor(weight)
    if grad_output.shape != (x.shape[0], weight.shape[0]):
        raise DimensionError(f"grad_output has shape {grad_output.shape}, expected {(x.shape[0], weight.shape[0])}")
    grad_input = grad_output @ weight
    grad_weight = grad_output.T @ x
    grad_bias = grad_output.sum(axis=0)
    return (grad_input[0] if single else grad_input), grad_weight, grad_bias


def relu_forward(x):
    return np.maximum(as_tensor(x), 0.0)


def relu_backward(x, grad_output):
    return np.where(as_tensor(x) > 0.0, grad_output, 0.0)


def avgpool_forward(x, size=None):
    """Non-overlapping average pooling; ``size=None`` pools globally to 1x1."""
    x, single = _batched(x, 4)
    nb, c, h, w = x.shape
    if size is None:
        out = x.mean(axis=(2, 3), keepdims=True)
    else:
        if h % size or w % size:
            raise DimensionError(f"pool size {size} does not divide spatial extent {h}x{w}")
        out = x.reshape(nb, c, h // size, size, w // size, size).mean(axis=(3, 5))
    return out[0] if single else out


def avgpool_backward(x, grad_output, size=None):
    x, single = _batched(x, 4)
    grad_output, _ = _batched(grad_output, 4)
    nb, c, h, w = x.shape
    if size is None:
        grad = np.broadcast_to(grad_output / (h * w), x.shape).copy()
    else:
        g = grad_output / (size * size)
        grad = np.repeat(np.repeat(g, size, axis=2), size, axis=3)
    return grad[0] if single else grad


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``.

    ``logits`` may be ``(C,)`` with a scalar label or ``(N, C)`` with N labels.
    """
    logits, single = _batched(logits, 2)
    labels = np.atleast_1d(np.asarray(labels))
    nb, classes = logits.shape
    if labels.shape != (nb,):
        raise DimensionError(f"{nb} logit rows but {labels.shape} labels")
    if not np.issubdtype(labels.dtype, np.integer):
        raise InputError("labels must be integers")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise InputError(f"label out of range [0, {classes})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(nb)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= nb
    return float(loss), (grad[0] if single else grad)
