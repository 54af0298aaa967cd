"""Stateless numeric kernels used by the layers.

All functions operate on NCHW arrays and keep the dtype of their inputs.
"""
from __future__ import annotations

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {where}")
    return x


def sigmoid(x):
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def im2col(x, kh, kw, stride, padding):
    """Unfold ``x`` into a ``(C*kh*kw, N*Ho*Wo)`` column matrix."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo), (ho, wo)


def col2im(cols, x_shape, kh, kw, stride, padding, out_hw):
    n, c, h, w = x_shape
    ho, wo = out_hw
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                cols[:, i, j].transpose(1, 0, 2, 3))
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation; returns the output and the cache needed by backward."""
    o, c, kh, kw = weight.shape
    if x.ndim != 4 or x.shape[1] != c:
        raise ValueError(
            f"conv2d expects input with {c} channels, got shape {x.shape}")
    cols, (ho, wo) = im2col(x, kh, kw, stride, padding)
    out = weight.reshape(o, -1) @ cols
    out = out.reshape(o, x.shape[0], ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.reshape(1, o, 1, 1)
    return np.ascontiguousarray(out), (cols, x.shape, (ho, wo))


def conv2d_backward(grad_out, weight, cache, stride=1, padding=0,
                    need_input_grad=True):
    """Return ``(dx, dweight, dbias)`` for :func:`conv2d`."""
    cols, x_shape, out_hw = cache
    o, c, kh, kw = weight.shape
    g = grad_out.transpose(1, 0, 2, 3).reshape(o, -1)
    dweight = (g @ cols.T).reshape(weight.shape)
    dbias = g.sum(axis=1)
    dx = None
    if need_input_grad:
        dcols = weight.reshape(o, -1).T @ g
        dx = col2im(dcols, x_shape, kh, kw, stride, padding, out_hw)
    return dx, dweight, dbias


def max_pool2d(x, size):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ValueError(f"pool size {size} larger than input {h}x{w}")
    xc = x[:, :, :ho * size, :wo * size]
    windows = (xc.reshape(n, c, ho, size, wo, size)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(n, c, ho, wo, size * size))
    # first maximal element wins ties so the subgradient is deterministic
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def max_pool2d_backward(grad_out, size, cache):
    idx, x_shape = cache
    n, c, h, w = x_shape
    ho, wo = grad_out.shape[2:]
    windows = np.zeros((n, c, ho, wo, size * size), dtype=grad_out.dtype)
    np.put_along_axis(windows, idx[..., None], grad_out[..., None], axis=-1)
    dx = np.zeros(x_shape, dtype=grad_out.dtype)
    dx[:, :, :ho * size, :wo * size] = (
        windows.reshape(n, c, ho, wo, size, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho * size, wo * size))
    return dx


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient with respect to ``logits``.

    Max-subtraction keeps large logits finite.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"logits must be 2-D, got shape {logits.shape}")
    n, k = logits.shape
    if n < 1:
        raise ValueError("cross_entropy needs a batch of at least one sample")
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad
