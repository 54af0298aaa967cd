"""Layer set for feed-forward convolutional backbones.

Every layer caches what its backward pass needs during ``forward`` and
consumes the cache in ``backward``. Calling ``backward`` without a
preceding ``forward`` raises ``RuntimeError``.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F


class Parameter:
    """A tensor value plus its gradient slot and a trainable flag.

    ``grad`` is ``None`` until a backward pass fills it; the optimizer clears
    it again after each step so stale gradients are never reused.
    """

    __slots__ = ("value", "grad", "trainable")

    def __init__(self, value, trainable: bool = True):
        self.value = np.asarray(value)
        self.grad = None
        self.trainable = trainable

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        flag = "" if self.trainable else ", frozen"
        return f"Parameter(shape={self.value.shape}, dtype={self.value.dtype}{flag})"


class Layer:
    name: str = ""

    def forward(self, x, train: bool):
        raise NotImplementedError

    def backward(self, grad, need_input_grad: bool = True):
        raise NotImplementedError

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        return iter(())

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(())

    def set_buffer(self, name, value):
        raise KeyError(name)

    def has_trainable(self) -> bool:
        return any(p.trainable for _, p in self.named_parameters())

    def astype(self, dtype):
        for _, p in self.named_parameters():
            p.value = p.value.astype(dtype)
        for name, b in list(self.named_buffers()):
            self.set_buffer(name, b.astype(dtype))
        return self


def _need(cache, layer):
    if cache is None:
        raise RuntimeError(f"backward called on {layer!r} without a forward pass")
    return cache


class Conv2d(Layer):
    def __init__(self, weight, bias=None, stride=1, padding=0, name="conv"):
        self.weight = Parameter(weight)
        self.bias = None if bias is None else Parameter(bias)
        self.stride = stride
        self.padding = padding
        self.name = name
        self._cache = None

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def named_parameters(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias

    def forward(self, x, train):
        b = None if self.bias is None else self.bias.value
        out, self._cache = F.conv2d(x, self.weight.value, b, self.stride, self.padding)
        return out

    def kernel_backward(self, grad, need_input_grad=True):
        """Backward returning ``(dx, dweight, dbias)`` without touching ``.grad``."""
        cache = _need(self._cache, self)
        return F.conv2d_backward(grad, self.weight.value, cache, self.stride,
                                 self.padding, need_input_grad)

    def backward(self, grad, need_input_grad=True):
        dx, dw, db = self.kernel_backward(grad, need_input_grad)
        if self.weight.trainable:
            self.weight.grad = dw
        if self.bias is not None and self.bias.trainable:
            self.bias.grad = db
        return dx

    def __repr__(self):
        o, c, kh, kw = self.weight.shape
        return f"Conv2d({c}, {o}, kernel={kh}x{kw}, stride={self.stride}, name={self.name!r})"


class BatchNorm2d(Layer):
    """Per-channel batch normalization.

    In training mode the batch mean and (biased) variance normalize the input
    and the running statistics move by ``momentum``; the running variance is
    updated with the unbiased batch variance. With ``frozen_stats`` set, the
    layer normalizes with its running statistics even in training mode and
    never updates them.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5, name="bn", dtype=np.float64):
        if not 0.0 < momentum <= 1.0:
            raise ValueError("momentum must lie in (0, 1]")
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.frozen_stats = False
        self.name = name
        self._cache = None

    def named_parameters(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def named_buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var

    def set_buffer(self, name, value):
        if name not in ("running_mean", "running_var"):
            raise KeyError(name)
        setattr(self, name, np.array(value))

    def freeze(self, frozen=True):
        self.frozen_stats = frozen
        self.gamma.trainable = not frozen
        self.beta.trainable = not frozen
        return self

    def forward(self, x, train):
        gamma = self.gamma.value.reshape(1, -1, 1, 1)
        beta = self.beta.value.reshape(1, -1, 1, 1)
        if train and not self.frozen_stats:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
            unbiased = var * m / (m - 1) if m > 1 else var
            mom = self.momentum
            self.running_mean = (1 - mom) * self.running_mean + mom * mean
            self.running_var = (1 - mom) * self.running_var + mom * unbiased
            self._cache = ("batch", xhat, inv_std)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
            self._cache = ("running", xhat, inv_std)
        return gamma * xhat + beta

    def backward(self, grad, need_input_grad=True):
        kind, xhat, inv_std = _need(self._cache, self)
        if self.gamma.trainable:
            self.gamma.grad = (grad * xhat).sum(axis=(0, 2, 3))
        if self.beta.trainable:
            self.beta.grad = grad.sum(axis=(0, 2, 3))
        if not need_input_grad:
            return None
        scale = (self.gamma.value * inv_std).reshape(1, -1, 1, 1)
        if kind == "running":
            return grad * scale
        m = grad.shape[0] * grad.shape[2] * grad.shape[3]
        gsum = grad.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
        gxhat = (grad * xhat).sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
        return scale * (grad - gsum / m - xhat * gxhat / m)


class ReLU(Layer):
    name = "act"

    def __init__(self, name="act"):
        self.name = name
        self._cache = None

    def forward(self, x, train):
        self._cache = x > 0
        return np.where(self._cache, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad, need_input_grad=True):
        mask = _need(self._cache, self)
        return grad * mask if need_input_grad else None


class Identity(Layer):
    def __init__(self, name="act"):
        self.name = name

    def forward(self, x, train):
        return x

    def backward(self, grad, need_input_grad=True):
        return grad


class MaxPool2d(Layer):
    def __init__(self, size=2, name="pool"):
        self.size = size
        self.name = name
        self._cache = None

    def forward(self, x, train):
        out, self._cache = F.max_pool2d(x, self.size)
        return out

    def backward(self, grad, need_input_grad=True):
        cache = _need(self._cache, self)
        return F.max_pool2d_backward(grad, self.size, cache) if need_input_grad else None


class Flatten(Layer):
    def __init__(self, name="flatten"):
        self.name = name
        self._shape = None

    def forward(self, x, train):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad, need_input_grad=True):
        shape = _need(self._shape, self)
        return grad.reshape(shape)


class Linear(Layer):
    def __init__(self, weight, bias, name="head"):
        self.weight = Parameter(weight)
        self.bias = Parameter(bias)
        self.name = name
        self._x = None

    def named_parameters(self):
        yield "weight", self.weight
        yield "bias", self.bias

    def forward(self, x, train):
        self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, grad, need_input_grad=True):
        x = _need(self._x, self)
        if self.weight.trainable:
            self.weight.grad = grad.T @ x
        if self.bias.trainable:
            self.bias.grad = grad.sum(axis=0)
        return grad @ self.weight.value if need_input_grad else None


class Block(Layer):
    """conv -> [bn] -> [+ skip] -> activation -> [pool]."""

    def __init__(self, conv, bn=None, act=None, residual=False, pool=None, name="block"):
        self.conv = conv
        self.bn = bn
        self.act = act if act is not None else Identity()
        self.residual = residual
        self.pool = pool
        self.name = name

    def sublayers(self):
        out = [("conv", self.conv)]
        if self.bn is not None:
            out.append(("bn", self.bn))
        out.append(("act", self.act))
        if self.pool is not None:
            out.append(("pool", self.pool))
        return out

    def named_parameters(self):
        for sub, layer in self.sublayers():
            for n, p in layer.named_parameters():
                yield f"{sub}.{n}", p

    def named_buffers(self):
        for sub, layer in self.sublayers():
            for n, b in layer.named_buffers():
                yield f"{sub}.{n}", b

    def set_buffer(self, name, value):
        sub, rest = name.split(".", 1)
        dict(self.sublayers())[sub].set_buffer(rest, value)

    def forward(self, x, train, capture=None):
        h = self.conv.forward(x, train)
        if capture is not None:
            capture["conv"] = h
        if self.bn is not None:
            h = self.bn.forward(h, train)
            if capture is not None:
                capture["bn"] = h
        if self.residual:
            h = h + x
        h = self.act.forward(h, train)
        if capture is not None:
            capture["act"] = h
        if self.pool is not None:
            h = self.pool.forward(h, train)
            if capture is not None:
                capture["pool"] = h
        return h

    def backward(self, grad, need_input_grad=True):
        if self.pool is not None:
            grad = self.pool.backward(grad)
        grad = self.act.backward(grad)
        skip = grad if self.residual else None
        if self.bn is not None:
            conv_needed = need_input_grad or self.conv.has_trainable()
            grad = self.bn.backward(grad, need_input_grad=conv_needed)
            if not conv_needed:
                return None
        if not need_input_grad and not self.conv.has_trainable():
            return None
        dx = self.conv.backward(grad, need_input_grad=need_input_grad)
        if need_input_grad and skip is not None:
            dx = dx + skip
        return dx
