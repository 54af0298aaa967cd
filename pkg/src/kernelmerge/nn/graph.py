"""Static layer-sequence computation graph."""
from __future__ import annotations

import numpy as np

from . import functional as F
from .layers import BatchNorm2d, Block, Layer, Parameter

ParamTree = dict  # name -> np.ndarray; insertion order is the canonical order

DTYPES = {"f32": np.float32, "f64": np.float64}


def resolve_dtype(dtype):
    if isinstance(dtype, str):
        try:
            return np.dtype(DTYPES[dtype])
        except KeyError:
            raise ValueError(f"unknown dtype {dtype!r}; expected one of {sorted(DTYPES)}") from None
    return np.dtype(dtype)


class Graph:
    """An ordered sequence of named layers mapping images to logits.

    The graph owns a mutable activation cache, so an instance must not be
    shared between threads; build one graph per worker instead.
    """

    def __init__(self, layers: list[Layer], input_shape, dtype="f64"):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.dtype = resolve_dtype(dtype)
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names: {names}")
        for layer in self.layers:
            layer.astype(self.dtype)
        self._forward_done = False
        self._start = 0

    # -- parameters -------------------------------------------------------

    def named_parameters(self):
        for layer in self.layers:
            for n, p in layer.named_parameters():
                yield f"{layer.name}.{n}", p

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def num_trainable(self) -> int:
        return int(sum(p.value.size for p in self.trainable_parameters()))

    def named_buffers(self):
        for layer in self.layers:
            for n, b in layer.named_buffers():
                yield f"{layer.name}.{n}", b

    def layer(self, name) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def state(self) -> ParamTree:
        """Copy of every parameter and buffer, keyed by qualified name."""
        tree = {}
        for layer in self.layers:
            for n, p in layer.named_parameters():
                tree[f"{layer.name}.{n}"] = p.value.copy()
            for n, b in layer.named_buffers():
                tree[f"{layer.name}.{n}"] = b.copy()
        return tree

    def load_state(self, tree: ParamTree, strict=True, skip_prefixes=()):
        """Copy values from ``tree`` into the graph, casting to the graph dtype."""
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        seen = set()
        for name, value in tree.items():
            if any(name.startswith(p) for p in skip_prefixes):
                continue
            value = np.asarray(value)
            if name in params:
                target = params[name]
                if target.value.shape != value.shape:
                    raise ValueError(f"shape mismatch for {name}: graph {target.value.shape}, "
                                     f"tree {value.shape}")
                target.value = value.astype(self.dtype, copy=True)
            elif name in buffers:
                if buffers[name].shape != value.shape:
                    raise ValueError(f"shape mismatch for {name}: graph {buffers[name].shape}, "
                                     f"tree {value.shape}")
                layer_name, rest = name.split(".", 1)
                self.layer(layer_name).set_buffer(rest, value.astype(self.dtype, copy=True))
            elif strict:
                raise KeyError(f"unexpected entry {name!r} in parameter tree")
            seen.add(name)
        if strict:
            missing = [n for n in [*params, *buffers]
                       if n not in seen and not any(n.startswith(p) for p in skip_prefixes)]
            if missing:
                raise KeyError(f"parameter tree is missing {missing}")
        return self

    # -- passes -----------------------------------------------------------

    def frozen_prefix(self) -> int:
        """Number of leading layers that are frozen and mode independent.

        Their output is a fixed function of the input, so it can be computed
        once and reused across epochs.
        """
        k = 0
        for layer in self.layers:
            if layer.has_trainable():
                break
            bn = getattr(layer, "bn", None)
            if isinstance(layer, BatchNorm2d):
                bn = layer
            if bn is not None and not bn.frozen_stats:
                break
            k += 1
        return k

    def forward(self, x, mode="train", capture=None, start=0, stop=None):
        """Run the graph; ``mode`` is ``"train"`` or ``"eval"``.

        ``capture`` may be a dict; it receives every intermediate activation
        keyed by layer name (and ``block.sub`` for block internals).
        ``start``/``stop`` run only ``layers[start:stop]``; ``x`` must then be
        the activation entering ``layers[start]``.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = np.asarray(x)
        if start == 0 and (x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape):
            raise ValueError(f"input shape {x.shape[1:]} does not match graph input "
                             f"{self.input_shape}")
        x = x.astype(self.dtype, copy=False)
        train = mode == "train"
        for layer in self.layers[start:stop]:
            if capture is not None and isinstance(layer, Block):
                inner = {}
                x = layer.forward(x, train, capture=inner)
                for k, v in inner.items():
                    capture[f"{layer.name}.{k}"] = v
            else:
                x = layer.forward(x, train)
            if capture is not None:
                capture[layer.name] = x
        F.check_finite(x, "forward pass output")
        self._forward_done = stop is None
        self._start = start
        return x

    def backward(self, grad_logits):
        """Propagate ``dL/dlogits`` back through the graph.

        Gradients flow through frozen layers; propagation stops below the
        first layer that owns a trainable parameter.
        """
        if not self._forward_done:
            raise RuntimeError("backward called without a preceding forward pass")
        for p in self.parameters():
            p.grad = None
        first = next((i for i, layer in enumerate(self.layers) if layer.has_trainable()),
                     len(self.layers))
        if first < self._start:
            raise RuntimeError("forward started after a trainable layer; cannot backpropagate")
        grad = np.asarray(grad_logits, dtype=self.dtype)
        for i in range(len(self.layers) - 1, first - 1, -1):
            grad = self.layers[i].backward(grad, need_input_grad=i > first)
        for p in self.trainable_parameters():
            if p.grad is not None:
                F.check_finite(p.grad, "gradient")
        self._forward_done = False

    def loss_and_backward(self, x, labels, start=0):
        logits = self.forward(x, "train", start=start)
        loss, grad = F.cross_entropy(logits, labels)
        self.backward(grad)
        return loss

    def predict_logits(self, x, batch_size=256, start=0, stop=None):
        out = [self.forward(x[i:i + batch_size], "eval", start=start, stop=stop)
               for i in range(0, len(x), batch_size)]
        self._forward_done = False
        if not out:
            return np.zeros((0, 0), dtype=self.dtype)
        return np.concatenate(out)

    def capture(self, x, mode="eval") -> dict:
        """Every intermediate activation of one forward pass, keyed by name."""
        acts = {}
        self.forward(x, mode, capture=acts)
        self._forward_done = False
        return acts
