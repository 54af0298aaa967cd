"""Kernel-level learned merging of two congruent backbones.

Each backbone conv output channel ``j`` gets a logit ``alpha_j``; the merged
kernel is ``w_j * K_b + (1 - w_j) * K_c`` with ``w_j = sigmoid(alpha_j)``.
During linear probing the merged kernels are recomputed from the current
logits on every forward pass (the *virtual* merged graph) so the probe's
gradients reach the logits while both source backbones stay frozen.
Baking materializes the merged kernels into an ordinary parameter tree.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import Graph, Layer, Parameter, resolve_dtype, sigmoid
from .nn import functional as F
from .zoo import (BN_ENTRIES, IncongruentError, KernelAddress, ModelSpec, backbone,
                  backbone_shapes, block_name, build_graph, check_congruent, conv_key,
                  enumerate_kernels, head, init_head)

MMW_HEADER = "# kernelmerge merge weights"
MMW_VERSION = 1


class MergeError(ValueError):
    """The requested merge is not well defined."""


# -- merge weights ---------------------------------------------------------

class MergeWeights:
    """One trainable logit per backbone kernel, grouped per conv layer.

    ``alphas[i]`` is a :class:`Parameter` of shape ``(out_channels_i,)``;
    the same Parameter objects are shared with the virtual merged graph so
    optimizer updates are visible here.
    """

    def __init__(self, spec: ModelSpec, alphas: list[Parameter]):
        if len(alphas) != len(spec.blocks):
            raise MergeError(f"expected {len(spec.blocks)} logit groups, got {len(alphas)}")
        for i, (b, a) in enumerate(zip(spec.blocks, alphas)):
            if a.value.shape != (b.out_channels,):
                raise MergeError(f"layer {i}: expected {b.out_channels} logits, "
                                 f"got shape {a.value.shape}")
        self.spec = spec
        self.alphas = alphas

    def __len__(self):
        return sum(a.value.size for a in self.alphas)

    def __getitem__(self, address: KernelAddress) -> float:
        layer, channel = address
        return float(self.alphas[layer].value[channel])

    def items(self):
        for addr in enumerate_kernels(self.spec):
            yield addr, self[addr]

    def flat_alphas(self) -> np.ndarray:
        if not self.alphas:
            return np.zeros(0)
        return np.concatenate([a.value.astype(np.float64) for a in self.alphas])

    def layer_weights(self) -> list[np.ndarray]:
        """Effective coefficients toward source b, per layer."""
        return [sigmoid(a.value.astype(np.float64)) for a in self.alphas]

    def copy(self) -> "MergeWeights":
        return MergeWeights(self.spec, [Parameter(a.value.copy(), a.trainable)
                                        for a in self.alphas])

    @classmethod
    def from_flat(cls, spec: ModelSpec, flat) -> "MergeWeights":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (spec.kernel_count,):
            raise MergeError(f"expected {spec.kernel_count} logits, got {flat.shape}")
        out, start = [], 0
        for b in spec.blocks:
            out.append(Parameter(flat[start:start + b.out_channels].copy()))
            start += b.out_channels
        return cls(spec, out)

    def __repr__(self):
        return f"MergeWeights(kernels={len(self)}, layers={len(self.alphas)})"


def init_merge_weights(spec: ModelSpec) -> MergeWeights:
    """All logits zero, so every coefficient starts at sigmoid(0) = 0.5."""
    if spec.kernel_count == 0:
        raise MergeError("spec has no convolutional kernels to merge")
    return MergeWeights(spec, [Parameter(np.zeros(b.out_channels)) for b in spec.blocks])


def save_merge_weights(mw: MergeWeights, path):
    """Text sidecar: one ``layer channel alpha`` line per kernel, sorted by address."""
    lines = [MMW_HEADER,
             f"format_version {MMW_VERSION}",
             f"spec_digest {mw.spec.digest(include_head=False)}",
             f"kernels {len(mw)}",
             "layer_index out_channel alpha"]
    lines += [f"{a.layer_index} {a.out_channel} {alpha!r}" for a, alpha in mw.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_merge_weights(path, spec: ModelSpec) -> MergeWeights:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != MMW_HEADER:
        raise MergeError(f"{path}: not a merge-weights file")
    meta = dict(line.split(" ", 1) for line in lines[1:4])
    if int(meta.get("format_version", -1)) != MMW_VERSION:
        raise MergeError(f"{path}: unsupported format_version {meta.get('format_version')}")
    if meta.get("spec_digest") != spec.digest(include_head=False):
        raise MergeError(f"{path}: weights were learned for a different architecture")
    rows = [line.split() for line in lines[5:] if line.strip()]
    if len(rows) != int(meta["kernels"]) or len(rows) != spec.kernel_count:
        raise MergeError(f"{path}: expected {spec.kernel_count} kernels, found {len(rows)}")
    expected = enumerate_kernels(spec)
    flat = np.empty(len(rows))
    for k, (row, addr) in enumerate(zip(rows, expected)):
        if (int(row[0]), int(row[1])) != tuple(addr):
            raise MergeError(f"{path}: line for kernel {tuple(addr)} out of order")
        flat[k] = float(row[2])
    return MergeWeights.from_flat(spec, flat)


# -- pure merge operations ---------------------------------------------------

def merged_kernel(kb, kc, w, w_c=None):
    """Convex combination ``w * kb + (1 - w) * kc``.

    ``w`` is a scalar or a per-output-channel vector. ``w_c`` overrides the
    complementary weight (the virtual graph passes ``sigmoid(-alpha)`` so
    swapping sources and negating logits is exact). The result is clipped
    to the interval spanned by the sources, which only corrects rounding.
    """
    kb = np.asarray(kb)
    kc = np.asarray(kc)
    if kb.shape != kc.shape:
        raise ValueError(f"kernel shapes differ: {kb.shape} vs {kc.shape}")
    w = np.asarray(w)
    w_c = 1.0 - w if w_c is None else np.asarray(w_c)
    if w.ndim == 1 and kb.ndim > 1:
        w = w.reshape((-1,) + (1,) * (kb.ndim - 1))
        w_c = w_c.reshape(w.shape)
    out = w * kb + w_c * kc
    return np.clip(out, np.minimum(kb, kc), np.maximum(kb, kc)).astype(
        np.result_type(kb, kc, w), copy=False)


@dataclass
class MergePair:
    source_b: dict
    source_c: dict
    spec: ModelSpec

    def __post_init__(self):
        report = check_congruent(self.source_b, self.source_c)
        if not report.ok:
            raise IncongruentError("sources are not congruent: " + "; ".join(report.mismatches))
        want = backbone_shapes(self.spec)
        got = {k: np.shape(v) for k, v in backbone(self.source_b).items()}
        if got != want:
            diff = sorted(set(want.items()) ^ set(got.items()))
            raise IncongruentError(f"sources do not match spec {self.spec.name!r}: {diff[:4]}")

    def swapped(self) -> "MergePair":
        return MergePair(self.source_c, self.source_b, self.spec)

    def is_degenerate(self) -> bool:
        """True when both sources have all-zero conv kernels."""
        return all(not np.any(self.source_b[conv_key(i)]) and not np.any(self.source_c[conv_key(i)])
                   for i in range(len(self.spec.blocks)))


def _check_mw(pair: MergePair, mw: MergeWeights):
    if mw.spec.digest(include_head=False) != pair.spec.digest(include_head=False):
        raise MergeError("merge weights were built for a different architecture")


def bn_mean_init(pair: MergePair) -> dict:
    """Every BN statistic set to the elementwise mean of the two sources."""
    out = {}
    for i, b in enumerate(pair.spec.blocks):
        if not b.use_bn:
            continue
        for stat in BN_ENTRIES:
            key = f"{block_name(i)}.bn.{stat}"
            out[key] = (np.asarray(pair.source_b[key], dtype=np.float64)
                        + np.asarray(pair.source_c[key], dtype=np.float64)) / 2
    return out


def bake(pair: MergePair, mw: MergeWeights, trained_bn: dict, trained_head: dict,
         dtype="f64") -> dict:
    """Materialize merged kernels plus the post-probe BN state and head."""
    _check_mw(pair, mw)
    dt = resolve_dtype(dtype)
    bn_keys = [k for k in bn_mean_init(pair)]
    missing = [k for k in bn_keys if k not in trained_bn]
    if missing:
        raise MergeError(f"trained BN state is missing {missing}")
    if not trained_head:
        raise MergeError("trained head is missing")
    tree = {}
    for i, b in enumerate(pair.spec.blocks):
        alpha = mw.alphas[i].value.astype(dt)
        w, w_c = sigmoid(alpha), sigmoid(-alpha)
        for which in ("weight", "bias") if b.bias else ("weight",):
            key = conv_key(i, which)
            kb = np.asarray(pair.source_b[key]).astype(dt)
            kc = np.asarray(pair.source_c[key]).astype(dt)
            tree[key] = merged_kernel(kb, kc, w, w_c)
        if b.use_bn:
            for stat in BN_ENTRIES:
                key = f"{block_name(i)}.bn.{stat}"
                tree[key] = np.array(trained_bn[key], dtype=dt)
    for k, v in trained_head.items():
        tree[k] = np.array(v, dtype=dt)
    return tree


def simple_average(pair: MergePair, head_seed: int = 0) -> dict:
    """Uniform average of every backbone tensor; head freshly initialized."""
    tree = {}
    for i, b in enumerate(pair.spec.blocks):
        for which in ("weight", "bias") if b.bias else ("weight",):
            key = conv_key(i, which)
            tree[key] = merged_kernel(np.asarray(pair.source_b[key], dtype=np.float64),
                                      np.asarray(pair.source_c[key], dtype=np.float64), 0.5)
        if b.use_bn:
            bn = bn_mean_init(pair)
            for stat in BN_ENTRIES:
                key = f"{block_name(i)}.bn.{stat}"
                tree[key] = bn[key]
    tree.update(init_head(pair.spec, head_seed))
    return tree


def zero_source(spec: ModelSpec, head_seed: int = 0) -> dict:
    """All-zero conv kernels with identity batch norm."""
    tree = {}
    for name, shape in backbone_shapes(spec).items():
        if name.endswith((".gamma", ".running_var")):
            tree[name] = np.ones(shape)
        else:
            tree[name] = np.zeros(shape)
    tree.update(init_head(spec, head_seed))
    return tree


# -- virtual merged graph ----------------------------------------------------

class MergedConv2d(Layer):
    """Convolution whose kernel is recomputed from two frozen sources and a logit vector."""

    def __init__(self, kb, kc, alpha: Parameter, bias_b=None, bias_c=None,
                 stride=1, padding=0, name="conv"):
        self.weight_b = Parameter(kb, trainable=False)
        self.weight_c = Parameter(kc, trainable=False)
        self.bias_b = None if bias_b is None else Parameter(bias_b, trainable=False)
        self.bias_c = None if bias_c is None else Parameter(bias_c, trainable=False)
        self.alpha = alpha
        self.stride = stride
        self.padding = padding
        self.name = name
        self._cache = None

    def named_parameters(self):
        yield "alpha", self.alpha
        yield "weight_b", self.weight_b
        yield "weight_c", self.weight_c
        if self.bias_b is not None:
            yield "bias_b", self.bias_b
            yield "bias_c", self.bias_c

    def astype(self, dtype):
        # the logits are shared with MergeWeights and must stay the same object
        for _, p in self.named_parameters():
            p.value = p.value.astype(dtype, copy=False)
        return self

    def current_kernel(self):
        w, w_c = sigmoid(self.alpha.value), sigmoid(-self.alpha.value)
        kernel = merged_kernel(self.weight_b.value, self.weight_c.value, w, w_c)
        bias = None
        if self.bias_b is not None:
            bias = merged_kernel(self.bias_b.value, self.bias_c.value, w, w_c)
        return kernel, bias

    def forward(self, x, train):
        kernel, bias = self.current_kernel()
        out, cache = F.conv2d(x, kernel, bias, self.stride, self.padding)
        self._cache = (cache, kernel)
        return out

    def kernel_grad(self, grad, need_input_grad=True):
        """``(dx, dL/dkernel, dL/dbias)`` at the current merged kernel."""
        if self._cache is None:
            raise RuntimeError(f"backward called on {self.name} without a forward pass")
        cache, kernel = self._cache
        return F.conv2d_backward(grad, kernel, cache, self.stride, self.padding, need_input_grad)

    def backward(self, grad, need_input_grad=True):
        dx, dkernel, dbias = self.kernel_grad(grad, need_input_grad)
        if self.alpha.trainable:
            a = self.alpha.value
            dsig = sigmoid(a) * sigmoid(-a)
            diff = self.weight_b.value - self.weight_c.value
            inner = (dkernel * diff).reshape(diff.shape[0], -1).sum(axis=1)
            if self.bias_b is not None:
                inner = inner + dbias * (self.bias_b.value - self.bias_c.value)
            self.alpha.grad = dsig * inner
        return dx


def build_virtual_merged_graph(pair: MergePair, mw: MergeWeights, head_tree=None, bn=None,
                               dtype="f64", freeze_bn=False, head_seed=0) -> Graph:
    """Graph whose conv kernels are merged on the fly from the frozen sources.

    BN starts from ``bn`` (default: :func:`bn_mean_init`) and is trainable
    unless ``freeze_bn``; the head starts from ``head_tree`` (default: fresh
    initialization with ``head_seed``) and is trainable.
    """
    _check_mw(pair, mw)
    if pair.spec.kernel_count == 0:
        raise MergeError("spec has no convolutional kernels to merge")

    def factory(i, b):
        bias_b = pair.source_b[conv_key(i, "bias")] if b.bias else None
        bias_c = pair.source_c[conv_key(i, "bias")] if b.bias else None
        return MergedConv2d(np.asarray(pair.source_b[conv_key(i)]),
                            np.asarray(pair.source_c[conv_key(i)]),
                            mw.alphas[i], bias_b, bias_c,
                            stride=b.stride, padding=b.kernel_size // 2)

    graph = build_graph(pair.spec, None, dtype=dtype, conv_factory=factory)
    state = dict(bn if bn is not None else bn_mean_init(pair))
    state.update(head_tree if head_tree is not None else init_head(pair.spec, head_seed))
    graph.load_state(state, strict=False)
    for layer in graph.layers:
        if getattr(layer, "bn", None) is not None:
            layer.bn.freeze(freeze_bn)
    return graph


def virtual_state(graph: Graph):
    """Split a virtual graph's state into ``(bn_state, head_tree)``."""
    state = graph.state()
    bn = {k: v for k, v in state.items() if ".bn." in k}
    return bn, head(state)


def bake_graph(graph: Graph, pair: MergePair, mw: MergeWeights) -> dict:
    """Bake the current state of a virtual merged graph, in the graph's dtype."""
    bn, head_tree = virtual_state(graph)
    return bake(pair, mw, bn, head_tree, dtype=graph.dtype)


def merge_trainable_count(graph: Graph) -> dict:
    """Trainable scalar counts split into merge logits, BN and head."""
    counts = {"logits": 0, "bn": 0, "head": 0, "other": 0}
    for name, p in graph.named_parameters():
        if not p.trainable:
            continue
        if name.endswith(".alpha"):
            counts["logits"] += p.value.size
        elif ".bn." in name:
            counts["bn"] += p.value.size
        elif name.startswith("head."):
            counts["head"] += p.value.size
        else:
            counts["other"] += p.value.size
    return counts
