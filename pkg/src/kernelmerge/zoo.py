"""Architecture descriptions, seeded model construction and congruence checks."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import yaml

from .nn import (BatchNorm2d, Block, Conv2d, Flatten, Graph, Identity, Linear, MaxPool2d,
                 ReLU)
from .nn.functional import conv_output_size

ACTIVATIONS = ("relu", "none")
HEAD = "head"


class SpecError(ValueError):
    """Invalid architecture description."""


@dataclass(frozen=True)
class BlockSpec:
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    use_bn: bool = True
    activation: str = "relu"
    residual: bool = False
    pool: int = 0
    bias: bool = False


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, int, int]
    blocks: tuple[BlockSpec, ...]
    num_classes: int
    name: str = "model"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "blocks", tuple(
            b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.blocks))
        self.validate()

    def validate(self):
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"input_shape must be (C, H, W) with positive extents, "
                            f"got {self.input_shape}")
        if self.num_classes < 2:
            raise SpecError("num_classes must be at least 2")
        c, h, w = self.input_shape
        for i, b in enumerate(self.blocks):
            if b.out_channels < 1 or b.kernel_size < 1 or b.stride < 1 or b.pool < 0:
                raise SpecError(f"block {i}: channel, kernel and stride must be positive")
            if b.activation not in ACTIVATIONS:
                raise SpecError(f"block {i}: activation must be one of {ACTIVATIONS}")
            pad = b.kernel_size // 2
            h = conv_output_size(h, b.kernel_size, b.stride, pad)
            w = conv_output_size(w, b.kernel_size, b.stride, pad)
            if h < 1 or w < 1:
                raise SpecError(f"block {i}: spatial size collapses to {h}x{w}")
            if b.residual and (b.out_channels != c or b.stride != 1 or b.kernel_size % 2 == 0):
                raise SpecError(f"block {i}: residual skip needs matching shapes "
                                f"(in {c} channels, out {b.out_channels}, stride {b.stride})")
            if b.pool:
                h, w = h // b.pool, w // b.pool
                if h < 1 or w < 1:
                    raise SpecError(f"block {i}: pooling collapses spatial size")
            c = b.out_channels
        object.__setattr__(self, "_feature_shape", (c, h, w))

    @property
    def feature_shape(self):
        return self._feature_shape

    @property
    def feature_dim(self) -> int:
        return int(np.prod(self._feature_shape))

    @property
    def kernel_count(self) -> int:
        return sum(b.out_channels for b in self.blocks)

    def in_channels(self, index) -> int:
        return self.input_shape[0] if index == 0 else self.blocks[index - 1].out_channels

    def parameter_count(self) -> int:
        """Trainable scalars (conv, BN affine, head); BN running statistics excluded."""
        total = 0
        for i, b in enumerate(self.blocks):
            total += b.out_channels * self.in_channels(i) * b.kernel_size ** 2
            total += b.out_channels * (int(b.bias) + 2 * int(b.use_bn))
        return total + self.num_classes * (self.feature_dim + 1)

    def with_classes(self, num_classes: int) -> "ModelSpec":
        return replace(self, num_classes=int(num_classes))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "blocks": [asdict(b) for b in self.blocks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {"name", "input_shape", "num_classes", "blocks"}
        extra = set(d) - known
        if extra:
            raise SpecError(f"unknown spec keys: {sorted(extra)}")
        try:
            blocks = tuple(BlockSpec(**b) for b in d.get("blocks") or ())
            return cls(input_shape=tuple(d["input_shape"]), blocks=blocks,
                       num_classes=int(d["num_classes"]), name=str(d.get("name", "model")))
        except (KeyError, TypeError) as exc:
            raise SpecError(f"malformed spec: {exc}") from exc

    def digest(self, include_head=True) -> str:
        d = self.to_dict()
        if not include_head:
            d.pop("num_classes")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def smallnet(num_classes=4, input_shape=(1, 16, 16), channels=(8, 16, 32)) -> ModelSpec:
    """Reference desk-scale spec: conv-BN-ReLU-maxpool blocks and a linear head."""
    blocks = tuple(BlockSpec(out_channels=c, kernel_size=3, pool=2) for c in channels)
    return ModelSpec(input_shape=input_shape, blocks=blocks, num_classes=num_classes,
                     name="smallnet")


def save_spec(spec: ModelSpec, path):
    Path(path).write_text(yaml.safe_dump(spec.to_dict(), sort_keys=False))


def load_spec(path) -> ModelSpec:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise SpecError(f"{path}: not a valid spec file ({exc})") from exc
    if not isinstance(data, dict):
        raise SpecError(f"{path}: spec file must hold a mapping")
    return ModelSpec.from_dict(data)


# -- kernels ---------------------------------------------------------------

class KernelAddress(NamedTuple):
    layer_index: int
    out_channel: int


def enumerate_kernels(spec: ModelSpec) -> list[KernelAddress]:
    """Every backbone conv output channel, depth first then channel."""
    return [KernelAddress(i, c) for i, b in enumerate(spec.blocks) for c in range(b.out_channels)]


def block_name(index: int) -> str:
    return f"block{index}"


def conv_key(index: int, which="weight") -> str:
    return f"{block_name(index)}.conv.{which}"


# -- construction ----------------------------------------------------------

def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


def backbone_shapes(spec: ModelSpec) -> dict:
    """Names and shapes of every backbone entry ``spec`` implies."""
    shapes = {}
    for i, b in enumerate(spec.blocks):
        shapes[conv_key(i)] = (b.out_channels, spec.in_channels(i), b.kernel_size, b.kernel_size)
        if b.bias:
            shapes[conv_key(i, "bias")] = (b.out_channels,)
        if b.use_bn:
            for stat in BN_ENTRIES:
                shapes[f"{block_name(i)}.bn.{stat}"] = (b.out_channels,)
    return shapes


BN_ENTRIES = ("gamma", "beta", "running_mean", "running_var")


def init_backbone(spec: ModelSpec, seed: int) -> dict:
    """Kaiming-uniform conv kernels, identity BN; float64."""
    rng = _rng(seed, 0)
    tree = {}
    for i, b in enumerate(spec.blocks):
        fan_in = spec.in_channels(i) * b.kernel_size ** 2
        bound = np.sqrt(6.0 / fan_in)
        shape = (b.out_channels, spec.in_channels(i), b.kernel_size, b.kernel_size)
        tree[conv_key(i)] = rng.uniform(-bound, bound, size=shape)
        if b.bias:
            tree[conv_key(i, "bias")] = rng.uniform(-1 / np.sqrt(fan_in), 1 / np.sqrt(fan_in),
                                                    size=b.out_channels)
        if b.use_bn:
            prefix = f"{block_name(i)}.bn"
            tree[f"{prefix}.gamma"] = np.ones(b.out_channels)
            tree[f"{prefix}.beta"] = np.zeros(b.out_channels)
            tree[f"{prefix}.running_mean"] = np.zeros(b.out_channels)
            tree[f"{prefix}.running_var"] = np.ones(b.out_channels)
    return tree


def init_head(spec: ModelSpec, seed: int) -> dict:
    rng = _rng(seed, 1)
    bound = 1.0 / np.sqrt(spec.feature_dim)
    return {
        f"{HEAD}.weight": rng.uniform(-bound, bound, size=(spec.num_classes, spec.feature_dim)),
        f"{HEAD}.bias": rng.uniform(-bound, bound, size=spec.num_classes),
    }


def build_graph(spec: ModelSpec, tree=None, dtype="f32", conv_factory=None) -> Graph:
    """Instantiate the layers for ``spec``; load ``tree`` when given.

    ``conv_factory(index, block_spec)`` may replace the plain convolution of a
    block (used for the virtual merged graph).
    """
    layers = []
    for i, b in enumerate(spec.blocks):
        pad = b.kernel_size // 2
        if conv_factory is not None:
            conv = conv_factory(i, b)
        else:
            w = np.zeros((b.out_channels, spec.in_channels(i), b.kernel_size, b.kernel_size))
            conv = Conv2d(w, np.zeros(b.out_channels) if b.bias else None,
                          stride=b.stride, padding=pad)
        layers.append(Block(
            conv,
            bn=BatchNorm2d(b.out_channels) if b.use_bn else None,
            act=ReLU() if b.activation == "relu" else Identity(),
            residual=b.residual,
            pool=MaxPool2d(b.pool) if b.pool else None,
            name=block_name(i),
        ))
    layers.append(Flatten())
    layers.append(Linear(np.zeros((spec.num_classes, spec.feature_dim)),
                         np.zeros(spec.num_classes), name=HEAD))
    graph = Graph(layers, spec.input_shape, dtype=dtype)
    if tree is not None:
        graph.load_state(tree)
    return graph


def build_model(spec: ModelSpec, seed: int, dtype="f32"):
    """Return ``(graph, tree)`` with seeded initialization; deterministic per seed."""
    tree = {**init_backbone(spec, seed), **init_head(spec, seed)}
    graph = build_graph(spec, tree, dtype=dtype)
    return graph, graph.state()


def is_head_key(name: str) -> bool:
    return name.startswith(HEAD + ".")


def backbone(tree: dict) -> dict:
    return {k: v for k, v in tree.items() if not is_head_key(k)}


def head(tree: dict) -> dict:
    return {k: v for k, v in tree.items() if is_head_key(k)}


# -- congruence ------------------------------------------------------------

@dataclass
class CongruenceReport:
    ok: bool
    mismatches: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def __bool__(self):
        return self.ok

    def raise_if_failed(self):
        if not self.ok:
            raise IncongruentError("; ".join(self.mismatches))


class IncongruentError(ValueError):
    """Two parameter trees cannot be merged."""


def check_congruent(a: dict, b: dict) -> CongruenceReport:
    """Backbone entries must agree in names and shapes; heads may differ."""
    report = CongruenceReport(ok=True)
    ba, bb = backbone(a), backbone(b)
    for name in sorted(set(ba) | set(bb)):
        if name not in ba or name not in bb:
            side = "first" if name not in ba else "second"
            report.mismatches.append(f"{name}: missing from {side} tree")
        elif np.shape(ba[name]) != np.shape(bb[name]):
            report.mismatches.append(
                f"{name}: shape {np.shape(ba[name])} vs {np.shape(bb[name])}")
    ha, hb = head(a), head(b)
    if {k: np.shape(v) for k, v in ha.items()} != {k: np.shape(v) for k, v in hb.items()}:
        report.notes.append("heads differ; heads are re-initialized for the target task")
    report.ok = not report.mismatches
    return report
