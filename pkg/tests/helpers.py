"""Shared fixtures for building random models, pairs and tiny datasets."""
import numpy as np

from kernelmerge.data import LabeledDataset
from kernelmerge.merge import MergePair
from kernelmerge.zoo import build_model


def perturbed_tree(tree, seed):
    """Give BN statistics and gammas non-trivial values so tests exercise them."""
    rng = np.random.default_rng(seed + 500)
    out = {}
    for k, v in tree.items():
        v = np.array(v, dtype=np.float64)
        if k.endswith((".gamma", ".running_var")):
            v = rng.uniform(0.5, 1.5, size=v.shape)
        elif k.endswith((".beta", ".running_mean")):
            v = rng.normal(scale=0.3, size=v.shape)
        out[k] = v
    return out


def random_pair(spec, seed) -> MergePair:
    _, b = build_model(spec, 2 * seed, dtype="f64")
    _, c = build_model(spec, 2 * seed + 1, dtype="f64")
    return MergePair(perturbed_tree(b, seed), perturbed_tree(c, seed + 1000), spec)


def tiny_dataset(n=(24, 12, 12), classes=3, shape=(1, 8, 8), seed=0, separable=True):
    """Classes differ by a per-class mean pattern, so a small net can fit them."""
    rng = np.random.default_rng(seed)
    total = sum(n)
    labels = np.arange(total) % classes
    rng.shuffle(labels)
    protos = rng.normal(size=(classes, *shape)) * (2.0 if separable else 0.0)
    images = (protos[labels] + rng.normal(scale=0.5, size=(total, *shape))).astype(np.float32)
    splits, start = {}, 0
    for name, size in zip(("train", "val", "test"), n):
        splits[name] = np.arange(start, start + size)
        start += size
    return LabeledDataset(images, labels.astype(np.int64), splits, classes, name="tiny")
