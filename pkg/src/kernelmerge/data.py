"""Labeled image datasets, the ``.mmds`` packed format and synthetic tasks.

The synthetic generator builds three related tasks on small grayscale
images. Every image carries a sinusoidal grating and a small stamped
shape; which of the two decides the label depends on the task:

* ``frequency`` (source A): label = grating orientation, shapes are distractors;
* ``blob`` (source B): label = stamped shape, gratings are distractors;
* ``mixed`` (target): label = (orientation, shape) conjunction.

Pixel values are rounded to multiples of ``1/1024`` so generated datasets are
identical across platforms even though ``sin``/``cos`` are involved.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, pack, unpack

MMDS_MAGIC = b"MMDS"
PIXEL_GRID = 1024
FAMILIES = ("frequency", "blob", "mixed")
TASK_NAMES = {"frequency": "source-a", "blob": "source-b", "mixed": "target"}


class DatasetError(ValueError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    splits: dict
    class_count: int
    name: str = "dataset"
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = {k: np.asarray(v, dtype=np.int64) for k, v in self.splits.items()}
        if not self.class_names:
            self.class_names = [str(i) for i in range(self.class_count)]
        self.validate()

    def validate(self):
        n = len(self.labels)
        if self.images.ndim != 4 or len(self.images) != n:
            raise DatasetError(f"images must be (n, C, H, W) with n={n}, got {self.images.shape}")
        if self.class_count < 1 or len(self.class_names) != self.class_count:
            raise DatasetError("class_names must list every class")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DatasetError(f"labels must lie in [0, {self.class_count})")
        seen = np.zeros(n, dtype=bool)
        for split, idx in self.splits.items():
            if idx.ndim != 1:
                raise DatasetError(f"split {split!r} must be a flat index list")
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise DatasetError(f"split {split!r} has indices outside [0, {n})")
            if np.unique(idx).size != idx.size or seen[idx].any():
                raise DatasetError(f"split {split!r} overlaps another split or repeats indices")
            seen[idx] = True

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def split(self, name):
        """``(images, labels)`` of one split."""
        idx = self._indices(name)
        return self.images[idx], self.labels[idx]

    def _indices(self, name):
        try:
            return self.splits[name]
        except KeyError:
            raise DatasetError(f"unknown split {name!r}; available: {sorted(self.splits)}") from None

    def histogram(self, name) -> np.ndarray:
        return np.bincount(self.labels[self._indices(name)], minlength=self.class_count)

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (self.name == other.name and self.class_count == other.class_count
                and self.class_names == other.class_names
                and self.images.dtype == other.images.dtype
                and np.array_equal(self.images, other.images)
                and np.array_equal(self.labels, other.labels)
                and self.splits.keys() == other.splits.keys()
                and all(np.array_equal(self.splits[k], other.splits[k]) for k in self.splits))


# -- packed format -----------------------------------------------------------

def save_packed(ds: LabeledDataset, path):
    meta = {"name": ds.name, "class_count": ds.class_count, "class_names": list(ds.class_names),
            "splits": {k: v.tolist() for k, v in ds.splits.items()}}
    Path(path).write_bytes(pack(MMDS_MAGIC, meta, {"images": ds.images, "labels": ds.labels}))


def load_packed(path) -> LabeledDataset:
    try:
        meta, tensors = unpack(Path(path).read_bytes(), MMDS_MAGIC, str(path))
        return LabeledDataset(images=tensors["images"], labels=tensors["labels"],
                              splits=meta["splits"], class_count=meta["class_count"],
                              name=meta["name"], class_names=meta["class_names"])
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"{path}: corrupt header ({exc})") from exc
    except CheckpointError as exc:
        raise DatasetError(str(exc)) from exc


def pack_from_manifest(manifest_path) -> LabeledDataset:
    """Build a dataset from a JSON/YAML manifest pointing at ``.npy`` arrays.

    Keys: ``images`` and ``labels`` (paths, relative to the manifest),
    ``splits`` (mapping of split name to a ``.npy`` index file or an inline
    list), optional ``name``, ``class_count`` and ``class_names``.
    """
    import yaml

    manifest_path = Path(manifest_path)
    spec = yaml.safe_load(manifest_path.read_text())
    root = manifest_path.parent

    def arr(ref):
        if isinstance(ref, list):
            return np.asarray(ref)
        return np.load(root / ref, allow_pickle=False)

    try:
        images = arr(spec["images"])
        labels = arr(spec["labels"]).astype(np.int64)
        splits = {k: arr(v).astype(np.int64) for k, v in spec["splits"].items()}
    except KeyError as exc:
        raise DatasetError(f"{manifest_path}: manifest lacks {exc}") from exc
    if images.ndim == 3:
        images = images[:, None]
    if images.dtype not in (np.float32, np.float64):
        images = images.astype(np.float32)
    class_count = int(spec.get("class_count", int(labels.max()) + 1 if labels.size else 1))
    return LabeledDataset(images=images, labels=labels, splits=splits, class_count=class_count,
                          name=spec.get("name", manifest_path.stem),
                          class_names=list(spec.get("class_names") or []))


# -- batching ----------------------------------------------------------------

def batch_iter(ds: LabeledDataset, split, batch_size, seed=0, shuffle=True, epoch=0):
    """Yield ``(images, labels)`` minibatches; the last partial batch is kept.

    The permutation depends only on ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    idx = ds._indices(split)
    if shuffle:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), 7]))
        idx = idx[rng.permutation(idx.size)]
    for start in range(0, idx.size, batch_size):
        sel = idx[start:start + batch_size]
        yield ds.images[sel], ds.labels[sel]


def batch_indices(ds, split, batch_size, seed=0, shuffle=True, epoch=0):
    idx = ds._indices(split)
    if shuffle:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), 7]))
        idx = idx[rng.permutation(idx.size)]
    return [idx[s:s + batch_size] for s in range(0, idx.size, batch_size)]


# -- synthetic tasks ---------------------------------------------------------

SHAPES = {
    "square": np.ones((5, 5)),
    "ring": np.pad(np.zeros((3, 3)), 1, constant_values=1.0),
    "plus": np.array([[0, 0, 1, 0, 0]] * 2 + [[1] * 5] + [[0, 0, 1, 0, 0]] * 2, dtype=float),
    "x": np.eye(5) + np.fliplr(np.eye(5)) - np.diag([0, 0, 1, 0, 0]),
    "corner": np.array([[1] * 5] + [[1, 0, 0, 0, 0]] * 4, dtype=float),
    "tee": np.array([[1] * 5] + [[0, 0, 1, 0, 0]] * 4, dtype=float),
}
SHAPE_ORDER = ("square", "ring", "plus", "x", "corner", "tee")
MIXED_SHAPES = ("ring", "plus", "x", "square", "corner", "tee")


@dataclass(frozen=True)
class SynthTaskSpec:
    feature_family: str = "mixed"
    image_size: int = 16
    class_count: int = 4
    noise_std: float = 0.1
    samples: tuple = (512, 256, 256)
    class_weights: tuple | None = None
    grating_amplitude: float = 0.3
    shape_mass: float = 9.0
    seed: int = 0

    def validate(self):
        if self.feature_family not in FAMILIES:
            raise DatasetError(f"feature_family must be one of {FAMILIES}")
        if self.image_size < 8:
            raise DatasetError("image_size must be at least 8")
        if self.class_count < 2:
            raise DatasetError("class_count must be at least 2")
        if self.feature_family == "blob" and self.class_count > len(SHAPES):
            raise DatasetError(f"blob family supports at most {len(SHAPES)} classes")
        if self.feature_family == "mixed" and (self.class_count % 2
                                               or self.class_count // 2 > len(SHAPES)):
            raise DatasetError("mixed family needs an even class_count up to "
                               f"{2 * len(SHAPES)}")
        if len(self.samples) != 3 or min(self.samples) < 0:
            raise DatasetError("samples must give non-negative (train, val, test) sizes")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=float)
            if w.shape != (self.class_count,) or (w < 0).any() or w.sum() <= 0:
                raise DatasetError("class_weights must be non-negative, one per class")
        if self.noise_std < 0:
            raise DatasetError("noise_std must be non-negative")

    def class_counts(self, total) -> np.ndarray:
        """Exact per-class counts for a split of ``total`` samples (largest remainder)."""
        w = (np.ones(self.class_count) if self.class_weights is None
             else np.asarray(self.class_weights, dtype=float))
        raw = total * w / w.sum()
        counts = np.floor(raw).astype(np.int64)
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:total - counts.sum()]] += 1
        return counts


def _grating(size, angle, freq, phase):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    proj = xx * np.cos(angle) + yy * np.sin(angle)
    return np.sin(2 * np.pi * freq * proj / size + phase)


def _stamp(size, shape_name, row, col, mass):
    out = np.zeros((size, size))
    s = SHAPES[shape_name]
    out[row:row + 5, col:col + 5] = s * (mass / s.sum())
    return out


def _class_factors(spec: SynthTaskSpec, label):
    """Return ``(orientation angle or None, shape name or None)`` for a label."""
    k = spec.class_count
    if spec.feature_family == "frequency":
        return np.pi * label / k, None
    if spec.feature_family == "blob":
        return None, SHAPE_ORDER[label]
    return (np.pi / 2) * (label // (k // 2)), MIXED_SHAPES[label % (k // 2)]


def _render(spec, rng, label):
    size = spec.image_size
    angle, shape = _class_factors(spec, label)
    if angle is None:
        angle = np.pi * rng.integers(0, 4) / 4
    if shape is None:
        shape = SHAPE_ORDER[rng.integers(0, 4)]
    freq = 2.0 + 0.25 * rng.integers(0, 5)
    phase = 2 * np.pi * rng.integers(0, 16) / 16
    row, col = rng.integers(0, size - 4, size=2)
    img = spec.grating_amplitude * _grating(size, angle, freq, phase)
    img += _stamp(size, shape, row, col, spec.shape_mass)
    if spec.noise_std:
        img += spec.noise_std * rng.standard_normal((size, size))
    return np.round(img * PIXEL_GRID) / PIXEL_GRID


def class_names_for(spec: SynthTaskSpec) -> list[str]:
    names = []
    for label in range(spec.class_count):
        angle, shape = _class_factors(spec, label)
        parts = []
        if angle is not None:
            parts.append(f"{round(np.degrees(angle))}deg")
        if shape is not None:
            parts.append(shape)
        names.append("+".join(parts))
    return names


def generate_synth(spec: SynthTaskSpec) -> LabeledDataset:
    """Deterministic dataset for ``spec``; splits are contiguous index ranges."""
    spec.validate()
    family_code = FAMILIES.index(spec.feature_family)
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 1009, family_code]))
    images, labels, splits, start = [], [], {}, 0
    for split, total in zip(("train", "val", "test"), spec.samples):
        counts = spec.class_counts(total)
        split_labels = np.repeat(np.arange(spec.class_count), counts)
        split_labels = split_labels[rng.permutation(split_labels.size)]
        for label in split_labels:
            images.append(_render(spec, rng, int(label)))
        labels.append(split_labels)
        splits[split] = np.arange(start, start + total)
        start += total
    size = spec.image_size
    img = (np.stack(images).astype(np.float32).reshape(-1, 1, size, size) if images
           else np.zeros((0, 1, size, size), dtype=np.float32))
    return LabeledDataset(images=img, labels=np.concatenate(labels), splits=splits,
                          class_count=spec.class_count, name=TASK_NAMES[spec.feature_family],
                          class_names=class_names_for(spec))


def dataset_digest(ds: LabeledDataset) -> str:
    import hashlib

    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
    h.update(np.ascontiguousarray(ds.labels, dtype="<i8").tobytes())
    h.update(json.dumps({k: v.tolist() for k, v in ds.splits.items()}, sort_keys=True).encode())
    return h.hexdigest()
