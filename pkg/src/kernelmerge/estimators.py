"""scikit-learn style wrappers around the training regimes.

Images are passed as ``(n, channels, height, width)`` arrays, or
``(n, height, width)`` for single-channel models. Labels may be any
hashable values; they are encoded to ``0..k-1`` in sorted order and stored
in ``classes_``. A stratified slice of the training data (``validation_fraction``)
drives best-epoch selection.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .checkpoint import Checkpoint
from .data import LabeledDataset
from .merge import MergeWeights
from .metrics import macro_f1
from .nn import softmax
from .training import (RunRecord, StageConfig, make_pair, run_lpft, run_medmerge,
                       train_source)
from .zoo import build_graph, smallnet


def _as_checkpoint(source) -> Checkpoint:
    if isinstance(source, Checkpoint):
        return source
    return Checkpoint.load(source)


def _check_images(X, input_shape=None):
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_features=1)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (n, C, H, W) or (n, H, W), got {X.shape}")
    if input_shape is not None and tuple(X.shape[1:]) != tuple(input_shape):
        raise ValueError(f"images have shape {X.shape[1:]}, model expects {tuple(input_shape)}")
    return X


class _CheckpointClassifier(ClassifierMixin, BaseEstimator):
    """Shared prediction side; subclasses implement ``_train``."""

    def _dataset(self, X, y):
        X = _check_images(X)
        y = np.asarray(y)
        check_classification_targets(y)
        if len(X) != len(y):
            raise ValueError(f"{len(X)} images but {len(y)} labels")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        idx = np.arange(len(y))
        if self.validation_fraction > 0:
            tr, val = train_test_split(idx, test_size=self.validation_fraction,
                                       random_state=self.seed, stratify=encoded)
            tr, val = np.sort(tr), np.sort(val)
        else:
            tr, val = idx, idx[:0]
        return LabeledDataset(X.astype(np.float32), encoded.astype(np.int64),
                              {"train": tr, "val": val}, int(self.classes_.size),
                              name=type(self).__name__)

    def _stage(self, kind, lr, epochs):
        factory = getattr(StageConfig, kind)
        return factory(lr=lr, epochs=epochs, batch_size=self.batch_size, seed=self.seed,
                       dtype=self.dtype, weight_decay=self.weight_decay)

    def fit(self, X, y):
        ds = self._dataset(X, y)
        self.checkpoint_, self.record_ = self._train(ds)
        self.input_shape_ = ds.image_shape
        return self

    def decision_function(self, X):
        check_is_fitted(self, "checkpoint_")
        X = _check_images(X, self.input_shape_)
        graph = build_graph(self.checkpoint_.spec, self.checkpoint_.tree, dtype=self.dtype)
        return graph.predict_logits(X)

    def predict_proba(self, X):
        return softmax(self.decision_function(X).astype(np.float64))

    def predict(self, X):
        check_is_fitted(self, "classes_")
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def macro_f1(self, X, y) -> float:
        y = np.searchsorted(self.classes_, np.asarray(y))
        pred = self.decision_function(X).argmax(axis=1)
        return macro_f1(pred, y, self.classes_.size)[0]


class ConvNetClassifier(_CheckpointClassifier):
    """Train a small conv net from a seeded initialization."""

    def __init__(self, channels=(8, 16, 32), epochs=30, lr=1e-3, batch_size=64,
                 weight_decay=0.01, validation_fraction=0.2, seed=0, dtype="f32"):
        self.channels = channels
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.validation_fraction = validation_fraction
        self.seed = seed
        self.dtype = dtype

    def _train(self, ds):
        spec = smallnet(ds.class_count, ds.image_shape, tuple(self.channels))
        cfg = self._stage("source", self.lr, self.epochs)
        return train_source(spec, ds, cfg)


class LPFTClassifier(_CheckpointClassifier):
    """Linear probe then fine-tune, starting from a pretrained checkpoint (or its path)."""

    def __init__(self, source=None, lp_epochs=50, ft_epochs=50, lp_lr=1e-4, ft_lr=1e-5,
                 batch_size=64, weight_decay=0.01, freeze_bn=True, validation_fraction=0.2,
                 seed=0, dtype="f32"):
        self.source = source
        self.lp_epochs = lp_epochs
        self.ft_epochs = ft_epochs
        self.lp_lr = lp_lr
        self.ft_lr = ft_lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.freeze_bn = freeze_bn
        self.validation_fraction = validation_fraction
        self.seed = seed
        self.dtype = dtype

    def _train(self, ds):
        if self.source is None:
            raise ValueError("LPFTClassifier needs a pretrained source checkpoint")
        return run_lpft(_as_checkpoint(self.source), ds,
                        self._stage("lp", self.lp_lr, self.lp_epochs),
                        self._stage("ft", self.ft_lr, self.ft_epochs), freeze_bn=self.freeze_bn)


class MedMergeClassifier(_CheckpointClassifier):
    """Learn per-kernel merge coefficients between two sources, bake, then fine-tune.

    After ``fit``, ``merge_weights_`` holds the learned logits; ``sigmoid`` of a
    logit is the weight given to ``source_b``.
    """

    def __init__(self, source_b=None, source_c=None, lp_epochs=50, ft_epochs=50, lp_lr=1e-4,
                 ft_lr=1e-5, batch_size=64, weight_decay=0.01, freeze_bn=False,
                 zero_source=None, validation_fraction=0.2, seed=0, dtype="f32"):
        self.source_b = source_b
        self.source_c = source_c
        self.lp_epochs = lp_epochs
        self.ft_epochs = ft_epochs
        self.lp_lr = lp_lr
        self.ft_lr = ft_lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.freeze_bn = freeze_bn
        self.zero_source = zero_source
        self.validation_fraction = validation_fraction
        self.seed = seed
        self.dtype = dtype

    def _train(self, ds):
        if self.source_b is None or self.source_c is None:
            raise ValueError("MedMergeClassifier needs source_b and source_c")
        pair = make_pair(_as_checkpoint(self.source_b), _as_checkpoint(self.source_c),
                         zero=self.zero_source)
        ckpt, mw, record = run_medmerge(pair, ds, self._stage("lp", self.lp_lr, self.lp_epochs),
                                        self._stage("ft", self.ft_lr, self.ft_epochs),
                                        freeze_bn=self.freeze_bn)
        self.merge_weights_: MergeWeights = mw
        return ckpt, record


__all__ = ["ConvNetClassifier", "LPFTClassifier", "MedMergeClassifier", "RunRecord"]
