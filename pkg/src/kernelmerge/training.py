"""Training regimes: source pretraining, FT, LP, LP-FT and the merge pipeline.

Every stage trains with cross entropy and AdamW, evaluates the validation
split after each epoch and carries forward the state of the best epoch
(highest validation macro-F1, ties broken by lower validation loss; the
untrained starting point competes as epoch 0). No augmentation is applied.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .checkpoint import Checkpoint, make_manifest
from .data import DatasetError, LabeledDataset, batch_indices
from .merge import (MergeError, MergePair, bake_graph,
                    build_virtual_merged_graph, init_merge_weights, simple_average, zero_source)
from .metrics import MetricsReport, classification_report
from .nn import AdamW, AdamWConfig, Graph, cross_entropy
from .zoo import (IncongruentError, ModelSpec, backbone, build_graph, build_model,
                  check_congruent, head, init_head)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StageConfig:
    stage: str = "ft"
    lr: float = 1e-5
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    dtype: str = "f32"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.stage not in ("lp", "ft"):
            raise ValueError(f"stage must be 'lp' or 'ft', got {self.stage!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.optimizer  # validates the optimizer fields

    @property
    def optimizer(self) -> AdamWConfig:
        return AdamWConfig(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                           weight_decay=self.weight_decay)

    @classmethod
    def lp(cls, **overrides) -> "StageConfig":
        return cls(**{"stage": "lp", "lr": 1e-4, "epochs": 50, **overrides})

    @classmethod
    def ft(cls, **overrides) -> "StageConfig":
        return cls(**{"stage": "ft", "lr": 1e-5, "epochs": 50, **overrides})

    @classmethod
    def source(cls, **overrides) -> "StageConfig":
        """Desk-scale pretraining of source models from scratch."""
        return cls(**{"stage": "ft", "lr": 1e-3, "epochs": 30, **overrides})


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_macro_f1: float


@dataclass
class RunRecord:
    stage: str
    config: dict = field(default_factory=dict)
    initial: EpochLog | None = None
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    checkpoint_path: str | None = None
    merge_weights_path: str | None = None
    substages: list = field(default_factory=list)
    elapsed: float = field(default=0.0, compare=False)

    def final(self) -> EpochLog:
        if self.epochs:
            return self.epochs[-1]
        return self.substages[-1].final()

    def find(self, stage) -> "RunRecord":
        if self.stage == stage:
            return self
        for sub in self.substages:
            try:
                return sub.find(stage)
            except KeyError:
                pass
        raise KeyError(stage)

    def lines(self, include_timing=False, _path=()):
        path = (*_path, self.stage)
        tag = "/".join(path)
        yield {"kind": "config", "stage": tag, "config": self.config}
        if self.initial is not None:
            yield {"kind": "epoch", "stage": tag, **asdict(self.initial)}
        for e in self.epochs:
            yield {"kind": "epoch", "stage": tag, **asdict(e)}
        for sub in self.substages:
            yield from sub.lines(include_timing, path)
        summary = {"kind": "summary", "stage": tag, "best_epoch": self.best_epoch,
                   "checkpoint_path": self.checkpoint_path,
                   "merge_weights_path": self.merge_weights_path}
        if include_timing:
            summary["elapsed"] = self.elapsed
        yield summary

    def to_jsonl(self, include_timing=False) -> str:
        """One JSON object per line; timing is omitted by default so reruns compare equal."""
        return "".join(json.dumps(line, sort_keys=True) + "\n"
                       for line in self.lines(include_timing))


# -- core loop ---------------------------------------------------------------

def _check_dataset(ds: LabeledDataset, spec: ModelSpec):
    if "train" not in ds.splits or ds.splits["train"].size == 0:
        raise DatasetError(f"dataset {ds.name!r} has an empty or missing train split")
    if "val" not in ds.splits:
        raise DatasetError(f"dataset {ds.name!r} has no val split")
    if ds.image_shape != spec.input_shape:
        raise DatasetError(f"dataset images {ds.image_shape} do not match model input "
                           f"{spec.input_shape}")


def _evaluate_graph(graph: Graph, x, y, start=0):
    logits = graph.predict_logits(x, start=start)
    loss, _ = cross_entropy(logits, y)
    report = classification_report(logits.argmax(axis=1), y, logits.shape[1])
    return float(loss), report


def _fit(graph: Graph, ds: LabeledDataset, cfg: StageConfig, record: RunRecord):
    """Train ``graph`` in place and leave it at the best validation epoch."""
    t0 = time.perf_counter()
    params = graph.trainable_parameters()
    if not params:
        raise ValueError("nothing to train: every parameter is frozen")
    opt = AdamW(params, cfg.optimizer)
    start = graph.frozen_prefix()
    x_train, y_train = ds.split("train")
    x_val, y_val = ds.split("val")
    train_idx = ds.splits["train"]
    if start:
        # frozen, mode-independent prefix: compute its output once
        x_train = graph.predict_logits(x_train, stop=start)
        if y_val.size:
            x_val = graph.predict_logits(x_val, stop=start)
    pos = np.empty(len(ds.labels), dtype=np.int64)
    pos[train_idx] = np.arange(train_idx.size)
    has_val = y_val.size > 0

    def score():
        if not has_val:
            return float("nan"), float("nan")
        loss, rep = _evaluate_graph(graph, x_val, y_val, start)
        return loss, rep.macro_f1

    train0, _ = _evaluate_graph(graph, x_train, y_train, start)
    val_loss, val_f1 = score()
    record.initial = EpochLog(0, train0, val_loss, val_f1)
    best_key = (val_f1, -val_loss)
    best_state, record.best_epoch = graph.state(), 0
    for epoch in range(1, cfg.epochs + 1):
        total, count = 0.0, 0
        for idx in batch_indices(ds, "train", cfg.batch_size, cfg.seed, True, epoch):
            rows = pos[idx]
            loss = graph.loss_and_backward(x_train[rows], y_train[rows], start=start)
            opt.step()
            total += float(loss) * rows.size
            count += rows.size
        val_loss, val_f1 = score()
        record.epochs.append(EpochLog(epoch, total / count, val_loss, val_f1))
        key = (val_f1, -val_loss)
        if not has_val or key > best_key:
            best_key, best_state, record.best_epoch = key, graph.state(), epoch
        log.debug("%s epoch %d: train %.4f val %.4f f1 %.4f", record.stage, epoch,
                  total / count, val_loss, val_f1)
    graph.load_state(best_state)
    record.elapsed = time.perf_counter() - t0
    log.info("%s finished in %.1fs (best epoch %d)", record.stage, record.elapsed,
             record.best_epoch)


def _stage_record(stage, cfg: StageConfig, **extra) -> RunRecord:
    return RunRecord(stage=stage, config={**asdict(cfg), **extra})


# -- regimes -------------------------------------------------------------------

def train_source(spec: ModelSpec, ds: LabeledDataset, cfg: StageConfig | None = None,
                 init: Checkpoint | None = None):
    """Train every parameter on ``ds``; returns ``(checkpoint, record)`` tagged ``pretrained``.

    Without ``init`` the model starts from ``build_model(spec, cfg.seed)``;
    with ``init`` its backbone is reused and the head re-initialized.
    """
    cfg = cfg or StageConfig.source()
    if spec.num_classes != ds.class_count:
        raise DatasetError(f"spec head has {spec.num_classes} classes, dataset "
                           f"{ds.name!r} has {ds.class_count}")
    _check_dataset(ds, spec)
    if init is None:
        graph, _ = build_model(spec, cfg.seed, dtype=cfg.dtype)
    else:
        _require_congruent(init, spec)
        graph = build_graph(spec, {**backbone(init.tree), **init_head(spec, cfg.seed)},
                            dtype=cfg.dtype)
    record = _stage_record("pretrain", cfg, task=ds.name)
    _fit(graph, ds, cfg, record)
    ckpt = Checkpoint(graph.state(), make_manifest(spec, "pretrained", ds.name, cfg.seed))
    return ckpt, record


def _require_congruent(init: Checkpoint, spec: ModelSpec):
    from .zoo import backbone_shapes

    got = {k: np.shape(v) for k, v in backbone(init.tree).items()}
    if got != backbone_shapes(spec):
        raise IncongruentError(f"checkpoint backbone does not match spec {spec.name!r}")


def _target_graph(init: Checkpoint, ds: LabeledDataset, cfg: StageConfig, keep_head: bool):
    spec = init.spec.with_classes(ds.class_count)
    _require_congruent(init, spec)
    _check_dataset(ds, spec)
    if keep_head:
        head_tree = head(init.tree)
        if {k: v.shape for k, v in head_tree.items()} != {
                k: v.shape for k, v in init_head(spec, 0).items()}:
            raise IncongruentError("checkpoint head does not match the target class count")
    else:
        head_tree = init_head(spec, cfg.seed)
    return spec, build_graph(spec, {**backbone(init.tree), **head_tree}, dtype=cfg.dtype)


def run_ft(init: Checkpoint, ds: LabeledDataset, cfg: StageConfig | None = None,
           keep_head=False):
    """Full fine-tuning; the head is re-initialized unless ``keep_head``."""
    cfg = cfg or StageConfig.ft()
    spec, graph = _target_graph(init, ds, cfg, keep_head)
    record = _stage_record("ft", cfg, task=ds.name, keep_head=keep_head)
    _fit(graph, ds, cfg, record)
    ckpt = Checkpoint(graph.state(), make_manifest(spec, "finetuned", ds.name, cfg.seed))
    return ckpt, record


def freeze_backbone(graph: Graph, freeze_bn=True) -> Graph:
    """Freeze every conv kernel; batch norm too when ``freeze_bn``. Only the head stays free."""
    for layer in graph.layers[:-1]:
        for _, p in layer.named_parameters():
            p.trainable = False
        if getattr(layer, "bn", None) is not None:
            layer.bn.freeze(freeze_bn)
    return graph


def run_lp(init: Checkpoint, ds: LabeledDataset, cfg: StageConfig | None = None,
           freeze_bn=True):
    """Linear probe: conv kernels frozen, fresh head trained.

    With ``freeze_bn`` (the default) batch norm is frozen as well and runs
    on its stored statistics.
    """
    cfg = cfg or StageConfig.lp()
    spec, graph = _target_graph(init, ds, cfg, keep_head=False)
    freeze_backbone(graph, freeze_bn)
    record = _stage_record("lp", cfg, task=ds.name, freeze_bn=freeze_bn)
    _fit(graph, ds, cfg, record)
    ckpt = Checkpoint(graph.state(), make_manifest(spec, "lp", ds.name, cfg.seed))
    return ckpt, record


def run_lpft(init: Checkpoint, ds: LabeledDataset, lp_cfg: StageConfig | None = None,
             ft_cfg: StageConfig | None = None, freeze_bn=True):
    lp_cfg = lp_cfg or StageConfig.lp()
    ft_cfg = ft_cfg or StageConfig.ft()
    t0 = time.perf_counter()
    lp_ckpt, lp_rec = run_lp(init, ds, lp_cfg, freeze_bn=freeze_bn)
    ckpt, ft_rec = run_ft(lp_ckpt, ds, ft_cfg, keep_head=True)
    record = RunRecord(stage="lpft", config={"task": ds.name}, substages=[lp_rec, ft_rec],
                       elapsed=time.perf_counter() - t0)
    return ckpt, record


def make_pair(b: Checkpoint | dict, c: Checkpoint | dict, spec: ModelSpec | None = None,
              zero: str | None = None) -> MergePair:
    """Pair two checkpoints; ``zero`` in ``{"b", "c"}`` swaps that side for a zero source."""
    if spec is None:
        spec = (b if isinstance(b, Checkpoint) else c).spec
    tb = b.tree if isinstance(b, Checkpoint) else b
    tc = c.tree if isinstance(c, Checkpoint) else c
    report = check_congruent(tb, tc)
    report.raise_if_failed()
    if zero == "b":
        tb = zero_source(spec)
    elif zero == "c":
        tc = zero_source(spec)
    elif zero is not None:
        raise ValueError("zero must be 'b', 'c' or None")
    return MergePair(tb, tc, spec)


def run_medmerge_lp(pair: MergePair, ds: LabeledDataset, cfg: StageConfig | None = None,
                    freeze_bn=False):
    """Stage 1: train merge logits, BN and a fresh head on the virtual merged graph.

    Returns ``(baked_checkpoint, merge_weights, record, graph)``.
    """
    cfg = cfg or StageConfig.lp()
    spec = pair.spec.with_classes(ds.class_count)
    pair = MergePair(pair.source_b, pair.source_c, spec)
    if pair.is_degenerate():
        raise MergeError("both sources have all-zero kernels; nothing to merge")
    _check_dataset(ds, spec)
    mw = init_merge_weights(spec)
    graph = build_virtual_merged_graph(pair, mw, dtype=cfg.dtype, freeze_bn=freeze_bn,
                                       head_seed=cfg.seed)
    record = _stage_record("merge-lp", cfg, task=ds.name, freeze_bn=freeze_bn)
    _fit(graph, ds, cfg, record)
    baked = bake_graph(graph, pair, mw)
    ckpt = Checkpoint(baked, make_manifest(spec, "baked", ds.name, cfg.seed))
    return ckpt, mw, record, graph


def run_medmerge(pair: MergePair, ds: LabeledDataset, lp_cfg: StageConfig | None = None,
                 ft_cfg: StageConfig | None = None, freeze_bn=False):
    """Merge-probe, bake, then fine-tune; returns ``(checkpoint, merge_weights, record)``."""
    lp_cfg = lp_cfg or StageConfig.lp()
    ft_cfg = ft_cfg or StageConfig.ft()
    t0 = time.perf_counter()
    baked, mw, lp_rec, _ = run_medmerge_lp(pair, ds, lp_cfg, freeze_bn=freeze_bn)
    ckpt, ft_rec = run_ft(baked, ds, ft_cfg, keep_head=True)
    record = RunRecord(stage="medmerge", config={"task": ds.name, "freeze_bn": freeze_bn},
                       substages=[lp_rec, ft_rec], elapsed=time.perf_counter() - t0)
    return ckpt, mw, record


def run_average_lpft(pair: MergePair, ds: LabeledDataset, lp_cfg: StageConfig | None = None,
                     ft_cfg: StageConfig | None = None, freeze_bn=True):
    """Baseline: uniform weight average of the sources, then LP-FT (plain by default)."""
    spec = pair.spec.with_classes(ds.class_count)
    avg = simple_average(MergePair(pair.source_b, pair.source_c, spec))
    init = Checkpoint(avg, make_manifest(spec, "baked", ds.name, 0))
    ckpt, record = run_lpft(init, ds, lp_cfg, ft_cfg, freeze_bn=freeze_bn)
    record.stage = "average-lpft"
    return ckpt, record


def evaluate(ckpt: Checkpoint, ds: LabeledDataset, split="test", dtype="f32") -> MetricsReport:
    spec = ckpt.spec
    if spec.num_classes != ds.class_count:
        raise DatasetError(f"checkpoint predicts {spec.num_classes} classes, dataset "
                           f"{ds.name!r} has {ds.class_count}")
    x, y = ds.split(split)
    if y.size == 0:
        raise DatasetError(f"split {split!r} of {ds.name!r} is empty")
    graph = build_graph(spec, ckpt.tree, dtype=dtype)
    logits = graph.predict_logits(x)
    return classification_report(logits.argmax(axis=1), y, spec.num_classes)


def with_seed(cfg: StageConfig, seed: int) -> StageConfig:
    return replace(cfg, seed=seed)
