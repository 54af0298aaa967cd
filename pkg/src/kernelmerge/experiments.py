"""Desk-scale two-source transfer benchmark on the synthetic tasks.

Two sources are pretrained on the frequency (``source-a``) and blob
(``source-b``) tasks from the same seeded initialization. Each is then
transferred to the imbalanced mixed target, whose classes need both
feature families. The regimes compared are single-source LP-FT, a uniform
weight average followed by LP-FT, and the learned kernel merge.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .data import LabeledDataset, SynthTaskSpec, generate_synth
from .merge import MergeWeights
from .training import (StageConfig, evaluate, make_pair, run_average_lpft, run_lpft,
                       run_medmerge, run_medmerge_lp, train_source)
from .zoo import ModelSpec, smallnet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeskConfig:
    spec: ModelSpec = field(default_factory=smallnet)
    source_samples: tuple = (1024, 256, 256)
    target_samples: tuple = (512, 256, 512)
    target_class_weights: tuple = (0.4, 0.3, 0.2, 0.1)
    source_epochs: int = 20
    lp_batch_size: int = 8
    ft_batch_size: int = 64
    lp_epochs: int = 50
    ft_epochs: int = 50

    def lp(self, seed) -> StageConfig:
        return StageConfig.lp(seed=seed, batch_size=self.lp_batch_size, epochs=self.lp_epochs)

    def ft(self, seed) -> StageConfig:
        return StageConfig.ft(seed=seed, batch_size=self.ft_batch_size, epochs=self.ft_epochs)

    def target(self, seed) -> LabeledDataset:
        return generate_synth(SynthTaskSpec("mixed", samples=self.target_samples,
                                            class_weights=self.target_class_weights, seed=seed))

    def sources(self, seed) -> tuple[Checkpoint, Checkpoint]:
        """``(source_a, source_b)``, both trained from ``build_model(spec, seed)``."""
        cfg = StageConfig.source(seed=seed, epochs=self.source_epochs)
        out = []
        for family in ("frequency", "blob"):
            ds = generate_synth(SynthTaskSpec(family, samples=self.source_samples, seed=seed))
            ckpt, _ = train_source(self.spec, ds, cfg)
            out.append(ckpt)
        return tuple(out)


@dataclass
class SeedResult:
    seed: int
    scores: dict
    merge_weights: MergeWeights | None = None
    merge_lp_val_loss: float = float("nan")


def run_benchmark_seed(seed: int, cfg: DeskConfig | None = None, sources=None) -> SeedResult:
    """Test macro-F1 of every regime for one seed. The learned merge weights source b (blob)."""
    cfg = cfg or DeskConfig()
    a, b = sources if sources is not None else cfg.sources(seed)
    target = cfg.target(seed)
    lp, ft = cfg.lp(seed), cfg.ft(seed)
    scores = {
        "lpft_a": evaluate(run_lpft(a, target, lp, ft)[0], target).macro_f1,
        "lpft_b": evaluate(run_lpft(b, target, lp, ft)[0], target).macro_f1,
        "average": evaluate(run_average_lpft(make_pair(b, a), target, lp, ft)[0],
                            target).macro_f1,
    }
    ckpt, mw, record = run_medmerge(make_pair(b, a), target, lp, ft)
    scores["medmerge"] = evaluate(ckpt, target).macro_f1
    log.info("seed %d: %s", seed, scores)
    return SeedResult(seed, scores, mw, record.find("merge-lp").final().val_loss)


def frozen_bn_val_loss(seed, sources, cfg: DeskConfig | None = None) -> float:
    """Final merge-probe val loss with batch norm held at its mean initialization."""
    cfg = cfg or DeskConfig()
    a, b = sources
    _, _, record, _ = run_medmerge_lp(make_pair(b, a), cfg.target(seed), cfg.lp(seed),
                                      freeze_bn=True)
    return record.final().val_loss


def zero_merge_weights(seed, source, cfg: DeskConfig | None = None) -> MergeWeights:
    """Merge probe of ``source`` (as b) against an all-zero backbone (as c)."""
    cfg = cfg or DeskConfig()
    _, mw, _, _ = run_medmerge_lp(make_pair(source, source, zero="c"), cfg.target(seed),
                                  cfg.lp(seed))
    return mw


def medians(results) -> dict:
    keys = results[0].scores.keys()
    return {k: float(np.median([r.scores[k] for r in results])) for k in keys}
