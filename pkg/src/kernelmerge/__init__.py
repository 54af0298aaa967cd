"""Learned kernel-level merging of two pretrained convolutional backbones.

Typical use: pretrain (or load) two congruent source models, then train
per-kernel merge logits together with batch norm and a fresh head on the
target task, bake the merged weights and fine-tune.
"""
__version__ = "0.1.0"

from .checkpoint import Checkpoint
from .data import LabeledDataset, SynthTaskSpec, generate_synth, load_packed, save_packed
from .estimators import ConvNetClassifier, LPFTClassifier, MedMergeClassifier
from .merge import MergePair, MergeWeights, bake, bn_mean_init, simple_average, zero_source
from .metrics import classification_report, macro_f1
from .training import (RunRecord, StageConfig, evaluate, make_pair, run_average_lpft, run_ft,
                       run_lp, run_lpft, run_medmerge, run_medmerge_lp, train_source)
from .zoo import BlockSpec, ModelSpec, build_model, check_congruent, smallnet

__all__ = [
    "BlockSpec", "Checkpoint", "ConvNetClassifier", "LPFTClassifier", "LabeledDataset",
    "MedMergeClassifier", "MergePair", "MergeWeights", "ModelSpec", "RunRecord", "StageConfig",
    "SynthTaskSpec", "bake", "bn_mean_init", "build_model", "check_congruent",
    "classification_report", "evaluate", "generate_synth", "load_packed", "macro_f1",
    "make_pair", "run_average_lpft", "run_ft", "run_lp", "run_lpft", "run_medmerge",
    "run_medmerge_lp", "save_packed", "simple_average", "smallnet", "train_source", "zero_source",
]
