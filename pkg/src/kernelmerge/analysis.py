"""Merge-weight heatmaps and raw activation dumps."""
from __future__ import annotations

import csv
from dataclasses import astuple, dataclass, fields

import numpy as np

from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint
from .merge import MergeError, MergeWeights
from .nn import Graph
from .zoo import ModelSpec, block_name, build_graph

HEATMAP_COLUMNS = ("layer_name", "depth_index", "kernel_count", "mean_w", "std_w", "min_w",
                   "max_w")


@dataclass(frozen=True)
class HeatmapRow:
    layer_name: str
    depth_index: int
    kernel_count: int
    mean_w: float
    std_w: float
    min_w: float
    max_w: float


def heatmap_rows(mw: MergeWeights, spec: ModelSpec) -> list[HeatmapRow]:
    """Per conv layer summary of ``w = sigmoid(alpha)``, the weight on source b."""
    if mw.spec.digest(include_head=False) != spec.digest(include_head=False):
        raise MergeError("merge weights were learned for a different architecture")
    rows = []
    for i, w in enumerate(mw.layer_weights()):
        if w.size != spec.blocks[i].out_channels:
            raise MergeError(f"layer {i}: {w.size} weights for "
                             f"{spec.blocks[i].out_channels} kernels")
        rows.append(HeatmapRow(f"{block_name(i)}.conv", i, int(w.size), float(w.mean()),
                               float(w.std()), float(w.min()), float(w.max())))
    return rows


def export_heatmap(mw: MergeWeights, spec: ModelSpec, path) -> list[HeatmapRow]:
    """Write the heatmap CSV (header line ``HEATMAP_COLUMNS``) and return its rows."""
    rows = heatmap_rows(mw, spec)
    assert tuple(f.name for f in fields(HeatmapRow)) == HEATMAP_COLUMNS
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HEATMAP_COLUMNS)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in astuple(row)])
    return rows


def read_heatmap(path) -> list[HeatmapRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != HEATMAP_COLUMNS:
            raise ValueError(f"{path}: unexpected heatmap header {reader.fieldnames}")
        return [HeatmapRow(r["layer_name"], int(r["depth_index"]), int(r["kernel_count"]),
                           *(float(r[k]) for k in HEATMAP_COLUMNS[3:])) for r in reader]


def aggregate_mean_w(rows) -> float:
    """Kernel-weighted mean of ``w`` over every layer."""
    total = sum(r.kernel_count for r in rows)
    return sum(r.mean_w * r.kernel_count for r in rows) / total


def activation_names(graph: Graph) -> list[str]:
    """Names accepted by :func:`collect_activations` for ``graph``."""
    return list(graph.capture(np.zeros((1, *graph.input_shape))))


def collect_activations(model, x, layer_names, dtype="f64") -> dict:
    """Eval-mode activations of ``model`` (a Graph or Checkpoint) at ``layer_names``."""
    graph = model if isinstance(model, Graph) else build_graph(model.spec, model.tree, dtype)
    valid = activation_names(graph)
    unknown = [n for n in layer_names if n not in valid]
    if unknown:
        raise KeyError(f"unknown layer(s) {unknown}; valid names: {valid}")
    captured = graph.capture(np.asarray(x))
    return {n: np.ascontiguousarray(captured[n]) for n in layer_names}


def dump_activations(model, x, layer_names, path, dtype="f64") -> dict:
    """Write selected activations as a checkpoint-format file with stage ``activations``."""
    acts = collect_activations(model, x, layer_names, dtype)
    spec = model.spec if isinstance(model, Checkpoint) else None
    if spec is not None:
        manifest = ckpt_io.make_manifest(spec, "activations", layers=list(layer_names),
                                         input_shape=list(np.shape(x)))
    else:
        manifest = ckpt_io.Manifest(spec_digest="", stage="activations",
                                    extra={"layers": list(layer_names),
                                           "input_shape": list(np.shape(x))})
    ckpt_io.save(acts, manifest, path)
    return acts


def load_activations(path) -> dict:
    tree, manifest = ckpt_io.load(path)
    if manifest.stage != "activations":
        raise ckpt_io.CheckpointError(f"{path}: stage is {manifest.stage!r}, not activations")
    return tree
