"""``kernelmerge`` command line.

Every subcommand writes ``<command>.config.json`` (the parsed arguments,
seed included, plus the argv that reproduces the run) and
``<command>.summary.jsonl`` into ``--out-dir``. Summaries carry no timing
and name artifacts relative to the output directory, so rerunning a
command yields byte-identical summaries.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import dump_activations, export_heatmap
from .checkpoint import Checkpoint, CheckpointError
from .data import (FAMILIES, DatasetError, SynthTaskSpec, dataset_digest, generate_synth,
                   load_packed, pack_from_manifest, save_packed)
from .merge import MergeError, load_merge_weights, save_merge_weights
from .training import (RunRecord, StageConfig, evaluate, make_pair, run_average_lpft, run_ft,
                       run_lpft, run_medmerge, train_source)
from .zoo import IncongruentError, SpecError, load_spec, smallnet

log = logging.getLogger("kernelmerge")

MODEL_FILE = "model.mmck"
WEIGHTS_FILE = "merge.mmw"
HEATMAP_FILE = "heatmap.csv"


class CLIError(Exception):
    pass


# -- output helpers ------------------------------------------------------------

def _json_default(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, default=_json_default)


def _echo(args, argv) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "out_dir")}
    return {"command": args.command, "version": __version__, "seed": getattr(args, "seed", None),
            "args": cfg, "argv": list(argv)}


def _write_outputs(args, argv, lines):
    out = Path(args.out_dir)
    echo = _echo(args, argv)
    (out / f"{args.command}.config.json").write_text(
        json.dumps(echo, sort_keys=True, indent=2, default=_json_default) + "\n")
    body = [_dumps({"kind": "run", "command": args.command, "seed": echo["seed"],
                    "config": echo["args"]})]
    body += [_dumps(line) for line in lines]
    (out / f"{args.command}.summary.jsonl").write_text("\n".join(body) + "\n")


def _record_lines(record: RunRecord):
    yield from record.lines()


def _metrics_line(report, split):
    return {"kind": "metrics", "split": split, **report.to_dict()}


# -- loaders -------------------------------------------------------------------

def _existing(path, what) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"{what} not found: {path}")
    return p


def _load_data(path):
    return load_packed(_existing(path, "dataset"))


def _load_ckpt(path):
    return Checkpoint.load(_existing(path, "checkpoint"))


def _load_any_spec(path):
    p = _existing(path, "spec")
    if p.suffix == ".mmck":
        return Checkpoint.load(p).spec
    return load_spec(p)


def _stage(args, kind, prefix=""):
    lr = getattr(args, f"{prefix}lr")
    epochs = getattr(args, f"{prefix}epochs")
    batch = getattr(args, f"{prefix}batch_size")
    factory = getattr(StageConfig, kind)
    overrides = {"seed": args.seed, "dtype": args.dtype, "weight_decay": args.weight_decay}
    if lr is not None:
        overrides["lr"] = lr
    if epochs is not None:
        overrides["epochs"] = epochs
    if batch is not None:
        overrides["batch_size"] = batch
    return factory(**overrides)


def _test_metrics(ckpt, ds, dtype):
    if ds.splits.get("test") is None or ds.splits["test"].size == 0:
        return []
    return [_metrics_line(evaluate(ckpt, ds, "test", dtype), "test")]


# -- subcommands -----------------------------------------------------------------

def cmd_dataset_gen(args):
    spec = SynthTaskSpec(feature_family=args.family, image_size=args.image_size,
                         class_count=args.classes, noise_std=args.noise,
                         samples=tuple(args.samples),
                         class_weights=tuple(args.class_weights) if args.class_weights else None,
                         seed=args.seed)
    ds = generate_synth(spec)
    save_packed(ds, args.out)
    return [_dataset_line(ds)]


def cmd_dataset_pack(args):
    ds = pack_from_manifest(_existing(args.manifest, "manifest"))
    save_packed(ds, args.out)
    return [_dataset_line(ds)]


def _dataset_line(ds):
    return {"kind": "dataset", "name": ds.name, "class_count": ds.class_count,
            "digest": dataset_digest(ds),
            "splits": {k: int(v.size) for k, v in ds.splits.items()},
            "train_histogram": ds.histogram("train").tolist() if "train" in ds.splits else None}


def _save_model(args, ckpt, record):
    ckpt.save(Path(args.out_dir) / MODEL_FILE)
    record.checkpoint_path = MODEL_FILE


def cmd_train_source(args):
    ds = _load_data(args.data)
    if args.spec:
        spec = _load_any_spec(args.spec)
    else:
        spec = smallnet(ds.class_count, ds.image_shape, tuple(args.channels))
    init = _load_ckpt(args.init) if args.init else None
    ckpt, record = train_source(spec, ds, _stage(args, "source"), init=init)
    _save_model(args, ckpt, record)
    return [*_record_lines(record), *_test_metrics(ckpt, ds, args.dtype)]


def cmd_ft(args):
    ds = _load_data(args.data)
    ckpt, record = run_ft(_load_ckpt(args.init), ds, _stage(args, "ft"))
    _save_model(args, ckpt, record)
    return [*_record_lines(record), *_test_metrics(ckpt, ds, args.dtype)]


def cmd_lpft(args):
    ds = _load_data(args.data)
    ckpt, record = run_lpft(_load_ckpt(args.init), ds, _stage(args, "lp", "lp_"),
                            _stage(args, "ft", "ft_"), freeze_bn=not args.train_bn)
    _save_model(args, ckpt, record)
    return [*_record_lines(record), *_test_metrics(ckpt, ds, args.dtype)]


def cmd_medmerge(args):
    ds = _load_data(args.data)
    b, c = (_load_ckpt(p) for p in args.pair)
    pair = make_pair(b, c, zero=args.zero_source)
    lp, ft = _stage(args, "lp", "lp_"), _stage(args, "ft", "ft_")
    lines = []
    if args.baseline == "simple-average":
        ckpt, record = run_average_lpft(pair, ds, lp, ft)
    else:
        ckpt, mw, record = run_medmerge(pair, ds, lp, ft, freeze_bn=args.ablate_frozen_bn)
        out = Path(args.out_dir)
        save_merge_weights(mw, out / WEIGHTS_FILE)
        rows = export_heatmap(mw, mw.spec, out / HEATMAP_FILE)
        record.merge_weights_path = WEIGHTS_FILE
        w = np.concatenate(mw.layer_weights())
        lines.append({"kind": "merge", "kernels": int(w.size), "mean_w": float(w.mean()),
                      "heatmap": HEATMAP_FILE,
                      "layer_mean_w": [r.mean_w for r in rows]})
    _save_model(args, ckpt, record)
    return [*_record_lines(record), *lines, *_test_metrics(ckpt, ds, args.dtype)]


def cmd_eval(args):
    ckpt = _load_ckpt(args.ckpt)
    ds = _load_data(args.data)
    return [_metrics_line(evaluate(ckpt, ds, args.split, args.dtype), args.split)]


def cmd_heatmap(args):
    spec = _load_any_spec(args.spec)
    mw = load_merge_weights(_existing(args.weights, "merge weights"), spec)
    target = Path(args.out) if args.out else Path(args.out_dir) / HEATMAP_FILE
    rows = export_heatmap(mw, spec, target)
    return [{"kind": "heatmap", "path": target.name, "rows": len(rows),
             "mean_w": [r.mean_w for r in rows]}]


def cmd_dump_activations(args):
    ckpt = _load_ckpt(args.ckpt)
    if args.input:
        x = np.load(_existing(args.input, "input array"), allow_pickle=False)
    else:
        x, _ = _load_data(args.data).split(args.split)
    if args.limit is not None:
        x = x[:args.limit]
    acts = dump_activations(ckpt, x, args.layers, args.out, dtype=args.dtype)
    return [{"kind": "activations", "path": Path(args.out).name,
             "layers": {k: list(v.shape) for k, v in acts.items()}}]


# -- parser ----------------------------------------------------------------------

def _common(p, seed=True):
    p.add_argument("--out-dir", default=".", help="directory for config echo, summary and "
                   "artifacts (default: current directory)")
    if seed:
        p.add_argument("--seed", type=int, default=0, help="RNG seed (default: 0)")


def _train_opts(p, prefix="", what="training"):
    dash = prefix.replace("_", "-")
    p.add_argument(f"--{dash}lr", type=float, default=None, help=f"{what} learning rate")
    p.add_argument(f"--{dash}epochs", type=int, default=None, help=f"{what} epochs")
    p.add_argument(f"--{dash}batch-size", type=int, default=None, help=f"{what} batch size")


def _dtype_opts(p):
    p.add_argument("--dtype", choices=["f32", "f64"], default="f32",
                   help="compute dtype (default: f32)")
    p.add_argument("--weight-decay", type=float, default=0.01,
                   help="AdamW decoupled weight decay (default: 0.01)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kernelmerge",
                                     description="Kernel-level learned merging of two "
                                                 "pretrained CNN backbones.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="log progress (-vv for per-epoch detail)")
    sub = parser.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="create packed .mmds datasets")
    ds_sub = ds.add_subparsers(dest="action", required=True)
    gen = ds_sub.add_parser("gen", help="generate a synthetic task")
    gen.add_argument("--family", choices=FAMILIES, default="mixed",
                     help="frequency (source a), blob (source b) or mixed (target)")
    gen.add_argument("--samples", type=int, nargs=3, default=[512, 256, 256],
                     metavar=("TRAIN", "VAL", "TEST"))
    gen.add_argument("--classes", type=int, default=4)
    gen.add_argument("--image-size", type=int, default=16)
    gen.add_argument("--noise", type=float, default=0.1, help="Gaussian pixel noise std")
    gen.add_argument("--class-weights", type=float, nargs="+", default=None,
                     help="relative class frequencies (imbalance)")
    gen.add_argument("--out", required=True, help="output .mmds path")
    _common(gen)
    gen.set_defaults(func=cmd_dataset_gen)
    pk = ds_sub.add_parser("pack", help="pack .npy arrays listed in a YAML/JSON manifest")
    pk.add_argument("--manifest", required=True)
    pk.add_argument("--out", required=True, help="output .mmds path")
    _common(pk, seed=False)
    pk.set_defaults(func=cmd_dataset_pack)

    ts = sub.add_parser("train-source", help="pretrain a source model on a dataset")
    ts.add_argument("--data", required=True)
    ts.add_argument("--spec", help="architecture YAML (default: smallnet sized to the data)")
    ts.add_argument("--channels", type=int, nargs="+", default=[8, 16, 32],
                    help="smallnet block widths when --spec is not given")
    ts.add_argument("--init", help="reuse this checkpoint's backbone as the starting point")
    _train_opts(ts)
    _dtype_opts(ts)
    _common(ts)
    ts.set_defaults(func=cmd_train_source)

    ft = sub.add_parser("ft", help="full fine-tuning with a fresh head")
    ft.add_argument("--init", required=True)
    ft.add_argument("--data", required=True)
    _train_opts(ft)
    _dtype_opts(ft)
    _common(ft)
    ft.set_defaults(func=cmd_ft)

    lpft = sub.add_parser("lpft", help="linear probe then fine-tune")
    lpft.add_argument("--init", required=True)
    lpft.add_argument("--data", required=True)
    lpft.add_argument("--train-bn", action="store_true",
                      help="train batch norm during the probe instead of freezing it")
    _train_opts(lpft, "lp_", "probe")
    _train_opts(lpft, "ft_", "fine-tune")
    _dtype_opts(lpft)
    _common(lpft)
    lpft.set_defaults(func=cmd_lpft)

    mm = sub.add_parser("medmerge", help="learned kernel merge, bake, fine-tune")
    mm.add_argument("--pair", nargs=2, required=True, metavar=("SOURCE_B", "SOURCE_C"),
                    help="the two congruent source checkpoints; w weights SOURCE_B")
    mm.add_argument("--data", required=True)
    mm.add_argument("--ablate-frozen-bn", action="store_true",
                    help="keep merged batch norm frozen during the merge probe")
    mm.add_argument("--zero-source", choices=["b", "c"], default=None,
                    help="replace that source with an all-zero backbone")
    mm.add_argument("--baseline", choices=["simple-average"], default=None,
                    help="run the uniform-average LP-FT baseline instead")
    _train_opts(mm, "lp_", "merge probe")
    _train_opts(mm, "ft_", "fine-tune")
    _dtype_opts(mm)
    _common(mm)
    mm.set_defaults(func=cmd_medmerge)

    ev = sub.add_parser("eval", help="accuracy, macro-F1 and confusion on one split")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--dtype", choices=["f32", "f64"], default="f32")
    _common(ev, seed=False)
    ev.set_defaults(func=cmd_eval)

    hm = sub.add_parser("heatmap", help="per-layer merge weight CSV from a .mmw file")
    hm.add_argument("--weights", required=True)
    hm.add_argument("--spec", required=True, help="architecture YAML or a .mmck using it")
    hm.add_argument("--out", help=f"CSV path (default: OUT_DIR/{HEATMAP_FILE})")
    _common(hm, seed=False)
    hm.set_defaults(func=cmd_heatmap)

    da = sub.add_parser("dump-activations", help="write raw activations of chosen layers")
    da.add_argument("--ckpt", required=True)
    src = da.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="packed dataset supplying the inputs")
    src.add_argument("--input", help=".npy array of inputs (N, C, H, W)")
    da.add_argument("--split", default="test")
    da.add_argument("--limit", type=int, default=None, help="use only the first N inputs")
    da.add_argument("--layers", nargs="+", required=True,
                    help="activation names such as block0.conv, block1.bn, block2")
    da.add_argument("--dtype", choices=["f32", "f64"], default="f64")
    da.add_argument("--out", required=True, help="output path (checkpoint format)")
    _common(da, seed=False)
    da.set_defaults(func=cmd_dump_activations)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "dataset":
        args.command = f"dataset-{args.action}"
    try:
        out = Path(args.out_dir)
        if not out.is_dir():
            out.mkdir(parents=True)
        lines = args.func(args)
        _write_outputs(args, argv, lines)
    except (CLIError, DatasetError, CheckpointError, MergeError, SpecError, IncongruentError,
            ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"kernelmerge: error: {msg}", file=sys.stderr)
        return 1
    for line in lines:
        if line.get("kind") in ("metrics", "merge", "heatmap", "dataset", "activations"):
            print(_dumps(line))
    return 0


if __name__ == "__main__":
    sys.exit(main())
