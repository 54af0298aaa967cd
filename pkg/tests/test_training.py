import json

import numpy as np
import pytest

from kernelmerge.checkpoint import Checkpoint, make_manifest
from kernelmerge.data import DatasetError, LabeledDataset
from kernelmerge.merge import MergeError
from kernelmerge.training import (StageConfig, evaluate, make_pair, run_average_lpft, run_ft,
                                  run_lp, run_lpft, run_medmerge, run_medmerge_lp, train_source)
from kernelmerge.zoo import (BlockSpec, IncongruentError, ModelSpec, backbone, build_graph,
                             build_model, conv_key)

from helpers import tiny_dataset

SPEC = ModelSpec((1, 8, 8), (BlockSpec(4, pool=2), BlockSpec(6, pool=2)), 3, name="tiny")
FAST = dict(epochs=3, batch_size=8)


def scratch_ckpt(seed=0, spec=SPEC):
    _, tree = build_model(spec, seed)
    return Checkpoint(tree, make_manifest(spec, "pretrained", "none", seed))


@pytest.fixture(scope="module")
def ds():
    return tiny_dataset()


@pytest.fixture(scope="module")
def sources(ds):
    a, _ = train_source(SPEC, ds, StageConfig.source(seed=1, **FAST))
    b, _ = train_source(SPEC, ds, StageConfig.source(seed=2, **FAST))
    return a, b


def test_stage_defaults():
    assert (StageConfig.lp().lr, StageConfig.lp().epochs) == (1e-4, 50)
    assert (StageConfig.ft().lr, StageConfig.ft().epochs) == (1e-5, 50)
    assert StageConfig.lp().batch_size == 64
    cfg = StageConfig.ft().optimizer
    assert (cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay) == (0.9, 0.999, 1e-8, 0.01)
    with pytest.raises(ValueError):
        StageConfig(epochs=0)
    with pytest.raises(ValueError):
        StageConfig(stage="pretrain")
    with pytest.raises(ValueError):
        StageConfig(lr=-1)


def test_train_source_learns_and_is_deterministic(ds):
    cfg = StageConfig.source(seed=3, epochs=5, batch_size=8)
    a, rec = train_source(SPEC, ds, cfg)
    b, rec2 = train_source(SPEC, ds, cfg)
    assert rec.epochs[-1].train_loss < rec.initial.train_loss
    assert [e.epoch for e in rec.epochs] == [1, 2, 3, 4, 5]
    assert rec == rec2
    assert all(a.tree[k].tobytes() == b.tree[k].tobytes() for k in a.tree)
    assert a.manifest.stage == "pretrained"


def test_train_source_errors(ds):
    with pytest.raises(DatasetError):
        train_source(SPEC.with_classes(5), ds, StageConfig.source(**FAST))
    empty = LabeledDataset(ds.images, ds.labels, {"train": [], "val": [0]}, 3)
    with pytest.raises(DatasetError):
        train_source(SPEC, empty, StageConfig.source(**FAST))


def test_ft_from_random_init_equals_training_from_scratch(ds):
    cfg = StageConfig.source(seed=4, **FAST)
    scratch, _ = train_source(SPEC, ds, cfg)
    # run_ft re-initializes the head with the config seed, exactly like train_source
    ft, rec = run_ft(scratch_ckpt(4), ds, cfg)
    assert all(np.array_equal(scratch.tree[k], ft.tree[k]) for k in scratch.tree)
    assert ft.manifest.stage == "finetuned"


def test_ft_rejects_incongruent_init(ds):
    other = scratch_ckpt(spec=ModelSpec((1, 8, 8), (BlockSpec(5),), 3))
    _, tree = build_model(other.spec, 0)
    bad = Checkpoint({**tree, "block0.conv.weight": np.zeros((4, 1, 3, 3))}, other.manifest)
    with pytest.raises((IncongruentError, ValueError)):
        run_ft(bad, ds, StageConfig.ft(**FAST))


def test_lp_freezes_backbone(sources, ds):
    a, _ = sources
    lp, rec = run_lp(a, ds, StageConfig.lp(lr=1e-2, **FAST))
    for k, v in backbone(a.tree).items():
        assert np.array_equal(lp.tree[k], v), k
    assert np.abs(lp.tree["head.weight"]).sum() > 0
    assert min(e.val_loss for e in rec.epochs) <= rec.initial.val_loss
    assert lp.manifest.stage == "lp"


def test_lp_with_trainable_bn_changes_only_bn_and_head(sources, ds):
    a, _ = sources
    lp, _ = run_lp(a, ds, StageConfig.lp(lr=1e-2, **FAST), freeze_bn=False)
    for k in backbone(a.tree):
        changed = not np.array_equal(lp.tree[k], a.tree[k])
        if ".conv." in k:
            assert not changed


def test_medmerge_stage1_freezes_sources(sources, ds):
    a, b = sources
    before = {k: v.copy() for k, v in a.tree.items()}
    pair = make_pair(a, b)
    baked, mw, rec, graph = run_medmerge_lp(pair, ds, StageConfig.lp(lr=1e-2, **FAST))
    assert all(np.array_equal(before[k], a.tree[k]) for k in before)
    for i, layer in enumerate(graph.layers[:2]):
        assert np.array_equal(layer.conv.weight_b.value, a.tree[conv_key(i)])
    assert np.abs(mw.flat_alphas()).max() > 0
    assert baked.manifest.stage == "baked"
    # baked checkpoint and virtual graph agree on the val split
    x, _ = ds.split("val")
    virtual = graph.predict_logits(x)
    concrete = build_graph(baked.spec, baked.tree, dtype=graph.dtype).predict_logits(x)
    np.testing.assert_allclose(concrete, virtual, atol=1e-5)


def test_medmerge_equal_sources_matches_lpft_with_trained_bn(sources, ds):
    a, _ = sources
    lp, ft = StageConfig.lp(lr=1e-2, **FAST), StageConfig.ft(lr=1e-3, **FAST)
    mm, mw, _ = run_medmerge(make_pair(a, a), ds, lp, ft)
    ref, _ = run_lpft(a, ds, lp, ft, freeze_bn=False)
    assert np.array_equal(mw.flat_alphas(), np.zeros(len(mw)))
    assert all(np.array_equal(mm.tree[k], ref.tree[k]) for k in ref.tree)


def test_medmerge_degenerate_pair_rejected(sources, ds):
    a, b = sources
    with pytest.raises(ValueError):
        make_pair(a, b, zero="x")
    pair = make_pair(a, b, zero="b")
    pair = type(pair)(pair.source_b, pair.source_b, pair.spec)
    with pytest.raises(MergeError):
        run_medmerge_lp(pair, ds, StageConfig.lp(**FAST))


def test_pipeline_rerun_bit_identical(sources, ds):
    a, b = sources
    lp, ft = StageConfig.lp(**FAST), StageConfig.ft(**FAST)
    runs = [run_medmerge(make_pair(a, b), ds, lp, ft) for _ in range(2)]
    (c1, w1, r1), (c2, w2, r2) = runs
    assert r1 == r2 and r1.to_jsonl() == r2.to_jsonl()
    assert np.array_equal(w1.flat_alphas(), w2.flat_alphas())
    assert all(c1.tree[k].tobytes() == c2.tree[k].tobytes() for k in c1.tree)


def test_average_baseline_runs(sources, ds):
    a, b = sources
    ckpt, rec = run_average_lpft(make_pair(a, b), ds, StageConfig.lp(**FAST),
                                 StageConfig.ft(**FAST))
    assert rec.stage == "average-lpft" and [s.stage for s in rec.substages] == ["lp", "ft"]
    assert 0 <= evaluate(ckpt, ds).macro_f1 <= 1


def test_run_record_serialization(sources, ds):
    a, b = sources
    _, _, rec = run_medmerge(make_pair(a, b), ds, StageConfig.lp(**FAST), StageConfig.ft(**FAST))
    lines = [json.loads(ln) for ln in rec.to_jsonl().splitlines()]
    epochs = [ln for ln in lines if ln["kind"] == "epoch" and ln["stage"] == "medmerge/merge-lp"]
    assert [e["epoch"] for e in epochs] == [0, 1, 2, 3]
    assert all("elapsed" not in ln for ln in lines)
    assert any("elapsed" in ln for ln in map(json.loads, rec.to_jsonl(True).splitlines()))
    assert rec.find("ft").stage == "ft" and rec.final() == rec.substages[-1].epochs[-1]
    with pytest.raises(KeyError):
        rec.find("nope")


def test_best_epoch_selection_prefers_val_f1(ds):
    # epoch 0 (the untrained state) competes too
    ckpt = scratch_ckpt(0)
    _, rec = run_ft(ckpt, ds, StageConfig.ft(lr=1e-3, **FAST))
    keys = [(rec.initial.val_macro_f1, -rec.initial.val_loss)] + [
        (e.val_macro_f1, -e.val_loss) for e in rec.epochs]
    assert keys[rec.best_epoch] == max(keys)
    assert rec.best_epoch == keys.index(max(keys))


def test_evaluate_examples(ds):
    spec = SPEC.with_classes(2)
    _, tree = build_model(spec, 0)
    for k in tree:
        tree[k] = np.zeros_like(tree[k]) if not k.endswith(("gamma", "running_var")) else tree[k]
    tree["head.bias"] = np.array([0.0, 1.0])  # always predicts class 1
    x = np.zeros((4, 1, 8, 8), np.float32)
    balanced = LabeledDataset(x, np.array([0, 1, 0, 1]), {"test": np.arange(4)}, 2)
    rep = evaluate(Checkpoint(tree, make_manifest(spec, "lp")), balanced)
    assert rep.accuracy == 0.5 and rep.macro_f1 == pytest.approx(1 / 3, abs=1e-15)
    perfect = LabeledDataset(x, np.ones(4, np.int64), {"test": np.arange(4)}, 2)
    rep = evaluate(Checkpoint(tree, make_manifest(spec, "lp")), perfect)
    assert rep.accuracy == 1.0 and rep.macro_f1 == 1.0 and rep.included_classes == [1]
    empty = LabeledDataset(x, np.ones(4, np.int64), {"test": []}, 2)
    with pytest.raises(DatasetError):
        evaluate(Checkpoint(tree, make_manifest(spec, "lp")), empty)
    with pytest.raises(DatasetError):
        evaluate(Checkpoint(tree, make_manifest(spec, "lp")), ds)
