import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from kernelmerge import checkpoint as ck
from kernelmerge.checkpoint import (Checkpoint, CorruptCheckpointError, IncompatibleSpecError,
                                    Manifest, VersionMismatchError)
from kernelmerge.zoo import build_model, smallnet


def sample():
    spec = smallnet()
    _, tree = build_model(spec, 0)
    return spec, tree, ck.make_manifest(spec, "pretrained", "source-a", seed=0)


def test_round_trip_bit_identical(tmp_path):
    spec, tree, manifest = sample()
    ck.save(tree, manifest, tmp_path / "m.mmck")
    back, man = ck.load(tmp_path / "m.mmck", spec)
    assert man == manifest
    assert list(back) == list(tree)
    for k in tree:
        assert back[k].dtype == tree[k].dtype
        assert back[k].tobytes() == tree[k].tobytes()


def test_save_twice_byte_identical(tmp_path):
    _, tree, manifest = sample()
    ck.save(tree, manifest, tmp_path / "a.mmck")
    ck.save(tree, manifest, tmp_path / "b.mmck")
    assert (tmp_path / "a.mmck").read_bytes() == (tmp_path / "b.mmck").read_bytes()


def test_mixed_dtypes_preserved():
    tree = {"a": np.arange(3, dtype=np.float32), "b": np.eye(2), "c": np.arange(4, dtype=np.int64)}
    back, _ = ck.decode(ck.encode(tree, Manifest("x", "lp")))
    assert [back[k].dtype for k in "abc"] == [np.float32, np.float64, np.int64]


def test_truncated_file_rejected(tmp_path):
    _, tree, manifest = sample()
    data = ck.encode(tree, manifest)
    for cut in (3, 20, len(data) // 2, len(data) - 1):
        (tmp_path / "t.mmck").write_bytes(data[:cut])
        with pytest.raises(CorruptCheckpointError):
            ck.load(tmp_path / "t.mmck")


def test_spec_mismatch_rejected(tmp_path):
    _, tree, manifest = sample()
    ck.save(tree, manifest, tmp_path / "m.mmck")
    with pytest.raises(IncompatibleSpecError):
        ck.load(tmp_path / "m.mmck", smallnet(channels=(8, 16, 16)))


def test_version_mismatch_rejected():
    _, tree, manifest = sample()
    data = bytearray(ck.encode(tree, manifest))
    data[4:8] = struct.pack("<I", 99)
    with pytest.raises(VersionMismatchError):
        ck.decode(bytes(data))


def test_wrong_magic_rejected():
    data = ck.encode({"a": np.zeros(1)}, Manifest("x", "lp"))
    with pytest.raises(CorruptCheckpointError):
        ck.decode(b"XXXX" + data[4:])


def test_every_header_byte_flip_detected():
    data = ck.encode({"w": np.arange(6.0).reshape(2, 3), "b": np.ones(2, np.float32)},
                     Manifest("digest", "baked", seed=3))
    header_len = struct.unpack_from("<Q", data, 8)[0]
    for i in range(16 + header_len):
        bad = bytearray(data)
        bad[i] ^= 0x5A
        with pytest.raises(ck.CheckpointError):
            ck.decode(bytes(bad))


def test_payload_corruption_detected():
    data = bytearray(ck.encode({"w": np.arange(6.0)}, Manifest("d", "lp")))
    data[-10] ^= 1
    with pytest.raises(CorruptCheckpointError):
        ck.decode(bytes(data))


def test_unknown_stage_rejected():
    with pytest.raises(ck.CheckpointError):
        Manifest("d", "exotic")


def test_checkpoint_object(tmp_path):
    spec, tree, manifest = sample()
    Checkpoint(tree, manifest).save(tmp_path / "c.mmck")
    loaded = Checkpoint.load(tmp_path / "c.mmck")
    assert loaded.spec == spec
    assert loaded.manifest.source_task == "source-a"


names = st.text(alphabet="abcdefghij._0123456789", min_size=1, max_size=12)
arrays = st.one_of(
    hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
               elements=st.floats(allow_nan=False, width=64)),
    hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=2, max_side=5),
               elements=st.floats(allow_nan=False, width=32)),
    hnp.arrays(np.int64, hnp.array_shapes(min_dims=1, max_dims=2, max_side=5)),
)


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(names, arrays, max_size=6), st.integers(0, 2**31),
       st.sampled_from(ck.STAGES), st.text(max_size=10))
def test_round_trip_property(tree, seed, stage, task):
    manifest = Manifest("abc", stage, source_task=task, seed=seed, extra={"k": [1, 2]})
    back, man = ck.decode(ck.encode(tree, manifest))
    assert man == manifest
    assert list(back) == list(tree)
    for k, v in tree.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == np.ascontiguousarray(v).tobytes()
