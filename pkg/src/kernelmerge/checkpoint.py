"""Bit-exact ``.mmck`` checkpoints.

Byte layout (all integers little-endian); ``.mmds`` datasets share it with
magic ``b"MMDS"``::

    0   4 bytes   magic b"MMCK"
    4   u32       format_version (currently 1)
    8   u64       header length H
    16  H bytes   header: UTF-8 JSON, keys sorted, no whitespace
                  {"manifest": {...}, "tensors": [{"name", "dtype", "shape",
                   "offset", "nbytes"}, ...]}
                  (datasets carry their metadata keys instead of "manifest")
    16+H u32      CRC-32 of bytes [0, 16+H)
    20+H u64      payload length P
    28+H P bytes  payload: tensors back to back, row-major, little-endian
    28+H+P u32    CRC-32 of the payload

Tensor offsets are relative to the payload start. ``dtype`` is one of
``f32``, ``f64``, ``i64``.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .zoo import ModelSpec

MAGIC = b"MMCK"
FORMAT_VERSION = 1
STAGES = ("pretrained", "lp", "baked", "finetuned", "activations")
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8")}
_TAGS = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64", np.dtype(np.int64): "i64"}


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class IncompatibleSpecError(CheckpointError):
    pass


@dataclass
class Manifest:
    spec_digest: str
    stage: str
    source_task: str = ""
    seed: int = 0
    spec: dict | None = None
    extra: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.stage not in STAGES:
            raise CheckpointError(f"unknown stage {self.stage!r}; expected one of {STAGES}")


def _tag(arr: np.ndarray) -> str:
    try:
        return _TAGS[arr.dtype.newbyteorder("=")]
    except KeyError:
        raise CheckpointError(f"unsupported tensor dtype {arr.dtype}") from None


def pack(magic: bytes, meta: dict, tensors: dict) -> bytes:
    """Serialize ``meta`` plus named arrays into the shared container layout."""
    index, blobs, offset = [], [], 0
    for name, value in tensors.items():
        arr = np.asarray(value)
        tag = _tag(arr)
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        index.append({"name": name, "dtype": tag, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({**meta, "tensors": index},
                        sort_keys=True, separators=(",", ":")).encode()
    prefix = magic + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header
    payload = b"".join(blobs)
    return b"".join([prefix, struct.pack("<I", zlib.crc32(prefix)),
                     struct.pack("<Q", len(payload)), payload,
                     struct.pack("<I", zlib.crc32(payload))])


def unpack(data: bytes, magic: bytes, what="file"):
    """Inverse of :func:`pack`; returns ``(meta, tensors)`` or raises before building anything."""
    if len(data) < 16 or data[:4] != magic:
        raise CorruptCheckpointError(f"{what}: bad magic or truncated header")
    version, hlen = struct.unpack_from("<IQ", data, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{what}: format_version {version}, expected {FORMAT_VERSION}")
    end = 16 + hlen
    if len(data) < end + 12:
        raise CorruptCheckpointError(f"{what}: truncated file")
    (crc,) = struct.unpack_from("<I", data, end)
    if zlib.crc32(data[:end]) != crc:
        raise CorruptCheckpointError(f"{what}: header checksum mismatch")
    meta = json.loads(data[16:end])
    (plen,) = struct.unpack_from("<Q", data, end + 4)
    start = end + 12
    if len(data) != start + plen + 4:
        raise CorruptCheckpointError(f"{what}: payload length {len(data) - start - 4} "
                                     f"does not match declared {plen}")
    payload = data[start:start + plen]
    (pcrc,) = struct.unpack_from("<I", data, start + plen)
    if zlib.crc32(payload) != pcrc:
        raise CorruptCheckpointError(f"{what}: payload checksum mismatch")
    tensors, cursor = {}, 0
    for entry in meta.pop("tensors"):
        dt = _DTYPES.get(entry["dtype"])
        if dt is None:
            raise CorruptCheckpointError(f"{what}: unknown dtype tag {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        off = entry["offset"]
        if nbytes != entry["nbytes"] or off != cursor or off + nbytes > plen:
            raise CorruptCheckpointError(f"{what}: index entry {entry['name']!r} is inconsistent")
        arr = np.frombuffer(payload, dtype=dt, count=nbytes // dt.itemsize, offset=off)
        tensors[entry["name"]] = arr.reshape(shape).astype(dt.newbyteorder("="))
        cursor = off + nbytes
    if cursor != plen:
        raise CorruptCheckpointError(f"{what}: payload has {plen - cursor} unindexed bytes")
    return meta, tensors


def encode(tree: dict, manifest: Manifest) -> bytes:
    return pack(MAGIC, {"manifest": asdict(manifest)}, tree)


def decode(data: bytes, what="checkpoint"):
    meta, tree = unpack(data, MAGIC, what)
    try:
        manifest = Manifest(**meta["manifest"])
    except (KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"{what}: malformed manifest ({exc})") from exc
    return tree, manifest


def save(tree: dict, manifest: Manifest, path):
    Path(path).write_bytes(encode(tree, manifest))


def load(path, spec=None):
    """Return ``(tree, manifest)``; ``spec`` (a ModelSpec) is checked against the digest."""
    tree, manifest = decode(Path(path).read_bytes(), what=str(path))
    if manifest.spec is not None:
        if ModelSpec.from_dict(manifest.spec).digest() != manifest.spec_digest:
            raise CorruptCheckpointError(f"{path}: embedded spec does not match its digest")
    if spec is not None and spec.digest() != manifest.spec_digest:
        raise IncompatibleSpecError(f"{path}: checkpoint was built for a different spec")
    return tree, manifest


def manifest_spec(manifest: Manifest):
    if manifest.spec is None:
        raise CheckpointError("checkpoint does not embed its architecture spec")
    return ModelSpec.from_dict(manifest.spec)


def make_manifest(spec, stage, source_task="", seed=0, **extra) -> Manifest:
    return Manifest(spec_digest=spec.digest(), stage=stage, source_task=source_task,
                    seed=int(seed), spec=spec.to_dict(), extra=extra)


@dataclass
class Checkpoint:
    """A parameter tree together with its manifest."""

    tree: dict
    manifest: Manifest

    @property
    def spec(self) -> ModelSpec:
        return manifest_spec(self.manifest)

    def save(self, path):
        save(self.tree, self.manifest, path)

    @classmethod
    def load(cls, path, spec=None) -> "Checkpoint":
        return cls(*load(path, spec))
