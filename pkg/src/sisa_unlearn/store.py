"""On-disk checkpoints: one file per (shard, slice), bit-exact and digest-checked.

File layout (little-endian)::

    magic "SISA" | version u16 | mode u8 | shard u16 | slice u16 |
    bottleneck u16 | param_count u64 | payload f32[param_count] |
    trained_id_digest u64 | payload_digest u64
"""
from __future__ import annotations

import os
import re
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .learner import CHECKPOINT_OVERHEAD_BYTES, MODE_NAMES, HeadMode, ModeKind
from .rng import fnv1a64

MAGIC = b"SISA"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHBHHHQ")
_TRAILER = struct.Struct("<QQ")
assert _HEADER.size + _TRAILER.size == CHECKPOINT_OVERHEAD_BYTES

_NAME_RE = re.compile(r"^shard(\d+)_slice(\d+)\.ckpt$")


class StoreError(Exception):
    pass


class MissingCheckpoint(StoreError, KeyError):
    def __str__(self):
        return str(self.args[0])


class CorruptCheckpoint(StoreError):
    pass


def ids_digest(ids: Iterable[int]) -> int:
    """FNV-1a over the sorted ids as little-endian u64."""
    arr = np.array(sorted(ids), dtype="<u8")
    return fnv1a64(arr.tobytes())


@dataclass(frozen=True, eq=False)
class Checkpoint:
    shard: int
    slice: int
    mode: HeadMode
    payload: np.ndarray
    trained_id_digest: int
    payload_digest: int = 0

    @classmethod
    def create(cls, shard: int, slice_: int, mode: HeadMode, payload: np.ndarray, trained_ids) -> "Checkpoint":
        payload = np.ascontiguousarray(payload, dtype="<f4")
        return cls(shard, slice_, mode, payload, ids_digest(trained_ids), fnv1a64(payload))


def _encode_parts(cp: Checkpoint) -> tuple[bytes, memoryview, bytes]:
    payload = np.ascontiguousarray(cp.payload, dtype="<f4")
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, int(cp.mode.kind), cp.shard, cp.slice, cp.mode.bottleneck, payload.size
    )
    digest = cp.payload_digest or fnv1a64(payload)
    return header, memoryview(payload).cast("B"), _TRAILER.pack(cp.trained_id_digest, digest)


def encode_checkpoint(cp: Checkpoint) -> bytes:
    return b"".join(_encode_parts(cp))


def decode_checkpoint(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(raw) < CHECKPOINT_OVERHEAD_BYTES:
        raise CorruptCheckpoint(f"{source}: truncated ({len(raw)} bytes)")
    magic, version, mode, shard, slice_, bottleneck, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CorruptCheckpoint(f"{source}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CorruptCheckpoint(f"{source}: unsupported format version {version}")
    if len(raw) != CHECKPOINT_OVERHEAD_BYTES + 4 * count:
        raise CorruptCheckpoint(f"{source}: size does not match param_count {count}")
    try:
        head_mode = HeadMode(ModeKind(mode), bottleneck)
    except ValueError as exc:
        raise CorruptCheckpoint(f"{source}: {exc}") from None
    payload = np.frombuffer(raw, dtype="<f4", count=count, offset=_HEADER.size)
    id_digest, digest = _TRAILER.unpack_from(raw, _HEADER.size + 4 * count)
    if fnv1a64(payload) != digest:
        raise CorruptCheckpoint(f"{source}: payload digest mismatch")
    return Checkpoint(shard, slice_, head_mode, payload, id_digest, digest)


def write_atomic(path: Path, *chunks) -> int:
    """Write ``chunks`` to a temp file beside ``path``, then rename it into place."""
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            size = sum(fh.write(c) for c in chunks)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return size


def write_checkpoint_file(path: str | Path, cp: Checkpoint) -> int:
    return write_atomic(Path(path), *_encode_parts(cp))


def read_checkpoint_file(path: str | Path) -> Checkpoint:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path))


class CheckpointStore:
    """Directory of per-slice checkpoints with an in-memory byte index."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._index: dict[tuple[int, int], tuple[ModeKind, int]] = {}
        for path in self.root.iterdir():
            m = _NAME_RE.match(path.name)
            if m:
                with path.open("rb") as fh:
                    head = fh.read(_HEADER.size)
                mode = _HEADER.unpack(head)[2] if len(head) == _HEADER.size else ModeKind.FULL
                self._index[(int(m[1]), int(m[2]))] = (ModeKind(mode), path.stat().st_size)

    @staticmethod
    def filename(shard: int, slice_: int) -> str:
        return f"shard{shard}_slice{slice_}.ckpt"

    def path(self, shard: int, slice_: int) -> Path:
        return self.root / self.filename(shard, slice_)

    def keys(self) -> list[tuple[int, int]]:
        return sorted(self._index)

    def __contains__(self, key):
        return key in self._index

    def put(self, cp: Checkpoint) -> None:
        size = write_checkpoint_file(self.path(cp.shard, cp.slice), cp)
        self._index[(cp.shard, cp.slice)] = (cp.mode.kind, size)

    def get(self, shard: int, slice_: int) -> Checkpoint:
        path = self.path(shard, slice_)
        if (shard, slice_) not in self._index or not path.exists():
            raise MissingCheckpoint(f"no checkpoint for shard {shard} slice {slice_} in {self.root}")
        return read_checkpoint_file(path)

    def file_bytes(self, shard: int, slice_: int) -> bytes:
        return self.path(shard, slice_).read_bytes()

    def total_bytes(self) -> int:
        return sum(size for _, size in self._index.values())

    def snapshot(self) -> dict[tuple[int, int], bytes]:
        return {key: self.file_bytes(*key) for key in self.keys()}


def storage_report(store: CheckpointStore) -> dict[str, tuple[int, int]]:
    """{mode: (number of checkpoints, total bytes)}, zeros for unused modes."""
    report = {name: (0, 0) for name in MODE_NAMES.values()}
    for kind, size in store._index.values():
        name = MODE_NAMES[kind]
        count, total = report[name]
        report[name] = (count + 1, total + size)
    return report
