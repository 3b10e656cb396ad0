"""Binary checkpoint format.

Layout (little-endian)::

    b"PRSC" | u32 version | u32 len | metadata JSON (utf-8)
    u32 entry count
    per entry: u32 len | name (utf-8) | u32 rank | rank x u64 dims
    payload: contiguous float64 values, entries in manifest order
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"PRSC"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def nbytes(self) -> int:
        return 8 * int(np.prod(self.shape, dtype=np.int64))


def save_checkpoint(tensors: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> bytes:
    """Serialize named arrays (or Tensors) plus JSON metadata."""
    meta = json.dumps(dict(metadata or {}), sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(tensors))]
    payload = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(getattr(arr, "data", arr), dtype="<f8")
        encoded = name.encode("utf-8")
        out.append(struct.pack("<I", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload.append(arr.tobytes())
    return b"".join(out + payload)


def read_manifest(blob: bytes) -> tuple[dict, list[ManifestEntry], int]:
    """Parse header; return (metadata, manifest, payload start)."""
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint header")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    metadata = json.loads(bytes(take(meta_len)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    manifest: list[ManifestEntry] = []
    seen: set[str] = set()
    offset = 0
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        if name in seen:
            raise CheckpointError(f"duplicate tensor name {name!r} in manifest")
        seen.add(name)
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        entry = ManifestEntry(name, tuple(int(d) for d in shape), offset)
        manifest.append(entry)
        offset += entry.nbytes
    return metadata, manifest, pos


def load_checkpoint(
    blob: bytes, expected: Mapping[str, tuple[int, ...]] | Iterable[str] | None = None
) -> tuple[dict[str, np.ndarray], dict]:
    """Deserialize; optionally validate names (and shapes) against ``expected``."""
    metadata, manifest, start = read_manifest(blob)
    total = sum(e.nbytes for e in manifest)
    have = len(blob) - start
    if have < total:
        raise CheckpointError(f"truncated payload: expected {total} bytes, found {have}")
    if have > total:
        raise CheckpointError(f"trailing data: expected {total} payload bytes, found {have}")
    if expected is not None:
        _validate(manifest, expected)
    tensors = {}
    for e in manifest:
        lo = start + e.offset
        arr = np.frombuffer(blob, dtype="<f8", count=e.nbytes // 8, offset=lo)
        tensors[e.name] = arr.reshape(e.shape).astype(np.float64)
    return tensors, metadata


def _validate(manifest: list[ManifestEntry], expected) -> None:
    names = {e.name for e in manifest}
    want = set(expected)
    missing = sorted(want - names)
    extra = sorted(names - want)
    if missing or extra:
        raise CheckpointError(f"checkpoint does not match architecture: missing {missing}, unexpected {extra}")
    if isinstance(expected, Mapping):
        for e in manifest:
            if tuple(expected[e.name]) != e.shape:
                raise CheckpointError(f"tensor {e.name!r} has shape {e.shape}, expected {tuple(expected[e.name])}")


def write_checkpoint(path: str | Path, tensors, metadata=None) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(save_checkpoint(tensors, metadata))
    tmp.replace(path)
    return path


def read_checkpoint(path: str | Path, expected=None):
    return load_checkpoint(Path(path).read_bytes(), expected)
