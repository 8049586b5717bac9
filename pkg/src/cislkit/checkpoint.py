"""Binary checkpoint container: named float32 tensors plus a JSON metadata
blob. Layout (all little-endian):

    magic "CKPT" | u32 version | u32 tensor count
    per tensor:  u16 name length | name bytes (utf-8) | u8 rank | u32 * rank dims
                 | float32 payload
    trailer:     u32 metadata length | canonical JSON bytes

Round-trips are bit-exact; metadata is serialized with sorted keys so equal
checkpoints produce equal files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"CKPT"
VERSION = 1


class CheckpointError(ValueError):
    """Structural problem in a checkpoint file, carrying the byte offset."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_named(cls, groups: dict[str, dict[str, np.ndarray]], metadata=None):
        """Merge {prefix: {name: tensor}} groups, rejecting name collisions."""
        tensors: dict[str, np.ndarray] = {}
        for prefix, group in groups.items():
            for name, arr in group.items():
                full = f"{prefix}/{name}"
                if full in tensors:
                    raise CheckpointError(f"tensor name collision: {full!r}")
                tensors[full] = np.ascontiguousarray(arr, dtype=np.float32).copy()
        return cls(tensors=tensors, metadata=dict(metadata or {}))

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.tensors.items() if k.startswith(prefix + "/")}


def config_digest(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, default=str).encode()
    ).hexdigest()


def save_checkpoint(ckpt: Checkpoint, path):
    names = list(ckpt.tensors)
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate tensor names")
    parts = [MAGIC, struct.pack("<II", VERSION, len(names))]
    for name in names:
        arr = np.asarray(ckpt.tensors[name], dtype=np.float32)  # keeps rank 0 intact
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]!r}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"tensor rank {arr.ndim} too large for {name!r}")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4", copy=False).tobytes())
    meta = json.dumps(ckpt.metadata, sort_keys=True, default=str).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.off = 0

    def take(self, n, what):
        if self.off + n > len(self.blob):
            raise CheckpointError(f"truncated file while reading {what}", self.off)
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic, not a checkpoint file", 0)
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", 4)
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = r.unpack("<H", f"tensor {i} name length")
        name = r.take(nlen, f"tensor {i} name").decode("utf-8")
        (rank,) = r.unpack("<B", f"tensor {name!r} rank")
        shape = r.unpack(f"<{rank}I", f"tensor {name!r} dims") if rank else ()
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = r.take(4 * size, f"tensor {name!r} payload")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}", r.off)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    (mlen,) = r.unpack("<I", "metadata length")
    meta_raw = r.take(mlen, "metadata")
    if r.off != len(blob):
        raise CheckpointError("trailing bytes after metadata", r.off)
    try:
        metadata = json.loads(meta_raw.decode("utf-8")) if mlen else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"metadata is not valid JSON ({exc})", len(blob) - mlen) from exc
    return Checkpoint(tensors=tensors, metadata=metadata)
