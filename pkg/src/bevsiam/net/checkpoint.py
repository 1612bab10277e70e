"""Binary checkpoint container.

Layout: magic ``BSTK``, little-endian u32 version, u32 metadata byte length,
UTF-8 ``key=value`` lines (one per line), then the raw little-endian float32
arrays concatenated in declaration order. The metadata block carries the
tensor manifest (names and shapes) plus arbitrary config entries.
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

from ..ioutil import atomic_write_bytes

MAGIC = b"BSTK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: "OrderedDict[str, np.ndarray]", meta: dict | None = None) -> None:
    """Write named arrays plus metadata; config keys are sorted for
    reproducible bytes."""
    lines = []
    for key in sorted(meta or {}):
        value = str((meta or {})[key])
        if "\n" in key or "\n" in value or "=" in key:
            raise CheckpointError(f"metadata entry {key!r} not encodable")
        lines.append(f"{key}={value}")
    for i, (name, arr) in enumerate(arrays.items()):
        shape = ",".join(str(d) for d in np.asarray(arr).shape)
        lines.append(f"tensor.{i}.name={name}")
        lines.append(f"tensor.{i}.shape={shape}")
    meta_bytes = "\n".join(lines).encode("utf-8")
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(meta_bytes))
    blob += meta_bytes
    for arr in arrays.values():
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    atomic_write_bytes(path, bytes(blob))


def load_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, meta_len = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    meta_bytes = raw[12 : 12 + meta_len]
    body = raw[12 + meta_len :]
    meta: dict[str, str] = {}
    manifest: dict[int, dict[str, str]] = {}
    for line in meta_bytes.decode("utf-8").splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        if key.startswith("tensor."):
            _, idx, field = key.split(".", 2)
            manifest.setdefault(int(idx), {})[field] = value
        else:
            meta[key] = value
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    offset = 0
    for i in sorted(manifest):
        entry = manifest[i]
        shape = tuple(int(d) for d in entry["shape"].split(",") if d)
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(body):
            raise CheckpointError(f"{path}: truncated tensor data at index {i}")
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=offset).reshape(shape)
        arrays[entry["name"]] = arr.copy()
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes")
    return arrays, meta
