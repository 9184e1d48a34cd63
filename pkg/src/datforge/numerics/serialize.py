"""DTEN tensor records and the named-tensor checkpoint layout.

A DTEN record is ``b"DTEN"``, version byte ``0x01``, dtype byte (``0x01`` f32,
``0x02`` f64), rank byte, ``rank`` little-endian u32 dims, then the row-major
little-endian payload.

A checkpoint is a directory holding ``manifest.json`` and ``payload.bin``. The
payload is the concatenation of one DTEN record per tensor; the manifest maps
each name to ``{"dtype", "shape", "offset", "nbytes"}`` where ``offset`` is the
byte position of that tensor's record inside ``payload.bin``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from datforge.errors import ConsistencyError, FormatError

MAGIC = b"DTEN"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_NAMES = {1: "f32", 2: "f64"}


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    le = arr.dtype.newbyteorder("<")
    if le not in _DTYPE_CODES:
        raise TypeError(f"DTEN supports float32/float64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("rank exceeds 255")
    header = MAGIC + bytes([VERSION, _DTYPE_CODES[le], arr.ndim])
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + dims + np.ascontiguousarray(arr, dtype=le).tobytes()


def decode(buf: bytes, offset: int = 0, source="<buffer>") -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; returns (array, end offset)."""
    if len(buf) < offset + 7:
        raise FormatError(source, "truncated DTEN header")
    if buf[offset : offset + 4] != MAGIC:
        raise FormatError(source, "bad magic, not a DTEN record")
    version, code, rank = buf[offset + 4], buf[offset + 5], buf[offset + 6]
    if version != VERSION:
        raise FormatError(source, f"unsupported DTEN version {version}")
    if code not in _CODE_DTYPES:
        raise FormatError(source, f"unknown dtype code {code}")
    pos = offset + 7
    if len(buf) < pos + 4 * rank:
        raise FormatError(source, "truncated DTEN dims")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    dtype = _CODE_DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise FormatError(source, f"truncated DTEN payload: need {nbytes} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def save(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode(arr))


def load(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FormatError(path, f"cannot read: {exc}") from exc
    arr, end = decode(buf, 0, path)
    if end != len(buf):
        raise FormatError(path, f"{len(buf) - end} trailing bytes after DTEN record")
    return arr


def save_checkpoint(directory, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(getattr(arr, "data", arr))
        rec = encode(arr)
        entries[name] = {
            "dtype": _NAMES[_DTYPE_CODES[arr.dtype.newbyteorder("<")]],
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(rec),
        }
        chunks.append(rec)
        offset += len(rec)
    (directory / "payload.bin").write_bytes(b"".join(chunks))
    manifest = {"tensors": entries, "meta": meta or {}}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_checkpoint(directory, expected: Mapping[str, tuple] | None = None) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``; ``expected`` maps names to required shapes."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    payload_path = directory / "payload.bin"
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(manifest_path, f"unreadable checkpoint manifest: {exc}") from exc
    try:
        payload = payload_path.read_bytes()
    except OSError as exc:
        raise FormatError(payload_path, f"cannot read: {exc}") from exc
    tensors = {}
    for name, entry in manifest.get("tensors", {}).items():
        arr, end = decode(payload, entry["offset"], payload_path)
        if list(arr.shape) != list(entry["shape"]) or end - entry["offset"] != entry["nbytes"]:
            raise ConsistencyError(f"manifest entry {name!r} disagrees with payload record")
        tensors[name] = arr
    if expected is not None:
        for name, shape in expected.items():
            if name not in tensors:
                raise ConsistencyError(f"checkpoint is missing tensor {name!r}")
            if tuple(tensors[name].shape) != tuple(shape):
                raise ConsistencyError(
                    f"shape conflict for {name!r}: checkpoint {tuple(tensors[name].shape)} vs model {tuple(shape)}"
                )
    return tensors, manifest.get("meta", {})


def state_digest(tensors: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over names, dtypes, shapes and bytes, in sorted name order."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(getattr(tensors[name], "data", tensors[name]))
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
