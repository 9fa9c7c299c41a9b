"""MAGT binary container: a JSON header plus contiguous float32 tensor blobs.

Layout (little-endian):
  bytes 0-3    ASCII magic "MAGT"
  bytes 4-7    u32 format version (currently 1)
  bytes 8-15   u64 header length H
  bytes 16..   UTF-8 JSON header {"entries": [...]}
  remainder    f32 row-major blobs at offsets relative to the blob-region
               start; offsets are 4-byte aligned, ascending, non-overlapping

Each header entry carries its metadata keys plus a "tensors" table of
{"name", "rows", "cols", "offset"} records. The same container backs token
datasets, parameter checkpoints, and descriptor exports.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    CorruptContainerError,
    TruncatedFileError,
    UnsupportedVersionError,
)

MAGIC = b"MAGT"
VERSION = 1
_HEAD = struct.Struct("<4sIQ")


@dataclass
class ContainerEntry:
    """One logical record: JSON-serializable metadata plus named matrices."""

    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def write_container(entries: list[ContainerEntry], path: str | Path) -> int:
    """Write entries to path; returns the byte count. Deterministic layout."""
    header_entries = []
    blobs: list[bytes] = []
    offset = 0
    for entry in entries:
        table = []
        for name, arr in entry.tensors.items():
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            if arr.ndim != 2:
                raise CorruptContainerError(
                    f"tensor {name!r} must be 2-D, got shape {arr.shape}"
                )
            raw = arr.tobytes()
            table.append(
                {"name": name, "rows": arr.shape[0], "cols": arr.shape[1], "offset": offset}
            )
            blobs.append(raw)
            offset += len(raw)
        header_entries.append({**entry.meta, "tensors": table})
    header = json.dumps(
        {"entries": header_entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_HEAD.pack(MAGIC, VERSION, len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)
    return _HEAD.size + len(header) + offset


def read_container(path: str | Path) -> list[ContainerEntry]:
    """Read and validate a container file; raises distinct errors per defect."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEAD.size:
        raise TruncatedFileError(f"{path}: file shorter than the fixed header")
    magic, version, header_len = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported container version {version}")
    if _HEAD.size + header_len > len(data):
        raise TruncatedFileError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(data[_HEAD.size : _HEAD.size + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptContainerError(f"{path}: header is not valid JSON ({exc})") from exc
    if not isinstance(header, dict) or not isinstance(header.get("entries"), list):
        raise CorruptContainerError(f"{path}: header missing 'entries' list")

    blob = data[_HEAD.size + header_len :]
    entries = []
    last_end = 0
    for raw_entry in header["entries"]:
        if not isinstance(raw_entry, dict) or not isinstance(raw_entry.get("tensors"), list):
            raise CorruptContainerError(f"{path}: entry missing 'tensors' table")
        meta = {k: v for k, v in raw_entry.items() if k != "tensors"}
        tensors: dict[str, np.ndarray] = {}
        for rec in raw_entry["tensors"]:
            try:
                name, rows, cols, off = rec["name"], rec["rows"], rec["cols"], rec["offset"]
            except (TypeError, KeyError) as exc:
                raise CorruptContainerError(f"{path}: malformed tensor record {rec!r}") from exc
            if not (isinstance(rows, int) and isinstance(cols, int) and isinstance(off, int)):
                raise CorruptContainerError(f"{path}: non-integer tensor record {rec!r}")
            if rows < 0 or cols < 0 or off < 0 or off % 4 != 0:
                raise CorruptContainerError(f"{path}: bad offset/shape in record {rec!r}")
            if off < last_end:
                raise CorruptContainerError(
                    f"{path}: tensor {name!r} offset {off} overlaps the previous blob"
                )
            size = rows * cols * 4
            if off + size > len(blob):
                raise TruncatedFileError(
                    f"{path}: tensor {name!r} extends past end of file"
                )
            arr = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=off)
            tensors[name] = arr.reshape(rows, cols).copy()
            last_end = off + size
        entries.append(ContainerEntry(meta=meta, tensors=tensors))
    return entries
