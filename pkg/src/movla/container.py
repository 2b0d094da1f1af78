"""Single-file artifact container: canonical JSON header + raw little-endian tensor blobs.

Layout (all integers little-endian):

    bytes 0..3    magic  b"MVC1"
    bytes 4..7    uint32 format version
    bytes 8..15   uint64 header length in bytes
    header        canonical JSON (sorted keys, no whitespace), utf-8
    blobs         tensor bytes, concatenated in header order

The header is ``{"meta": <user dict>, "tensors": [{"name", "dtype", "shape", "offset",
"nbytes"}, ...]}`` with tensors sorted by name and offsets relative to the end of the
header. Saving the result of a load reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"MVC1"
FORMAT_VERSION = 1


class ContainerError(Exception):
    """Raised for unreadable, corrupt, or version-mismatched containers."""


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write ``meta`` and named arrays to ``path``. Arrays are stored little-endian."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": le.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = _canonical_json({"meta": meta, "tensors": entries})
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container written by :func:`save_container`.

    Returns ``(meta, arrays)``. Refuses files with a wrong magic, a different format
    version, or truncated blobs.
    """
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ContainerError(f"{path}: not a container file (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise ContainerError(
                f"{path}: unsupported container version {version} (expected {FORMAT_VERSION})"
            )
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header_raw = fh.read(header_len)
        if len(header_raw) != header_len:
            raise ContainerError(f"{path}: truncated header")
        try:
            header = json.loads(header_raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ContainerError(f"{path}: corrupt header: {exc}") from exc
        blob = fh.read()
    arrays = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        raw = blob[start : start + nbytes]
        if len(raw) != nbytes:
            raise ContainerError(f"{path}: truncated blob for tensor {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return header["meta"], arrays
