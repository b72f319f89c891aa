"""Header + raw float32 tensor files.

Layout::

    8 bytes   little-endian uint64: header length H
    H bytes   UTF-8 JSON header
    ...       raw little-endian float32 tensor data, in header order

The header holds ``tensors`` (a list of ``{name, shape, dtype, offset,
nbytes}`` with offsets relative to the start of the data section) and a free
``metadata`` dict.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from latentmim.errors import CheckpointFormatError

_LEN = struct.Struct("<Q")
DTYPE = "float32"
_MAX_HEADER = 1 << 28


def save_tensors(path, tensors: Mapping[str, np.ndarray], metadata: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4", order="C")
        blob = arr.tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": DTYPE, "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"tensors": entries, "metadata": metadata or {}}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_LEN.pack(len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    tmp.replace(path)


def read_header(buf: bytes) -> tuple[dict, int]:
    if len(buf) < _LEN.size:
        raise CheckpointFormatError("file shorter than the 8-byte header length field", offset=len(buf))
    (hlen,) = _LEN.unpack_from(buf, 0)
    if hlen > _MAX_HEADER or _LEN.size + hlen > len(buf):
        raise CheckpointFormatError(f"header length {hlen} exceeds file size {len(buf)}", offset=_LEN.size)
    raw = buf[_LEN.size : _LEN.size + hlen]
    try:
        header = json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise CheckpointFormatError("header is not valid UTF-8", offset=_LEN.size + exc.start) from None
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"header is not valid JSON: {exc.msg}", offset=_LEN.size + exc.pos) from None
    if not isinstance(header, dict) or not isinstance(header.get("tensors"), list):
        raise CheckpointFormatError("header lacks a 'tensors' list", offset=_LEN.size)
    return header, _LEN.size + hlen


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(tensors, metadata)``. Raises CheckpointFormatError on any defect."""
    buf = Path(path).read_bytes()
    try:
        return _parse(buf)
    except CheckpointFormatError as exc:
        err = CheckpointFormatError(f"{path}: {exc.args[0]}")
        err.offset = exc.offset
        raise err from None


def _parse(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    header, data_start = read_header(buf)
    out = {}
    for entry in header["tensors"]:
        try:
            name, shape, dtype = entry["name"], tuple(entry["shape"]), entry["dtype"]
            offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError):
            raise CheckpointFormatError(f"malformed tensor entry {entry!r}", offset=_LEN.size) from None
        if dtype != DTYPE:
            raise CheckpointFormatError(f"tensor {name!r} has unsupported dtype {dtype!r}", offset=_LEN.size)
        expected = 4 * int(np.prod(shape, dtype=np.int64))
        if nbytes != expected:
            raise CheckpointFormatError(
                f"tensor {name!r}: {nbytes} bytes declared but shape {list(shape)} needs {expected}",
                offset=_LEN.size,
            )
        start = data_start + offset
        if offset < 0 or start + nbytes > len(buf):
            raise CheckpointFormatError(f"tensor {name!r} is truncated", offset=min(start + nbytes, len(buf)))
        out[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=start).reshape(shape).copy()
    return out, header.get("metadata", {})
