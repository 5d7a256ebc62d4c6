"""Single-file binary container: a JSON header followed by raw little-endian arrays.

Layout::

    b"FRGC" | u32 version | u64 header length | header (UTF-8 JSON) | payload

The header lists every named array with dtype, shape and byte offset into the
payload. Only float64, float32 and int64 arrays are stored, so a round trip is
bit-exact.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FRGC"
VERSION = 1
_DTYPES = {"f8": np.dtype("<f8"), "f4": np.dtype("<f4"), "i8": np.dtype("<i8")}


class ContainerError(ValueError):
    pass


def _code(arr: np.ndarray) -> str:
    for code, dt in _DTYPES.items():
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            return code
    if arr.dtype.kind in "iub":
        return "i8"
    raise ContainerError(f"cannot store dtype {arr.dtype}")


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in arrays:
        arr = np.asarray(arrays[name])
        code = _code(arr)
        buf = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(buf)})
        blobs.append(buf)
        offset += len(buf)
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ContainerError(f"{path}: not a container file (bad magic)")
    version, hlen = struct.unpack_from("<IQ", data, 4)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    start = 16
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: corrupt header: {exc}") from None
    payload = start + hlen
    out = {}
    for e in header["arrays"]:
        lo = payload + e["offset"]
        hi = lo + e["nbytes"]
        if hi > len(data):
            raise ContainerError(f"{path}: truncated section {e['name']!r}")
        arr = np.frombuffer(data[lo:hi], dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        out[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return out, header["meta"]
