"""Tensor checkpoint files.

Layout::

    b"FDSRCKPT"  | u32 version | u64 manifest length | manifest (UTF-8 JSON) | raw values

The manifest lists every tensor with name, shape, precision, byte offset
and byte length; values are stored little-endian in manifest order.
"""
import hashlib
import json
import struct

import numpy as np

from .errors import FormatError, UnsupportedVersionError
from .tensor import Tensor

MAGIC = b"FDSRCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")
_DTYPES = {"single": np.dtype("<f4"), "double": np.dtype("<f8")}


def _as_array(v):
    return v.data if isinstance(v, Tensor) else np.asarray(v)


def checkpoint_bytes(tensors, meta=None):
    entries, blobs, offset = [], [], 0
    for name, value in tensors.items():
        arr = _as_array(value)
        prec = "double" if arr.dtype == np.float64 else "single"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[prec]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "precision": prec,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"version": VERSION, "tensors": entries, "meta": meta or {}},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(manifest)) + manifest + b"".join(blobs)


def save_checkpoint(path, tensors, meta=None):
    data = checkpoint_bytes(tensors, meta)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def parse_checkpoint(data):
    if len(data) < _HEADER.size:
        raise FormatError("truncated checkpoint header", offset=len(data))
    magic, version, mlen = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version} (expected {VERSION})", offset=8)
    start = _HEADER.size
    if len(data) < start + mlen:
        raise FormatError("truncated checkpoint manifest", offset=len(data))
    try:
        manifest = json.loads(data[start : start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint manifest: {exc}", offset=start) from None
    base = start + mlen
    tensors = {}
    for e in manifest["tensors"]:
        lo = base + e["offset"]
        hi = lo + e["nbytes"]
        if hi > len(data):
            raise FormatError(f"truncated data for tensor {e['name']!r}", offset=len(data))
        dt = _DTYPES[e["precision"]]
        arr = np.frombuffer(data, dtype=dt, count=e["nbytes"] // dt.itemsize, offset=lo)
        tensors[e["name"]] = arr.astype(dt.newbyteorder("="), copy=True).reshape(e["shape"])
    return tensors, manifest.get("meta", {})


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def digest(tensors, meta=None):
    return hashlib.sha256(checkpoint_bytes(tensors, meta)).hexdigest()
