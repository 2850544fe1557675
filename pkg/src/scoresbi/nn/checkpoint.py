"""Checkpoint format: JSON header plus little-endian flat binary payload.

Layout of a checkpoint file:

    8-byte magic  b"SBCKPT01"
    u64 little-endian header length
    UTF-8 JSON header {"dtype": ..., "meta": ..., "arrays": [{"name", "shape"}]}
    raw little-endian array payload, concatenated in header order

Round trips are bit-exact.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .network import ParameterBundle

__all__ = ["save_checkpoint", "load_checkpoint"]

_MAGIC = b"SBCKPT01"
_NP_DTYPE = {"f32": "<f4", "f64": "<f8"}


def save_checkpoint(path, params: ParameterBundle, meta=None):
    header = {
        "dtype": params.dtype,
        "meta": meta or {},
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
    }
    blob = json.dumps(header).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in params.items():
            fh.write(np.ascontiguousarray(arr).astype(_NP_DTYPE[params.dtype],
                                                      copy=False).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (ParameterBundle, meta)."""
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        dtype = header["dtype"]
        np_dt = np.dtype(_NP_DTYPE[dtype])
        params = ParameterBundle(dtype=dtype)
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * np_dt.itemsize)
            params[entry["name"]] = np.frombuffer(buf, dtype=np_dt).reshape(shape).copy()
    return params, header["meta"]
