"""``TNSR v1`` tensor files and checkpoint directories.

A tensor file is one ASCII header line ``TNSR v1 <ndim> <d0> <d1> ...``
followed by the values as raw little-endian float32.  A checkpoint is a
directory of such files plus ``manifest.json`` mapping tensor name to file.
"""

from __future__ import annotations

import json
import os
from typing import Mapping

import numpy as np

MAGIC = b"TNSR"
# What MAGIC looks like when a writer swapped byte order word-wise.
SWAPPED_MAGIC = MAGIC[::-1]
MANIFEST = "manifest.json"


class FormatError(ValueError):
    pass


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    header = " ".join(["TNSR", "v1", str(arr.ndim)] + [str(d) for d in arr.shape]) + "\n"
    return header.encode("ascii") + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(blob: bytes) -> np.ndarray:
    nl = blob.find(b"\n")
    if nl < 0:
        raise FormatError("TNSR header has no terminating newline")
    head = blob[:nl]
    if head[:4] == SWAPPED_MAGIC:
        raise FormatError("byte-order mismatch: file magic is byte-swapped (expected 'TNSR')")
    fields = head.split(b" ")
    if fields[0] != MAGIC:
        raise FormatError(f"bad magic {fields[0][:8]!r}, expected b'TNSR'")
    if len(fields) < 3 or fields[1] != b"v1":
        raise FormatError(f"unsupported TNSR header {head[:64]!r}")
    try:
        ndim = int(fields[2])
        shape = tuple(int(f) for f in fields[3:])
    except ValueError as exc:
        raise FormatError(f"malformed TNSR header {head[:64]!r}") from exc
    if len(shape) != ndim or any(d < 0 for d in shape):
        raise FormatError(f"TNSR header declares ndim={ndim} but lists shape {shape}")
    payload = blob[nl + 1:]
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise FormatError(f"TNSR payload has {len(payload)} bytes, shape {shape} needs {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def save_tensor(path: str, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(arr))


def load_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())


def _filename(name: str) -> str:
    return name.replace("/", "__") + ".tnsr"


def save_checkpoint(directory: str, tensors: Mapping[str, np.ndarray],
                    meta: Mapping | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    manifest = {"format": "TNSR v1", "tensors": {}}
    if meta:
        manifest["meta"] = dict(meta)
    for name in tensors:
        fname = _filename(name)
        save_tensor(os.path.join(directory, fname), tensors[name])
        manifest["tensors"][name] = fname
    with open(os.path.join(directory, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(directory: str) -> tuple:
    """Returns ``(tensors, meta)``."""
    with open(os.path.join(directory, MANIFEST)) as fh:
        manifest = json.load(fh)
    tensors = {name: load_tensor(os.path.join(directory, fname))
               for name, fname in manifest["tensors"].items()}
    return tensors, manifest.get("meta", {})
