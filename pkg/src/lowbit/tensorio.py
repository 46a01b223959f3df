"""Length-prefixed tensor files: a one-line JSON header followed by raw payload.

Layout on disk::

    b"LBIT" | uint32 LE header length | header JSON (utf-8, one line, "\\n") | payload

The header always carries ``shape`` and ``element_type``. Real payloads are
little-endian ``f32``/``f64`` in row-major order; ``codes`` payloads are
written by :mod:`lowbit.blockquant` and described by extra header fields.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"LBIT"
ELEMENT_TYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "codes": np.dtype("u1")}


class TensorFileError(ValueError):
    """Raised for malformed, truncated or inconsistent tensor files."""


def dumps_header(header: dict) -> bytes:
    return (json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


def write_container(path, header: dict, payload: bytes) -> None:
    if header.get("element_type") not in ELEMENT_TYPES:
        raise TensorFileError(f"unknown element_type {header.get('element_type')!r}")
    head = dumps_header(header)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(payload)
    os.replace(tmp, path)


def read_container(path) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise TensorFileError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 8:
        raise TensorFileError(f"{path}: truncated header length")
    (hlen,) = struct.unpack("<I", blob[4:8])
    raw = blob[8 : 8 + hlen]
    if len(raw) != hlen or not raw.endswith(b"\n"):
        raise TensorFileError(f"{path}: corrupt header (expected {hlen} bytes ending in newline)")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorFileError(f"{path}: corrupt header: {exc}") from None
    if not isinstance(header, dict):
        raise TensorFileError(f"{path}: header must be a JSON object")
    etype = header.get("element_type")
    if etype not in ELEMENT_TYPES:
        raise TensorFileError(f"{path}: unknown element_type {etype!r} in field 'element_type'")
    shape = header.get("shape")
    if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise TensorFileError(f"{path}: field 'shape' must be a list of non-negative integers")
    return header, blob[8 + hlen :]


def write_tensor(array, path, element_type: str = "f64", **meta) -> None:
    """Write a real array. ``f64`` round-trips bit-exactly."""
    if element_type not in ("f32", "f64"):
        raise TensorFileError(f"write_tensor writes f32 or f64, not {element_type!r}")
    # asarray keeps 0-d shapes, ascontiguousarray would promote them to (1,)
    arr = np.asarray(array, dtype=ELEMENT_TYPES[element_type])
    header = {"shape": list(arr.shape), "element_type": element_type, **meta}
    write_container(path, header, arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    header, payload = read_container(path)
    etype = header["element_type"]
    if etype == "codes":
        raise TensorFileError(f"{path}: holds quantized codes; load it with blockquant.load_microblock")
    dtype = ELEMENT_TYPES[etype]
    expected = int(np.prod(header["shape"], dtype=np.int64)) * dtype.itemsize
    if len(payload) != expected:
        raise TensorFileError(f"{path}: payload size mismatch: expected {expected} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=dtype).reshape(header["shape"]).astype(np.float64)
