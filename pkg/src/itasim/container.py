"""Binary tensor container: a JSON manifest next to a little-endian blob.

``weights.bin`` is paired with ``weights.json``::

    {"version": "itasim-tensors/1",
     "tensors": [{"name": "l0.wq", "dtype": "i8", "shape": [128, 256],
                  "scale": 0.01, "offset": 0}, ...]}

Offsets are byte offsets into the blob. ``i24`` values are packed in three
bytes each.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

CONTAINER_VERSION = "itasim-tensors/1"

DTYPE_BYTES = {"i8": 1, "u8": 1, "i24": 3, "i32": 4}


class WeightContainerError(IOError):
    pass


@dataclass
class TensorRecord:
    data: np.ndarray
    dtype: str = "i8"
    scale: float = 1.0


def manifest_path(blob_path) -> Path:
    return Path(blob_path).with_suffix(".json")


def encode(arr: np.ndarray, dtype: str) -> bytes:
    arr = np.ascontiguousarray(arr).reshape(-1)
    if dtype == "i8":
        return arr.astype("<i1").tobytes()
    if dtype == "u8":
        return arr.astype("<u1").tobytes()
    if dtype == "i32":
        return arr.astype("<i4").tobytes()
    if dtype == "i24":
        lo, hi = -(1 << 23), (1 << 23) - 1
        if arr.size and (arr.min() < lo or arr.max() > hi):
            raise WeightContainerError("value out of 24-bit range")
        raw = arr.astype("<i4").view(np.uint8).reshape(-1, 4)[:, :3]
        return np.ascontiguousarray(raw).tobytes()
    raise WeightContainerError(f"unknown dtype {dtype!r}")


def decode(buf, dtype: str, count: int) -> np.ndarray:
    raw = np.frombuffer(buf, dtype=np.uint8, count=count * DTYPE_BYTES[dtype])
    if dtype == "i8":
        return raw.view("<i1").astype(np.int64)
    if dtype == "u8":
        return raw.astype(np.int64)
    if dtype == "i32":
        return raw.view("<i4").astype(np.int64)
    b = raw.reshape(-1, 3).astype(np.int64)
    v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
    return np.where(v >= 1 << 23, v - (1 << 24), v)


def save_tensors(blob_path, tensors: Mapping[str, TensorRecord]) -> None:
    blob_path = Path(blob_path)
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        rec = tensors[name]
        payload = encode(rec.data, rec.dtype)
        entries.append({"name": name, "dtype": rec.dtype, "shape": list(np.shape(rec.data)),
                        "scale": float(rec.scale), "offset": offset})
        chunks.append(payload)
        offset += len(payload)
    blob_path.write_bytes(b"".join(chunks))
    manifest = {"version": CONTAINER_VERSION, "tensors": entries}
    manifest_path(blob_path).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_tensors(blob_path) -> Dict[str, TensorRecord]:
    blob_path = Path(blob_path)
    mpath = manifest_path(blob_path)
    try:
        manifest = json.loads(mpath.read_text())
        blob = blob_path.read_bytes()
    except FileNotFoundError as e:
        raise WeightContainerError(f"missing container file: {e.filename}") from e
    except json.JSONDecodeError as e:
        raise WeightContainerError(f"malformed manifest {mpath}: {e}") from e
    if manifest.get("version") != CONTAINER_VERSION:
        raise WeightContainerError(f"unsupported container version {manifest.get('version')!r}")
    out = {}
    for e in manifest["tensors"]:
        dtype = e["dtype"]
        if dtype not in DTYPE_BYTES:
            raise WeightContainerError(f"{e['name']}: unknown dtype {dtype!r}")
        shape = tuple(int(d) for d in e["shape"])
        count = int(np.prod(shape))
        start = int(e["offset"])
        end = start + count * DTYPE_BYTES[dtype]
        if end > len(blob):
            raise WeightContainerError(
                f"{e['name']}: needs bytes [{start}, {end}) but blob has {len(blob)} (truncated?)")
        data = decode(blob[start:end], dtype, count).reshape(shape)
        out[e["name"]] = TensorRecord(data, dtype, float(e.get("scale", 1.0)))
    return out
