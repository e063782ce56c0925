"""On-disk tensor blocks: one JSON header line per tensor, then raw
little-endian float32 values in row-major order."""
from __future__ import annotations

import hashlib
import json

import numpy as np


def write_tensors(path, named: dict[str, np.ndarray]):
    with open(path, "wb") as f:
        for name, arr in named.items():
            arr = np.asarray(arr)
            header = json.dumps({"name": name, "shape": list(arr.shape)},
                                sort_keys=True, separators=(",", ":"))
            f.write(header.encode("utf-8") + b"\n")
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensors(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        while True:
            line = f.readline()
            if not line:
                break
            header = json.loads(line.decode("utf-8"))
            shape = tuple(header["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 4)
            if len(buf) != count * 4:
                raise IOError(f"truncated tensor payload for {header['name']!r}")
            out[header["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return out


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
