"""Binary PGM (P5) class-id maps, 8 bits per pixel."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_pgm(path, class_map: np.ndarray) -> None:
    arr = np.asarray(class_map)
    if arr.ndim != 2:
        raise ValueError(f"class map must be 2-D, got shape {arr.shape}")
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("class ids must fit in one byte")
    h, w = arr.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + arr.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"not a binary PGM: magic {parts[0]!r}")
    w, h = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    data = parts[3][:w * h]
    if len(data) != w * h:
        raise ValueError(f"payload holds {len(data)} bytes, header promises {w * h}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).astype(np.int64)
