"""VFEA binary container for feature stacks, text banks, and parameters.

Little-endian layout:

    magic   4 bytes  b"VFEA"
    version u32      1
    kind    u8       0 = feature stack, 1 = text bank, 2 = named parameters
    count   u32      number of entries
    entries          see below
    crc     u32      CRC32 of every byte between the header and this field

Entry layout:

    id      u32      kind 0: layer index, bit 31 set for depth-modality
                     entries; kinds 1 and 2: running index
    name             kinds 1 and 2 only: u32 byte length + UTF-8 bytes
                     (class label or parameter name)
    rank    u8
    extents u32 x rank
    payload f32 x product(extents), row-major

Feature-stack files carry no image identifier; loading uses the file stem.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .providers import PROMPT_TEMPLATE, FeatureStack, TextBank

MAGIC = b"VFEA"
VERSION = 1
KIND_FEATURE_STACK = 0
KIND_TEXT_BANK = 1
KIND_PARAMETERS = 2

_DEPTH_FLAG = 0x80000000


class VfeaFormatError(ValueError):
    """Bad magic, kind, or structural garbage."""


class VfeaVersionError(ValueError):
    """Container version not supported by this build."""


class VfeaLengthError(ValueError):
    """Declared extents and available bytes disagree (truncation)."""


class VfeaChecksumError(ValueError):
    """CRC32 trailer does not match the entry region."""


def _pack_entry(entry_id: int, arr: np.ndarray, name: str | None = None) -> bytes:
    # ascontiguousarray would promote rank-0 arrays to rank 1
    payload = np.asarray(arr, dtype="<f4")
    if payload.ndim and not payload.flags["C_CONTIGUOUS"]:
        payload = np.ascontiguousarray(payload)
    parts = [struct.pack("<I", entry_id)]
    if name is not None:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    parts.append(struct.pack("<B", payload.ndim))
    parts.append(struct.pack(f"<{payload.ndim}I", *payload.shape))
    parts.append(payload.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes, offset: int):
        self.blob = blob
        self.pos = offset

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise VfeaLengthError(f"truncated file: needed {n} bytes for {what}, "
                                  f"have {len(self.blob) - self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what: str) -> int:
        return struct.unpack("<B", self.take(1, what))[0]


def _read_entry(r: _Reader, named: bool):
    entry_id = r.u32("entry id")
    name = None
    if named:
        name_len = r.u32("name length")
        name = r.take(name_len, "name").decode("utf-8")
    rank = r.u8("rank")
    extents = tuple(r.u32(f"extent {i}") for i in range(rank))
    n = int(np.prod(extents, dtype=np.int64)) if rank else 1
    raw = r.take(4 * n, f"payload of entry {entry_id} {extents}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(extents).astype(np.float64)
    return entry_id, name, arr


def _write(path: Path, kind: int, entries: list[bytes]) -> None:
    region = b"".join(entries)
    blob = (MAGIC + struct.pack("<I", VERSION) + struct.pack("<B", kind)
            + struct.pack("<I", len(entries)) + region
            + struct.pack("<I", zlib.crc32(region) & 0xFFFFFFFF))
    Path(path).write_bytes(blob)


def save_feature_file(path, obj) -> None:
    """Write a FeatureStack, TextBank, or [(name, array)] list to ``path``."""
    path = Path(path)
    if isinstance(obj, FeatureStack):
        def wire_id(layer: int) -> int:
            return obj.source_layers[layer - 1] if obj.source_layers else layer

        entries = [_pack_entry(wire_id(layer), obj.visual[layer].data)
                   for layer in sorted(obj.visual)]
        entries += [_pack_entry(wire_id(layer) | _DEPTH_FLAG, obj.depth[layer].data)
                    for layer in sorted(obj.depth)]
        _write(path, KIND_FEATURE_STACK, entries)
    elif isinstance(obj, TextBank):
        entries = [_pack_entry(i, obj.embeddings.data[i], name=label)
                   for i, label in enumerate(obj.classes)]
        _write(path, KIND_TEXT_BANK, entries)
    elif isinstance(obj, (list, tuple)):
        entries = [_pack_entry(i, arr if isinstance(arr, np.ndarray) else arr.data, name=name)
                   for i, (name, arr) in enumerate(obj)]
        _write(path, KIND_PARAMETERS, entries)
    else:
        raise TypeError(f"cannot serialise {type(obj).__name__}")


def load_feature_file(path):
    """Parse ``path`` into a FeatureStack, TextBank, or named-parameter list."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 17:
        raise VfeaLengthError(f"file too short ({len(blob)} bytes) for header and CRC")
    if blob[:4] != MAGIC:
        raise VfeaFormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != VERSION:
        raise VfeaVersionError(f"unsupported version {version}, this build reads {VERSION}")
    kind = blob[8]
    count = struct.unpack("<I", blob[9:13])[0]
    region = blob[13:-4]
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    actual_crc = zlib.crc32(region) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise VfeaChecksumError(f"CRC mismatch: stored {stored_crc:#010x}, "
                                f"computed {actual_crc:#010x}")
    r = _Reader(blob[:-4], 13)

    if kind == KIND_FEATURE_STACK:
        visual: dict[int, np.ndarray] = {}
        depth: dict[int, np.ndarray] = {}
        for _ in range(count):
            entry_id, _, arr = _read_entry(r, named=False)
            if entry_id & _DEPTH_FLAG:
                depth[entry_id & ~_DEPTH_FLAG] = arr
            else:
                visual[entry_id] = arr
        if not visual:
            raise VfeaFormatError("feature stack has no visual entries")
        if set(depth) - set(visual):
            raise VfeaFormatError(
                f"depth entries {sorted(set(depth) - set(visual))} lack visual partners")
        # tapped exports carry sparse layer ids; remap them onto 1..n
        original = sorted(visual)
        contiguous = original == list(range(1, len(original) + 1))
        remap = {orig: i + 1 for i, orig in enumerate(original)}
        d = next(iter(visual.values())).shape[-1]
        d_depth = next(iter(depth.values())).shape[-1] if depth else 0
        return FeatureStack(
            image_id=path.stem,
            visual={remap[k]: Tensor(v) for k, v in visual.items()},
            depth={remap[k]: Tensor(v) for k, v in depth.items()},
            d=d, d_depth=d_depth,
            source_layers=None if contiguous else original)
    if kind == KIND_TEXT_BANK:
        labels, rows = [], []
        for _ in range(count):
            _, name, arr = _read_entry(r, named=True)
            labels.append(name)
            rows.append(arr)
        return TextBank(classes=labels, embeddings=Tensor(np.stack(rows)),
                        prompts=[PROMPT_TEMPLATE.format(label=c) for c in labels])
    if kind == KIND_PARAMETERS:
        out = []
        for _ in range(count):
            _, name, arr = _read_entry(r, named=True)
            out.append((name, arr))
        return out
    raise VfeaFormatError(f"unknown kind {kind}")


def inspect(path) -> dict:
    """Validate a VFEA file and summarise it; raises the load errors on defects."""
    obj = load_feature_file(path)
    info: dict = {"path": str(path)}
    if isinstance(obj, FeatureStack):
        def shown(layer: int) -> int:
            return obj.source_layers[layer - 1] if obj.source_layers else layer

        info["kind"] = "feature-stack"
        info["image_id"] = obj.image_id
        info["entries"] = [
            {"layer": shown(k), "modality": "visual", "shape": list(obj.visual[k].shape)}
            for k in sorted(obj.visual)
        ] + [
            {"layer": shown(k), "modality": "depth", "shape": list(obj.depth[k].shape)}
            for k in sorted(obj.depth)
        ]
    elif isinstance(obj, TextBank):
        info["kind"] = "text-bank"
        norms = np.linalg.norm(obj.embeddings.data, axis=1)
        info["entries"] = [
            {"class": c, "shape": [obj.width], "l2_norm": float(n)}
            for c, n in zip(obj.classes, norms)
        ]
    else:
        info["kind"] = "parameters"
        info["entries"] = [{"name": name, "shape": list(arr.shape)} for name, arr in obj]
    return info
