"""Frozen feature providers: seeded synthetic encoders and text banks.

Stand-ins for the frozen visual, depth, and text encoders. Every tensor
they emit is non-trainable and must survive training bitwise unchanged.
Synthetic values come from a counter-based generator keyed by
(image, layer, modality, seed), so any tile is computable independently
of evaluation order. Values are drawn at float32 granularity so the f32
file container round-trips them exactly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor

PROMPT_TEMPLATE = "a photo of a {label}."


def _keyed_rng(*parts) -> np.random.Generator:
    tag = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class ProviderConfig:
    layers: int = 6
    h: int = 16
    w: int = 16
    d: int = 16
    d_depth: int = 8

    def validate(self) -> None:
        if self.layers < 1:
            raise ValueError(f"provider needs at least one layer, got {self.layers}")
        for name in ("h", "w", "d", "d_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"provider extent {name} must be >= 1")


@dataclass
class FeatureStack:
    """Per-layer visual and depth features for one image (layers 1..L).

    Files that tap a sparse subset of a deeper encoder load with their
    indices remapped to 1..n; ``source_layers[i]`` then records the
    original id of layer ``i + 1``.
    """

    image_id: str
    visual: dict[int, Tensor]
    depth: dict[int, Tensor]
    d: int
    d_depth: int
    source_layers: list[int] | None = None

    def __post_init__(self):
        layers = sorted(self.visual)
        if layers != list(range(1, len(layers) + 1)):
            raise ValueError(f"visual layer indices must be contiguous 1..L, got {layers}")
        # single-modality files load with an empty depth dict; the synthetic
        # provider and the pipeline always carry both modalities
        if self.depth and sorted(self.depth) != layers:
            raise ValueError("depth layers must match visual layers")
        for t in list(self.visual.values()) + list(self.depth.values()):
            if t.requires_grad:
                raise ValueError("provider features must be non-trainable")

    @property
    def num_layers(self) -> int:
        return len(self.visual)

    def snapshot(self) -> bytes:
        """Bitwise fingerprint used by the frozen-provider assertions."""
        h = hashlib.sha256()
        for layer in sorted(self.visual):
            h.update(self.visual[layer].data.tobytes())
            h.update(self.depth[layer].data.tobytes())
        return h.digest()


@dataclass
class TextBank:
    """Class labels, their prompt strings, and frozen unit-norm embeddings."""

    classes: list[str]
    prompts: list[str]
    embeddings: Tensor  # [K, d]
    computed_once: bool = True

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            dupes = sorted({c for c in self.classes if self.classes.count(c) > 1})
            raise ValueError(f"duplicate class labels: {dupes}")
        if self.embeddings.shape[0] != len(self.classes):
            raise ValueError(
                f"{len(self.classes)} classes but {self.embeddings.shape[0]} embedding rows")
        if self.embeddings.requires_grad:
            raise ValueError("text embeddings must be non-trainable")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def width(self) -> int:
        return self.embeddings.shape[1]

    def row(self, label: str) -> np.ndarray:
        return self.embeddings.data[self.classes.index(label)]


def synth_features(image_id: str, config: ProviderConfig, seed: int) -> FeatureStack:
    """Deterministic per-(image, seed) feature stack; repeat calls are bit-identical."""
    config.validate()
    visual: dict[int, Tensor] = {}
    depth: dict[int, Tensor] = {}
    for layer in range(1, config.layers + 1):
        vr = _keyed_rng("feat", image_id, layer, "visual", seed)
        dr = _keyed_rng("feat", image_id, layer, "depth", seed)
        v32 = vr.standard_normal((config.h, config.w, config.d), dtype=np.float32)
        d32 = dr.standard_normal((config.h, config.w, config.d_depth), dtype=np.float32)
        visual[layer] = Tensor(v32.astype(np.float64))
        depth[layer] = Tensor(d32.astype(np.float64))
    return FeatureStack(image_id=image_id, visual=visual, depth=depth,
                        d=config.d, d_depth=config.d_depth)


_bank_cache: dict[tuple, TextBank] = {}
_bank_builds: dict[tuple, int] = {}


def synth_text_bank(classes: list[str], seed: int, d: int) -> TextBank:
    """Unit-norm embedding per label; a row depends only on (label, seed, d).

    Banks are built once per (class set, seed, d) and cached afterwards.
    """
    key = (tuple(classes), seed, d)
    cached = _bank_cache.get(key)
    if cached is not None:
        return cached
    if len(set(classes)) != len(classes):
        dupes = sorted({c for c in classes if classes.count(c) > 1})
        raise ValueError(f"duplicate class labels: {dupes}")
    rows = np.zeros((len(classes), d))
    for i, label in enumerate(classes):
        rng = _keyed_rng("text", label, seed, d)
        v = rng.standard_normal(d)
        rows[i] = v / np.linalg.norm(v)
    bank = TextBank(classes=list(classes), embeddings=Tensor(rows),
                    prompts=[PROMPT_TEMPLATE.format(label=c) for c in classes])
    _bank_cache[key] = bank
    _bank_builds[key] = _bank_builds.get(key, 0) + 1
    return bank


def text_bank_build_count(classes: list[str], seed: int, d: int) -> int:
    return _bank_builds.get((tuple(classes), seed, d), 0)
