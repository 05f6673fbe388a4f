"""Prediction head: pixel decoder, query transformer, and the einsum logits.

The refined multi-scale maps collapse into one pixel feature map through a
chain of pixels-as-queries cross-attentions (coarsest first, upsampling
between stages) and a 1x1 compression. A sinusoidal position code is added
to the map the query decoder attends to. The propagated prompts (plus
coarse query priors) run through stacked self-attention / cross-attention
/ feed-forward blocks; mask embeddings come from a 1x1 projection of the
pixel map modulated by the mean decoded query, class embeddings from text
rows attending into an MLP of the decoded queries. Logits are the scaled
contraction of the two embedding fields over their shared width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    bilinear_resize,
    contract,
    mul,
    reduce_mean,
    reshape,
    scale,
    transpose,
)
from .errors import ConfigError
from .layers import CrossAttention, Linear, Mlp, broadcast_to, flatten_tokens
from .providers import TextBank


@dataclass
class HeadConfig:
    decoder_layers: int = 3
    d: int = 16
    temperature: float | None = None  # defaults to 1/sqrt(d)
    num_scales: int = 4

    def __post_init__(self):
        if self.decoder_layers < 1:
            raise ConfigError("decoder needs at least one layer")
        if self.temperature is None:
            self.temperature = 1.0 / math.sqrt(self.d)
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")


@dataclass
class SegPrediction:
    logits: Tensor       # [H, W, K]
    mask_embeds: Tensor  # [H, W, D]
    cls_embeds: Tensor   # [K, D]
    query_out: Tensor    # [N, d]

    def class_map(self) -> np.ndarray:
        """Argmax class ids; ties resolve to the lowest class id."""
        return np.argmax(self.logits.data, axis=2).astype(np.int64)


def positional_encoding(h: int, w: int, d: int) -> Tensor:
    """2-D sinusoid in [-1,1]: quarters of the width per axis and phase.

    Channel layout: [sin(y), cos(y), sin(x), cos(x)] with d/4 geometric
    frequencies each; position (0,0) gives 0 on sin and 1 on cos channels.
    """
    if d % 4 != 0:
        raise ConfigError(f"positional encoding width must be divisible by 4, got {d}")
    quarter = d // 4
    freqs = np.power(10000.0, -np.arange(quarter) / quarter)
    ys = np.arange(h)[:, None] * freqs[None, :]   # [h, q]
    xs = np.arange(w)[:, None] * freqs[None, :]   # [w, q]
    out = np.zeros((h, w, d))
    out[:, :, 0:quarter] = np.sin(ys)[:, None, :]
    out[:, :, quarter:2 * quarter] = np.cos(ys)[:, None, :]
    out[:, :, 2 * quarter:3 * quarter] = np.sin(xs)[None, :, :]
    out[:, :, 3 * quarter:] = np.cos(xs)[None, :, :]
    return Tensor(out)


class DecoderBlock:
    def __init__(self, rng, d: int):
        self.self_attn = CrossAttention.init(rng, d)
        self.cross_attn = CrossAttention.init(rng, d)
        self.ffn = Mlp.init(rng, d, d, d)

    def __call__(self, queries: Tensor, memory_tokens: Tensor) -> Tensor:
        attended, _ = self.self_attn(queries, queries)
        queries = add(queries, attended)
        attended, _ = self.cross_attn(queries, memory_tokens)
        queries = add(queries, attended)
        return add(queries, self.ffn(queries))

    def named_parameters(self, prefix: str):
        yield from self.self_attn.named_parameters(f"{prefix}/self_attn")
        yield from self.cross_attn.named_parameters(f"{prefix}/cross_attn")
        yield from self.ffn.named_parameters(f"{prefix}/ffn")


class EmbeddingHead:
    """Trainable state for the prediction head."""

    def __init__(self, rng: np.random.Generator, config: HeadConfig):
        self.config = config
        d = config.d
        self.scale_attn = [CrossAttention.init(rng, d)
                           for _ in range(max(0, config.num_scales - 1))]
        self.compress = Linear.init(rng, d, d, mode="identity")
        self.blocks = [DecoderBlock(rng, d) for _ in range(config.decoder_layers)]
        self.mask_proj = Linear.init(rng, d, d, mode="identity")
        self.cls_mlp = Mlp.init(rng, d, d, d)
        self.cls_attn = CrossAttention.init(rng, d)

    # -- stages -------------------------------------------------------------

    def pixel_decode(self, refined: list[Tensor]) -> Tensor:
        """Coarsest map attends to each finer scale in turn, then 1x1 compress.

        ``refined`` is ordered coarse -> fine; the output matches the finest
        extents.
        """
        if len(refined) != self.config.num_scales:
            raise ConfigError(f"expected {self.config.num_scales} scales, got {len(refined)}")
        current = refined[0]
        for stage, finer in zip(self.scale_attn, refined[1:]):
            h, w, d = finer.shape
            current = _resize_hwd(current, h, w)
            attended, _ = stage(flatten_tokens(current), flatten_tokens(finer))
            current = add(current, reshape(attended, (h, w, d)))
        return self.compress(current)

    def transformer_decode(self, queries: Tensor, memory: Tensor) -> Tensor:
        """Stacked self-attention, pixel cross-attention, and feed-forward."""
        tokens = flatten_tokens(memory)
        for block in self.blocks:
            queries = block(queries, tokens)
        return queries

    def mask_embeddings(self, pixel_map: Tensor, query_out: Tensor) -> Tensor:
        """1x1 projection of the pixel map gated by (1 + mean decoded query)."""
        gate = add(Tensor(np.ones(query_out.shape[1])), reduce_mean(query_out, axis=0))
        return mul(self.mask_proj(pixel_map), broadcast_to(gate, pixel_map.shape))

    def classification_embeddings(self, query_out: Tensor, text: TextBank) -> Tensor:
        """Text rows attend into the MLP-transformed queries; residual on text.

        The class count comes entirely from the bank at call time, so a
        grown vocabulary needs no parameter change.
        """
        values = self.cls_mlp(query_out)
        attended, _ = self.cls_attn(text.embeddings, values)
        return add(text.embeddings, attended)

    def final_prediction(self, mask_embeds: Tensor, cls_embeds: Tensor) -> Tensor:
        """[H,W,D] x [K,D] -> [H,W,K], scaled by 1/temperature."""
        raw = contract(mask_embeds, cls_embeds, "hwd,kd->hwk")
        return scale(raw, 1.0 / self.config.temperature)

    def forward(self, refined: list[Tensor], queries: Tensor,
                text: TextBank) -> SegPrediction:
        pixel_map = self.pixel_decode(refined)
        h, w, d = pixel_map.shape
        enriched = add(pixel_map, positional_encoding(h, w, d))
        query_out = self.transformer_decode(queries, enriched)
        mask_embeds = self.mask_embeddings(pixel_map, query_out)
        cls_embeds = self.classification_embeddings(query_out, text)
        logits = self.final_prediction(mask_embeds, cls_embeds)
        return SegPrediction(logits=logits, mask_embeds=mask_embeds,
                             cls_embeds=cls_embeds, query_out=query_out)

    def named_parameters(self, prefix: str = "head"):
        for i, stage in enumerate(self.scale_attn):
            yield from stage.named_parameters(f"{prefix}/scale_attn{i}")
        yield from self.compress.named_parameters(f"{prefix}/compress")
        for i, block in enumerate(self.blocks):
            yield from block.named_parameters(f"{prefix}/block{i}")
        yield from self.mask_proj.named_parameters(f"{prefix}/mask_proj")
        yield from self.cls_mlp.named_parameters(f"{prefix}/cls_mlp")
        yield from self.cls_attn.named_parameters(f"{prefix}/cls_attn")


def _resize_hwd(feature_map: Tensor, h: int, w: int) -> Tensor:
    if feature_map.shape[:2] == (h, w):
        return feature_map
    chw = transpose(feature_map, (2, 0, 1))
    return transpose(bilinear_resize(chw, h, w), (1, 2, 0))
