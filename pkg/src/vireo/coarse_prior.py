"""Coarse mask prior: gated multi-scale fusion, class map, and query priors.

The refined maps are resized to the shallowest selected layer's extents,
passed through channel+spatial sigmoid gates, fused by a 1x1 convolution,
and anchored by a residual copy of the deepest map. Dotting the fused map
with the text rows yields a coarse class-logit map; its per-class spatial
softmax weights aggregate the map into one feature per class, which a
learnable query bank mixes into per-prompt priors. The coarse map also
feeds an auxiliary pixel loss that densifies the gradient signal reaching
the prompt parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    bilinear_resize,
    concat,
    contract,
    cross_entropy,
    mul,
    relu,
    reshape,
    sigmoid,
    softmax_axis,
    transpose,
)
from .errors import ConfigError
from .layers import Conv2d, Linear, broadcast_to, gaussian
from .providers import TextBank


class AttentionGate:
    """Channel and spatial sigmoid gates multiplied into the feature map.

    Zero-initialized convolutions leave both gates at 0.5, so a fresh gate
    scales its input by exactly 0.25.
    """

    def __init__(self, rng: np.random.Generator, d: int):
        bottleneck = max(1, d // 4)
        self.channel_reduce = Conv2d.init(rng, d, bottleneck, 1, mode="zero")
        self.channel_expand = Conv2d.init(rng, bottleneck, d, 1, mode="zero")
        self.spatial_reduce = Conv2d.init(rng, d, 1, 1, mode="zero")
        self.spatial_mix = Conv2d.init(rng, 1, 1, 3, mode="zero")

    def __call__(self, feature_map: Tensor) -> Tensor:
        """[h,w,d] -> [h,w,d], gates computed channel-first internally."""
        chw = transpose(feature_map, (2, 0, 1))
        channel_gate = sigmoid(self.channel_expand(relu(self.channel_reduce(chw))))
        spatial_gate = sigmoid(self.spatial_mix(self.spatial_reduce(chw)))
        gated = mul(mul(chw, channel_gate), broadcast_to(spatial_gate, chw.shape))
        return transpose(gated, (1, 2, 0))

    def named_parameters(self, prefix: str):
        yield from self.channel_reduce.named_parameters(f"{prefix}/channel_reduce")
        yield from self.channel_expand.named_parameters(f"{prefix}/channel_expand")
        yield from self.spatial_reduce.named_parameters(f"{prefix}/spatial_reduce")
        yield from self.spatial_mix.named_parameters(f"{prefix}/spatial_mix")


@dataclass
class CoarsePrior:
    fused: Tensor          # [H, W, d]
    coarse_map: Tensor     # [K, H, W] raw logits, no softmax
    spatial_weights: Tensor  # [K, H, W], each class sums to 1 over pixels
    class_feats: Tensor    # [K, d]
    class_embeds: Tensor   # [K, d]
    query_priors: Tensor   # [N, d]


class CoarsePriorModule:
    """Trainable state for the coarse-prior chain."""

    def __init__(self, rng: np.random.Generator, d: int, n_queries: int,
                 num_scales: int = 4):
        self.num_scales = num_scales
        self.gates = [AttentionGate(rng, d) for _ in range(num_scales)]
        # zero init keeps the fused map equal to the deepest-scale residual
        self.fuse = Linear.init(rng, num_scales * d, d, mode="zero")
        self.text_proj = Linear.init(rng, d, d, mode="identity", bias=False)
        self.class_proj = Linear.init(rng, d, d, mode="identity", bias=False)
        self.queries = gaussian(rng, (n_queries, d))

    # -- chain stages -----------------------------------------------------

    def fuse_multiscale(self, refined: list[Tensor], target: tuple[int, int]) -> Tensor:
        """Resize, gate, concat, 1x1-fuse, then add the deepest map residually."""
        if len(refined) != self.num_scales:
            raise ConfigError(f"expected {self.num_scales} refined maps, got {len(refined)}")
        h, w = target
        resized = [_resize_hwd(m, h, w) for m in refined]
        gated = [gate(m) for gate, m in zip(self.gates, resized)]
        fused = self.fuse(concat(gated, axis=2))
        return add(fused, resized[-1])

    def coarse_mask(self, fused: Tensor, text: TextBank) -> Tensor:
        """[H,W,d] x [K,d] -> [K,H,W] raw dot-product logits."""
        projected = self.text_proj(fused)
        if projected.shape[-1] != text.width:
            raise ConfigError(
                f"projected width {projected.shape[-1]} != text width {text.width}")
        return contract(projected, text.embeddings, "hwd,kd->khw")

    def query_priors(self, class_embeds: Tensor) -> Tensor:
        """Each learnable query takes a softmax mixture of the class embeddings."""
        logits = contract(self.queries, class_embeds, "nd,kd->nk")
        weights = softmax_axis(logits, axis=1)
        return contract(weights, class_embeds, "nk,kd->nd")

    def compute(self, refined: list[Tensor], text: TextBank) -> CoarsePrior:
        target = refined[0].shape[:2]
        fused = self.fuse_multiscale(refined, target)
        coarse_map = self.coarse_mask(fused, text)
        alpha = spatial_attention_weights(coarse_map)
        class_feats = class_aggregate(alpha, fused)
        class_embeds = self.class_proj(class_feats)
        priors = self.query_priors(class_embeds)
        return CoarsePrior(fused=fused, coarse_map=coarse_map, spatial_weights=alpha,
                           class_feats=class_feats, class_embeds=class_embeds,
                           query_priors=priors)

    def named_parameters(self, prefix: str = "coarse"):
        for i, gate in enumerate(self.gates):
            yield from gate.named_parameters(f"{prefix}/gate{i}")
        yield from self.fuse.named_parameters(f"{prefix}/fuse")
        yield from self.text_proj.named_parameters(f"{prefix}/text_proj")
        yield from self.class_proj.named_parameters(f"{prefix}/class_proj")
        yield f"{prefix}/queries", self.queries


def spatial_attention_weights(coarse_map: Tensor) -> Tensor:
    """Per-class softmax over all pixels; each class plane sums to 1."""
    k, h, w = coarse_map.shape
    flat = reshape(coarse_map, (k, h * w))
    return reshape(softmax_axis(flat, axis=1), (k, h, w))


def class_aggregate(alpha: Tensor, fused: Tensor) -> Tensor:
    """Convex per-class combination of pixel features: [K,H,W] x [H,W,d] -> [K,d]."""
    return contract(alpha, fused, "khw,hwd->kd")


def coarse_loss(coarse_map: Tensor, labels: np.ndarray, ignore_id: int = 255) -> Tensor:
    """Mean cross-entropy of the coarse logits against integer labels."""
    return cross_entropy(coarse_map, labels, ignore_id=ignore_id, class_axis=0)


def _resize_hwd(feature_map: Tensor, h: int, w: int) -> Tensor:
    if feature_map.shape[:2] == (h, w):
        return feature_map
    chw = transpose(feature_map, (2, 0, 1))
    return transpose(bilinear_resize(chw, h, w), (1, 2, 0))
