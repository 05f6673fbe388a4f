"""Prompt-driven refinement of frozen encoder features.

Each selected encoder layer owns a trainable prompt matrix that first fuses
with the text embeddings, then cross-attends to the visual and depth tokens
of that layer. The attended branches are combined by trainable scalar
gates, projected, multiplied with the fused prompts, and scattered back to
pixels through the transposed visual-attention matrix as a residual update.
A second projection feeds the refined map forward into the next selected
layer's provider feature; the fused prompts propagate alongside.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, bilinear_resize, contract, mul, reshape, transpose
from .errors import ConfigError
from .layers import CrossAttention, Linear, Mlp, flatten_tokens, gaussian, scalar_gate, weighted_sum
from .providers import FeatureStack, TextBank

DEFAULT_ANCHORS = (8, 12, 16, 24)
ANCHOR_RANGE = 24


def select_layers(total_layers: int, anchors: tuple[int, ...] = DEFAULT_ANCHORS) -> list[int]:
    """Proportional remap of the anchor indices onto a stack of ``total_layers``.

    Rounds half away from zero, deduplicates, and always keeps the last layer.
    """
    if total_layers < 1:
        raise ConfigError(f"layer count must be >= 1, got {total_layers}")
    picked: list[int] = []
    for anchor in anchors:
        idx = int(np.floor(total_layers * anchor / ANCHOR_RANGE + 0.5))
        idx = min(max(idx, 1), total_layers)
        if idx not in picked:
            picked.append(idx)
    if total_layers not in picked:
        picked.append(total_layers)
    return picked


@dataclass
class LayerRefinement:
    attended_visual: Tensor   # [N, d]
    attended_depth: Tensor    # [N, d]
    refined: Tensor           # [h, w, d], same shape as the incoming feature
    fused_prompt: Tensor      # [N, d], propagates to the next layer
    carry: Tensor             # [h, w, d], additive input for the next layer


class PromptLayer:
    """Trainable state for one selected encoder layer."""

    def __init__(self, rng: np.random.Generator, n_prompts: int, d: int, d_depth: int):
        self.prompt = gaussian(rng, (n_prompts, d))
        self.text_attn = CrossAttention.init(rng, d)
        self.visual_attn = CrossAttention.init(rng, d)
        self.depth_attn = CrossAttention.init(rng, d)
        # zero init so depth contributes nothing until trained
        self.depth_proj = Linear.init(rng, d_depth, d, mode="zero", bias=False)
        self.gate_visual = scalar_gate(1.0)
        self.gate_depth = scalar_gate(0.1)
        self.update_mlp = Mlp.init(rng, d, d, d)
        self.forward_mlp = Mlp.init(rng, d, d, d)

    def fuse_text(self, prompt: Tensor, text: TextBank) -> Tensor:
        """Prompts query the frozen text rows; residual add keeps identity at zero."""
        if prompt.shape[1] != text.width:
            raise ConfigError(f"prompt width {prompt.shape[1]} != text width {text.width}")
        attended, _ = self.text_attn(prompt, text.embeddings)
        return add(prompt, attended)

    def cross_modal_attention(self, prompt: Tensor, visual: Tensor,
                              depth: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Prompts attend to the flattened visual and width-projected depth tokens.

        Returns (visual branch, depth branch, visual attention weights).
        """
        if visual.shape[0] * visual.shape[1] == 0:
            raise ConfigError("empty spatial grid")
        visual_tokens = flatten_tokens(visual)
        depth_tokens = self.depth_proj(flatten_tokens(depth))
        attended_v, weights_v = self.visual_attn(prompt, visual_tokens)
        attended_d, _ = self.depth_attn(prompt, depth_tokens)
        return attended_v, attended_d, weights_v

    def refine(self, visual: Tensor, depth: Tensor, prompt: Tensor,
               text: TextBank) -> LayerRefinement:
        h, w, d = visual.shape
        fused_prompt = self.fuse_text(prompt, text)
        attended_v, attended_d, weights_v = self.cross_modal_attention(
            fused_prompt, visual, depth)
        combined = weighted_sum(attended_v, self.gate_visual, attended_d, self.gate_depth)
        projected = self.update_mlp(combined)
        update_tokens = mul(projected, fused_prompt)
        # transposed attention scatters the N prompt updates onto h*w pixels
        pixel_update = contract(weights_v, update_tokens, "nm,nd->md")
        refined = add(visual, reshape(pixel_update, (h, w, d)))
        carry = self.forward_mlp(refined)
        return LayerRefinement(attended_visual=attended_v, attended_depth=attended_d,
                               refined=refined, fused_prompt=fused_prompt, carry=carry)

    def named_parameters(self, prefix: str):
        yield f"{prefix}/prompt", self.prompt
        yield from self.text_attn.named_parameters(f"{prefix}/text_attn")
        yield from self.visual_attn.named_parameters(f"{prefix}/visual_attn")
        yield from self.depth_attn.named_parameters(f"{prefix}/depth_attn")
        yield from self.depth_proj.named_parameters(f"{prefix}/depth_proj")
        yield f"{prefix}/gate_visual", self.gate_visual
        yield f"{prefix}/gate_depth", self.gate_depth
        yield from self.update_mlp.named_parameters(f"{prefix}/update_mlp")
        yield from self.forward_mlp.named_parameters(f"{prefix}/forward_mlp")


class PromptState:
    """Per-layer prompts plus the propagation rule between selected layers.

    ``chain`` picks how the next layer's prompt forms: "residual" adds the
    previous layer's fused prompt to this layer's own parameter,
    "independent" uses the parameter alone.
    """

    def __init__(self, selected: list[int], n_prompts: int, d: int, d_depth: int,
                 seed: int | np.random.Generator, chain: str = "residual"):
        if chain not in ("residual", "independent"):
            raise ConfigError(f"prompt chain must be residual or independent, got {chain!r}")
        if n_prompts < 1:
            raise ConfigError("need at least one prompt")
        self.selected = list(selected)
        self.n_prompts = n_prompts
        self.d = d
        self.chain = chain
        rng = np.random.default_rng(seed)
        self.layers = [PromptLayer(rng, n_prompts, d, d_depth) for _ in selected]

    def named_parameters(self):
        for idx, layer in zip(self.selected, self.layers):
            yield from layer.named_parameters(f"prompts/layer{idx}")


def run_encoder_stack(stack: FeatureStack, state: PromptState, text: TextBank,
                      selected: list[int] | None = None,
                      ) -> tuple[dict[int, Tensor], Tensor]:
    """Refine the stack at the selected layers; returns ({layer: refined}, final prompt).

    The refined output of each selected layer feeds the next one's provider
    feature additively (resized when extents differ); prompts propagate per
    the chain rule of ``state``.
    """
    if selected is None:
        selected = state.selected
    if selected != state.selected:
        raise ConfigError("selected layers differ from the prompt state's layers")
    if any(b <= a for a, b in zip(selected, selected[1:])):
        raise ConfigError(f"selected layers must be strictly increasing, got {selected}")
    if selected and (selected[0] < 1 or selected[-1] > stack.num_layers):
        raise ConfigError(
            f"selected layer {selected[-1]} outside provider range 1..{stack.num_layers}")

    refined_maps: dict[int, Tensor] = {}
    carry: Tensor | None = None
    prompt_carry: Tensor | None = None
    for layer_obj, layer_idx in zip(state.layers, selected):
        base = stack.visual[layer_idx]
        if carry is not None:
            carry = _match_extents(carry, base.shape)
            base = add(base, carry)
        if state.chain == "residual" and prompt_carry is not None:
            prompt = add(layer_obj.prompt, prompt_carry)
        else:
            prompt = layer_obj.prompt
        result = layer_obj.refine(base, stack.depth[layer_idx], prompt, text)
        refined_maps[layer_idx] = result.refined
        carry = result.carry
        prompt_carry = result.fused_prompt
    return refined_maps, prompt_carry


def _match_extents(feature_map: Tensor, target_shape: tuple[int, ...]) -> Tensor:
    h, w, d = target_shape
    if feature_map.shape == target_shape:
        return feature_map
    chw = transpose(feature_map, (2, 0, 1))
    resized = bilinear_resize(chw, h, w)
    return transpose(resized, (1, 2, 0))
