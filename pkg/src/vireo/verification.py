"""Finite-difference verification over every differentiable op and the
three composite paths (prompt layer, coarse-prior chain, embedding head).

Checks resolve ops through the module namespace at call time, so a test
can swap in a corrupted backward and watch the suite fail.
"""

from __future__ import annotations

import numpy as np

import vireo.autodiff as ad
from .coarse_prior import CoarsePriorModule, coarse_loss
from .head import EmbeddingHead, HeadConfig
from .prompts import PromptLayer
from .providers import synth_text_bank

TOLERANCE = 1e-4


def _sq_sum(t):
    return ad.reduce_sum(ad.mul(t, t))


def check_add():
    rng = np.random.default_rng(101)
    x = ad.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    y = ad.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    return ad.grad_check(lambda a, b: _sq_sum(ad.add(a, b)), [x, y])


def check_mul():
    rng = np.random.default_rng(102)
    x = ad.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    y = ad.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    return ad.grad_check(lambda a, b: ad.reduce_sum(ad.mul(ad.mul(a, b), b)), [x, y])


def check_scale():
    rng = np.random.default_rng(103)
    x = ad.Tensor(rng.standard_normal(5), requires_grad=True)
    return ad.grad_check(lambda t: _sq_sum(ad.scale(t, -2.5)), x)


def check_relu():
    rng = np.random.default_rng(104)
    x = ad.Tensor(rng.standard_normal((4, 4)) + 0.05, requires_grad=True)
    return ad.grad_check(lambda t: _sq_sum(ad.relu(t)), x)


def check_sigmoid():
    rng = np.random.default_rng(105)
    x = ad.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    return ad.grad_check(lambda t: _sq_sum(ad.sigmoid(t)), x)


def check_concat():
    rng = np.random.default_rng(106)
    x = ad.Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    y = ad.Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    return ad.grad_check(
        lambda a, b: _sq_sum(ad.concat([a, b], axis=1)), [x, y])


def check_softmax():
    rng = np.random.default_rng(107)
    x = ad.Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    return ad.grad_check(
        lambda t: _sq_sum(ad.softmax_axis(t, axis=1, temperature=0.8)), x)


def check_contract():
    rng = np.random.default_rng(108)
    a = ad.Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    b = ad.Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    return ad.grad_check(
        lambda x, y: _sq_sum(ad.contract(x, y, "hwd,kd->hwk")), [a, b])


def check_conv2d():
    rng = np.random.default_rng(109)
    x = ad.Tensor(rng.standard_normal((2, 4, 4)), requires_grad=True)
    k3 = ad.Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.4, requires_grad=True)
    k1 = ad.Tensor(rng.standard_normal((2, 3, 1, 1)) * 0.4, requires_grad=True)
    return ad.grad_check(
        lambda t, a, b: _sq_sum(ad.conv2d(ad.conv2d(t, a), b)), [x, k3, k1])


def check_bilinear_resize():
    rng = np.random.default_rng(110)
    x = ad.Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    return ad.grad_check(
        lambda t: _sq_sum(ad.bilinear_resize(t, 5, 3)), x)


def check_broadcast_reduce():
    rng = np.random.default_rng(111)
    x = ad.Tensor(rng.standard_normal(4), requires_grad=True)
    return ad.grad_check(
        lambda t: _sq_sum(ad.reduce_mean(ad.broadcast_to(t, (3, 5, 4)), axis=1)), x)


def check_cross_entropy():
    rng = np.random.default_rng(112)
    logits = ad.Tensor(rng.standard_normal((3, 3, 4)), requires_grad=True)
    labels = rng.integers(0, 4, size=(3, 3))
    labels[0, 0] = 255
    return ad.grad_check(
        lambda t: ad.cross_entropy(t, labels, class_axis=2), logits)


def check_prompt_layer():
    rng = np.random.default_rng(1)
    layer = PromptLayer(rng, n_prompts=2, d=4, d_depth=3)
    layer.depth_proj.weight.data[...] = rng.standard_normal((3, 4)) * 0.1
    visual = ad.Tensor(rng.standard_normal((2, 2, 4)))
    depth = ad.Tensor(rng.standard_normal((2, 2, 3)))
    bank = synth_text_bank(["gc-a", "gc-b", "gc-c"], seed=1, d=4)
    params = [p for _, p in layer.named_parameters("x")]

    def loss(*_):
        result = layer.refine(visual, depth, layer.prompt, bank)
        return _sq_sum(result.refined) + _sq_sum(result.fused_prompt)

    return ad.grad_check(loss, params)


def check_coarse_chain():
    rng = np.random.default_rng(2)
    module = CoarsePriorModule(rng, d=4, n_queries=2, num_scales=4)
    module.fuse.weight.data[...] = rng.standard_normal((16, 4)) * 0.1
    maps = [ad.Tensor(rng.standard_normal((2, 2, 4))) for _ in range(4)]
    bank = synth_text_bank(["gc-p", "gc-q", "gc-r"], seed=2, d=4)
    labels = np.array([[0, 1], [2, 0]])
    params = [p for _, p in module.named_parameters()]

    def loss(*_):
        prior = module.compute(maps, bank)
        return coarse_loss(prior.coarse_map, labels) + _sq_sum(prior.query_priors)

    return ad.grad_check(loss, params)


def check_embedding_head():
    rng = np.random.default_rng(3)
    head = EmbeddingHead(rng, HeadConfig(decoder_layers=1, d=4, num_scales=2))
    refined = [ad.Tensor(rng.standard_normal((2, 2, 4))),
               ad.Tensor(rng.standard_normal((2, 2, 4)))]
    queries = ad.Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    bank = synth_text_bank(["gc-u", "gc-v"], seed=3, d=4)
    labels = np.array([[0, 1], [1, 0]])
    params = [p for _, p in head.named_parameters()] + [queries]

    def loss(*_):
        pred = head.forward(refined, queries, bank)
        return ad.cross_entropy(pred.logits, labels, class_axis=2)

    return ad.grad_check(loss, params)


CHECKS: list[tuple[str, callable]] = [
    ("op/add", check_add),
    ("op/mul", check_mul),
    ("op/scale", check_scale),
    ("op/relu", check_relu),
    ("op/sigmoid", check_sigmoid),
    ("op/concat", check_concat),
    ("op/softmax_axis", check_softmax),
    ("op/contract", check_contract),
    ("op/conv2d", check_conv2d),
    ("op/bilinear_resize", check_bilinear_resize),
    ("op/broadcast_reduce", check_broadcast_reduce),
    ("op/cross_entropy", check_cross_entropy),
    ("composite/prompt_layer", check_prompt_layer),
    ("composite/coarse_chain", check_coarse_chain),
    ("composite/embedding_head", check_embedding_head),
]


def run_suite() -> list[tuple[str, float]]:
    """Worst relative error per registered check."""
    return [(name, float(fn())) for name, fn in CHECKS]


def suite_passes(results: list[tuple[str, float]] | None = None) -> bool:
    if results is None:
        results = run_suite()
    return all(err <= TOLERANCE for _, err in results)
