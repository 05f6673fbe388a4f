"""Trainable building blocks: linear maps, MLPs, single-head attention.

Attention is single-head throughout so finite-difference checks stay cheap.
Every block exposes ``named_parameters`` for the optimizer and checkpoint
registry. ``record_attention`` collects the row-stochastic weight matrices
produced while it is active, which the normalization checks inspect.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .autodiff import (
    Tensor,
    add,
    broadcast_to,
    contract,
    conv2d,
    mul,
    relu,
    reshape,
    scale,
    softmax_axis,
)

_ATTN_SINK: list | None = None


@contextmanager
def record_attention(sink: list):
    """Collect every attention-weight matrix computed inside the block."""
    global _ATTN_SINK
    prev = _ATTN_SINK
    _ATTN_SINK = sink
    try:
        yield sink
    finally:
        _ATTN_SINK = prev


def gaussian(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.standard_normal(shape) * std, requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def identity(n: int) -> Tensor:
    return Tensor(np.eye(n), requires_grad=True)


class Linear:
    """x @ weight + bias over the trailing axis; input rank 2 or 3."""

    def __init__(self, weight: Tensor, bias: Tensor | None = None):
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, rng, d_in: int, d_out: int, *, std: float = 0.02,
             bias: bool = True, mode: str = "gaussian") -> "Linear":
        if mode == "gaussian":
            w = gaussian(rng, (d_in, d_out), std)
        elif mode == "zero":
            w = zeros((d_in, d_out))
        elif mode == "identity":
            if d_in != d_out:
                raise ValueError("identity init needs square weight")
            w = identity(d_in)
        else:
            raise ValueError(f"unknown init mode {mode!r}")
        return cls(w, zeros((d_out,)) if bias else None)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 2:
            out = contract(x, self.weight, "nd,de->ne")
        elif x.ndim == 3:
            out = contract(x, self.weight, "hwd,de->hwe")
        else:
            raise ValueError(f"Linear supports rank 2 or 3 input, got {x.ndim}")
        if self.bias is not None:
            out = add(out, broadcast_to(self.bias, out.shape))
        return out

    def named_parameters(self, prefix: str):
        yield f"{prefix}/weight", self.weight
        if self.bias is not None:
            yield f"{prefix}/bias", self.bias


class Conv2d:
    """Same-padded convolution over [C,H,W] input with a per-channel bias."""

    def __init__(self, weight: Tensor, bias: Tensor | None = None):
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, rng, c_in: int, c_out: int, k: int, *, std: float = 0.02,
             bias: bool = True, mode: str = "gaussian") -> "Conv2d":
        if mode == "gaussian":
            w = gaussian(rng, (c_out, c_in, k, k), std)
        elif mode == "zero":
            w = zeros((c_out, c_in, k, k))
        elif mode == "identity":
            if c_in != c_out or k != 1:
                raise ValueError("identity init needs square 1x1 kernel")
            w = Tensor(np.eye(c_in).reshape(c_in, c_in, 1, 1), requires_grad=True)
        else:
            raise ValueError(f"unknown init mode {mode!r}")
        return cls(w, zeros((c_out,)) if bias else None)

    def __call__(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.weight)
        if self.bias is not None:
            out = add(out, broadcast_to(reshape(self.bias, (self.bias.shape[0], 1, 1)),
                                        out.shape))
        return out

    def named_parameters(self, prefix: str):
        yield f"{prefix}/weight", self.weight
        if self.bias is not None:
            yield f"{prefix}/bias", self.bias


class Mlp:
    """linear -> relu -> linear."""

    def __init__(self, first: Linear, second: Linear):
        self.first = first
        self.second = second

    @classmethod
    def init(cls, rng, d_in: int, d_hidden: int, d_out: int, *, std: float = 0.02) -> "Mlp":
        return cls(Linear.init(rng, d_in, d_hidden, std=std),
                   Linear.init(rng, d_hidden, d_out, std=std))

    def __call__(self, x: Tensor) -> Tensor:
        return self.second(relu(self.first(x)))

    def named_parameters(self, prefix: str):
        yield from self.first.named_parameters(f"{prefix}/fc1")
        yield from self.second.named_parameters(f"{prefix}/fc2")


class CrossAttention:
    """Single-head scaled dot-product attention with square projections.

    Queries come from the first argument, keys and values from the second;
    rows of the weight matrix sum to one.
    """

    def __init__(self, wq: Tensor, wk: Tensor, wv: Tensor):
        self.wq = wq
        self.wk = wk
        self.wv = wv

    @classmethod
    def init(cls, rng, d: int, *, std: float = 0.02) -> "CrossAttention":
        return cls(gaussian(rng, (d, d), std), gaussian(rng, (d, d), std),
                   gaussian(rng, (d, d), std))

    def __call__(self, queries: Tensor, context: Tensor) -> tuple[Tensor, Tensor]:
        d = self.wq.shape[1]
        q = contract(queries, self.wq, "nd,de->ne")
        k = contract(context, self.wk, "md,de->me")
        v = contract(context, self.wv, "md,de->me")
        logits = scale(contract(q, k, "ne,me->nm"), 1.0 / math.sqrt(d))
        weights = softmax_axis(logits, axis=1)
        if _ATTN_SINK is not None:
            _ATTN_SINK.append(weights.data)
        out = contract(weights, v, "nm,me->ne")
        return out, weights

    def named_parameters(self, prefix: str):
        yield f"{prefix}/wq", self.wq
        yield f"{prefix}/wk", self.wk
        yield f"{prefix}/wv", self.wv


def flatten_tokens(feature_map: Tensor) -> Tensor:
    """[h, w, d] -> [h*w, d]."""
    h, w, d = feature_map.shape
    return reshape(feature_map, (h * w, d))


def scalar_gate(value: float) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)


def weighted_sum(a: Tensor, wa: Tensor, b: Tensor, wb: Tensor) -> Tensor:
    """wa*a + wb*b with trainable scalar gates."""
    return add(mul(a, wa), mul(b, wb))
