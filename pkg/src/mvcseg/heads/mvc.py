"""Multi-view comparison convolution (MConv) layers and stacks.

Layer 1 turns each support vector h into ``V`` kernels
    K = w_c (w_l h)^T + b_k          (V x D_out)
and scores a query vector x against them as  K x + b.
Layer n > 1 takes the previous kernel bank (V_{n-1} kernels of width W),
reduces every kernel to a scalar with a 1 x W map w_l, expands the result to
V_n kernels of width V_{n-1}, and scores relu(previous scores) with them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import ParameterSet, ShapeError, Tensor, uniform_weight


@dataclass(eq=False)
class MvcLayer:
    w_l: Tensor  # (D_out, D_in) for the first layer, (1, W_prev) afterwards
    w_c: Tensor  # (V, 1)
    b_k: Tensor  # (V, D_out) first layer, (V, V_prev) afterwards
    b: Tensor  # (V,)

    @property
    def views(self) -> int:
        return self.w_c.shape[0]

    def tensors(self):
        return [self.w_l, self.w_c, self.b_k, self.b]


def mvc_generate_kernels(layer: MvcLayer, support: Tensor) -> Tensor:
    """Kernel bank (S*V x D_out) for a first-layer support batch (S x D_in)."""
    if support.ndim != 2 or support.shape[1] != layer.w_l.shape[1]:
        raise ShapeError(f"mvc kernels: support {support.shape} does not fit w_l {layer.w_l.shape}")
    s = support.shape[0]
    v, d_out = layer.b_k.shape
    proj = support @ ad.transpose(layer.w_l)  # (S, D_out)
    bank = ad.reshape(proj, (s, 1, d_out)) * ad.reshape(layer.w_c, (1, v, 1)) + layer.b_k
    return ad.reshape(bank, (s * v, d_out))


def mvc_apply(kernels: Tensor, query: Tensor, b: Tensor) -> Tensor:
    """Scores (Q x V): query rows against kernel rows plus a per-view bias."""
    if kernels.shape[1] != query.shape[1]:
        raise ShapeError(f"mvc apply: kernels {kernels.shape} and query {query.shape} widths differ")
    v = kernels.shape[0]
    if b.shape[0] != v:
        # several support items share one per-view bias
        reps = v // b.shape[0]
        if reps * b.shape[0] != v:
            raise ShapeError(f"mvc apply: bias {b.shape} does not divide {v} kernels")
        b = ad.reshape(ad.take_rows(ad.reshape(b, (1, -1)), np.zeros(reps, dtype=np.int64)), (v,))
    return query @ ad.transpose(kernels) + b


class MvcStack:
    kind = "mvc"

    def __init__(self, layers: list[MvcLayer]):
        if not layers:
            raise ValueError("an MVC stack needs at least one layer")
        if layers[-1].views != 1:
            raise ValueError(f"the last MVC layer must have one view, got {layers[-1].views}")
        prev_width, prev_views = layers[0].w_l.shape[0], None
        for i, layer in enumerate(layers):
            if i:
                if layer.w_l.shape != (1, prev_width) or layer.b_k.shape != (layer.views, prev_views):
                    raise ValueError(f"MVC layer {i} is not compatible with layer {i - 1}")
                prev_width = prev_views
            prev_views = layer.views
        self.layers = layers

    @classmethod
    def create(cls, params: ParameterSet, rng, dim: int, views=(64, 16, 1), prefix="mvc") -> "MvcStack":
        views = tuple(int(v) for v in views)
        if not views or views[-1] != 1 or any(v < 1 for v in views):
            raise ValueError(f"views must be positive and end with 1, got {views}")
        layers = []
        width, prev = dim, None
        for i, v in enumerate(views):
            p = f"{prefix}.{i}"
            if i == 0:
                w_l = params.new(f"{p}.w_l", uniform_weight(rng, (dim, dim), dim))
                b_k = params.new(f"{p}.b_k", np.zeros((v, dim)))
            else:
                w_l = params.new(f"{p}.w_l", uniform_weight(rng, (1, width), width))
                b_k = params.new(f"{p}.b_k", np.zeros((v, prev)))
                width = prev
            w_c = params.new(f"{p}.w_c", uniform_weight(rng, (v, 1), 1))
            b = params.new(f"{p}.b", np.zeros(v))
            layers.append(MvcLayer(w_l, w_c, b_k, b))
            prev = v
        return cls(layers)

    @classmethod
    def identity(cls, dim: int) -> "MvcStack":
        """Single layer, single view, w_l = I: reduces to the plain inner product."""
        return cls([MvcLayer(Tensor(np.eye(dim)), Tensor(np.ones((1, 1))), Tensor(np.zeros((1, dim))), Tensor(np.zeros(1)))])

    @property
    def views(self) -> tuple:
        return tuple(layer.views for layer in self.layers)

    def tensors(self):
        return [t for layer in self.layers for t in layer.tensors()]

    def pairwise(self, support: Tensor, query: Tensor) -> Tensor:
        """Similarity of every query row to every support row (Q x S)."""
        return mvc_stack_forward(self, support, query)

    def paired(self, support: Tensor, query: Tensor) -> Tensor:
        """Similarity of query row q to support row q (Q x 1)."""
        return mvc_paired_forward(self, support, query)


def mvc_stack_forward(stack: MvcStack, support: Tensor, query: Tensor) -> Tensor:
    s, q = support.shape[0], query.shape[0]
    first = stack.layers[0]
    if query.shape[1] != first.w_l.shape[0]:
        raise ShapeError(f"mvc stack: query {query.shape} does not fit w_l {first.w_l.shape}")
    bank = mvc_generate_kernels(first, support)  # (S*V1, D)
    scores = ad.reshape(mvc_apply(bank, query, first.b), (q, s, first.views))
    width = bank.shape[1]
    bank = ad.reshape(bank, (s, first.views, width))
    for layer in stack.layers[1:]:
        v_prev = bank.shape[1]
        reduced = ad.reshape(bank @ ad.transpose(layer.w_l), (s, 1, v_prev))  # one scalar per kernel
        bank = reduced * ad.reshape(layer.w_c, (1, layer.views, 1)) + layer.b_k  # (S, V, V_prev)
        x = ad.transpose(ad.relu(scores), (1, 0, 2))  # (S, Q, V_prev)
        out = x @ ad.transpose(bank, (0, 2, 1)) + layer.b  # (S, Q, V)
        scores = ad.transpose(out, (1, 0, 2))
    return ad.reshape(scores, (q, s))


def mvc_paired_forward(stack: MvcStack, support: Tensor, query: Tensor) -> Tensor:
    """Row-aligned MVC without materializing per-row kernel banks.

    Each row's kernel bank has the form w_c r^T + b_k, so scoring x against it
    is w_c (r . x) + b_k x + b, and the next layer's reduction is
    w_c (r . w_l') + b_k w_l'^T.
    """
    if support.shape != query.shape:
        raise ShapeError(f"mvc paired: support {support.shape} and query {query.shape} differ")
    first = stack.layers[0]
    r = support @ ad.transpose(first.w_l)
    x = query
    prev = None
    for layer in stack.layers:
        if prev is not None:
            r = (r @ ad.transpose(layer.w_l)) @ ad.transpose(prev.w_c) + ad.transpose(prev.b_k @ ad.transpose(layer.w_l))
            x = ad.relu(scores)
        scores = ad.tsum(r * x, axis=1, keepdims=True) @ ad.transpose(layer.w_c) + x @ ad.transpose(layer.b_k) + layer.b
        prev = layer
    return scores
