"""Non-MVC similarity heads: plain inner product and concat + 1x1 convolutions."""
from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import ParameterSet, ShapeError, Tensor, uniform_weight
from .mvc import MvcStack


class InnerProduct:
    kind = "inner"
    views = ()

    def tensors(self):
        return []

    def pairwise(self, support: Tensor, query: Tensor) -> Tensor:
        if support.shape[1] != query.shape[1]:
            raise ShapeError(f"inner product: support {support.shape} and query {query.shape} widths differ")
        return query @ ad.transpose(support)

    def paired(self, support: Tensor, query: Tensor) -> Tensor:
        if support.shape != query.shape:
            raise ShapeError(f"inner product: support {support.shape} and query {query.shape} differ")
        return ad.tsum(support * query, axis=1, keepdims=True)


class ConcatConv:
    """Relation-network style head: concat(query, support) -> pointwise conv stack."""

    kind = "concatconv"

    def __init__(self, weights: list, biases: list):
        self.weights = weights
        self.biases = biases

    @classmethod
    def create(cls, params: ParameterSet, rng, dim: int, views=(64, 16, 1), prefix="concat") -> "ConcatConv":
        views = tuple(int(v) for v in views)
        if not views or views[-1] != 1:
            raise ValueError(f"concat-conv widths must end with 1, got {views}")
        ws, bs = [], []
        cin = 2 * dim
        for i, cout in enumerate(views):
            ws.append(params.new(f"{prefix}.{i}.weight", uniform_weight(rng, (cin, cout), cin)))
            bs.append(params.new(f"{prefix}.{i}.bias", np.zeros(cout)))
            cin = cout
        return cls(ws, bs)

    @property
    def views(self) -> tuple:
        return tuple(w.shape[1] for w in self.weights)

    def tensors(self):
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def _mlp(self, x: Tensor) -> Tensor:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if i:
                x = ad.relu(x)
            x = x @ w + b
        return x

    def paired(self, support: Tensor, query: Tensor) -> Tensor:
        if support.shape != query.shape:
            raise ShapeError(f"concat-conv: support {support.shape} and query {query.shape} differ")
        return self._mlp(ad.concat([query, support]))

    def pairwise(self, support: Tensor, query: Tensor) -> Tensor:
        s, q = support.shape[0], query.shape[0]
        qi = np.repeat(np.arange(q), s)
        si = np.tile(np.arange(s), q)
        out = self.paired(ad.take_rows(support, si), ad.take_rows(query, qi))
        return ad.reshape(out, (q, s))


HEAD_KINDS = ("inner", "concatconv", "mvc")


def make_head(kind: str, params: ParameterSet, rng, dim: int, views=(64, 16, 1), prefix="head"):
    if kind == "inner":
        return InnerProduct()
    if kind == "concatconv":
        return ConcatConv.create(params, rng, dim, views, prefix)
    if kind == "mvc":
        return MvcStack.create(params, rng, dim, views, prefix)
    raise ValueError(f"unknown head kind {kind!r}; expected one of {HEAD_KINDS}")
