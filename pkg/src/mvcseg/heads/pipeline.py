"""Few-shot logit heads assembled from prototypes, similarity heads and post layers."""
from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import ParameterSet, Tensor, uniform_weight
from ..sparse import Rulebook, submanifold_conv
from .prototypes import RegionSet, compose_prototype


class PostHead:
    """Submanifold conv refinement over the query grid.

    Input channels are [similarity, query embedding]; the stack predicts a
    correction that is added back onto the similarity channel.
    """

    def __init__(self, params: ParameterSet, rng, dim: int, layers: int = 5, width: int = 16, prefix="post"):
        self.convs = []
        cin = dim + 1
        for i in range(layers):
            cout = 1 if i == layers - 1 else width
            w = params.new(f"{prefix}.{i}.weight", uniform_weight(rng, (27, cin, cout), 27 * cin))
            b = params.new(f"{prefix}.{i}.bias", np.zeros(cout))
            self.convs.append((w, b))
            cin = cout

    def __len__(self):
        return len(self.convs)

    def tensors(self):
        return [t for pair in self.convs for t in pair]

    def __call__(self, similarity: Tensor, query: Tensor, rulebook: Rulebook) -> Tensor:
        x = ad.concat([similarity, query])
        for i, (w, b) in enumerate(self.convs):
            if i:
                x = ad.relu(x)
            x = submanifold_conv(x, rulebook, w, b)
        return similarity + x


def _broadcast_rows(row: Tensor, n: int) -> Tensor:
    return ad.take_rows(row, np.zeros(n, dtype=np.int64))


def fewshot_logits(prototypes: Tensor, query: Tensor, head, post: PostHead | None = None,
                   rulebook: Rulebook | None = None) -> Tensor:
    """One foreground logit per query row: head(prototype_q, query_q), then post layers."""
    sim = head.paired(prototypes, query)
    if post is not None and len(post):
        sim = post(sim, query, rulebook)
    return ad.reshape(sim, (query.shape[0],))


def baseline_gap_logits(prototype: Tensor, query: Tensor, head) -> Tensor:
    """Global prototype (1 x D) broadcast to every query row, scored by ``head``."""
    return fewshot_logits(_broadcast_rows(prototype, query.shape[0]), query, head)


def baseline_cp_logits(regions: RegionSet, query: Tensor, attention, head, post: PostHead | None = None,
                       rulebook: Rulebook | None = None) -> tuple[Tensor, Tensor]:
    """Compositional prototypes under any attention kind; returns (logits, attention weights)."""
    protos, alpha = compose_prototype(regions, query, attention)
    return fewshot_logits(protos, query, head, post, rulebook), alpha


def supervised_logits(embeddings: Tensor, bank: Tensor, head) -> Tensor:
    """(N x C) class scores: each embedding against each class prototype."""
    if bank.shape[1] != embeddings.shape[1]:
        raise ad.ShapeError(f"prototype bank {bank.shape} does not match embeddings {embeddings.shape}")
    return head.pairwise(bank, embeddings)
