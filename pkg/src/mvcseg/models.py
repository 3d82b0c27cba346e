"""Full few-shot and supervised networks: shared encoder plus metric heads."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor, uniform_weight
from .data.pointcloud import Episode, PointCloud
from .heads import (
    PostHead,
    baseline_cp_logits,
    baseline_gap_logits,
    build_regions,
    make_head,
    supervised_logits,
)
from .heads.mvc import MvcStack
from .sparse import EncodedCloud, EncoderConfig, SparseEncoder, masked_average


@dataclass(frozen=True)
class FewShotConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    prototype: str = "compositional"  # or "global"
    attention: str = "mvc"
    attention_views: tuple = (64, 16, 1)
    head: str = "mvc"
    head_views: tuple = (64, 16, 1)
    post_layers: int = 5
    post_width: int = 16
    max_regions: int = 8

    def __post_init__(self):
        if self.prototype not in ("compositional", "global"):
            raise ValueError(f"prototype must be 'compositional' or 'global', got {self.prototype!r}")


@dataclass(eq=False)
class FewShotOutput:
    point_logits: Tensor  # (N_query,)
    voxel_logits: Tensor  # (V_query,)
    query: EncodedCloud
    attention: Tensor | None = None
    n_regions: int = 0


def foreground_voxels(encoded: EncodedCloud, mask: np.ndarray) -> np.ndarray:
    """Voxels holding at least one positive point."""
    return np.unique(encoded.grid.point_voxel[np.asarray(mask, dtype=bool)])


class FewShotNet:
    def __init__(self, config: FewShotConfig, seed: int = 0):
        self.config = config
        self.params = ParameterSet()
        rng = np.random.default_rng(seed)
        d = config.encoder.dim
        self.encoder = SparseEncoder(config.encoder, self.params, rng)
        self.attention = None
        if config.prototype == "compositional":
            self.attention = make_head(config.attention, self.params, rng, d, config.attention_views, "attention")
        self.head = make_head(config.head, self.params, rng, d, config.head_views, "head")
        self.post = None
        if config.post_layers > 0:
            self.post = PostHead(self.params, rng, d, config.post_layers, config.post_width)

    def regions(self, support: list[tuple[EncodedCloud, np.ndarray]]):
        emb, cents = [], []
        for enc, mask in support:
            fg = foreground_voxels(enc, mask)
            c = enc.grid.centroids[fg]
            # shots live in different frames: align each on its own foreground box center
            cents.append(c - (c.min(axis=0) + c.max(axis=0)) / 2)
            emb.append(ad.take_rows(enc.voxels, fg))
        return build_regions(ad.concat(emb, axis=0), np.concatenate(cents), self.config.max_regions)

    def global_prototype(self, support: list[tuple[EncodedCloud, np.ndarray]]) -> Tensor:
        pts = ad.concat([enc.points() for enc, _ in support], axis=0)
        mask = np.concatenate([np.asarray(m, dtype=bool) for _, m in support])
        return masked_average(pts, mask)

    def __call__(self, episode: Episode) -> FewShotOutput:
        support = [(self.encoder(cloud), mask) for cloud, mask in episode.support]
        query = self.encoder(episode.query)
        alpha, n_regions = None, 0
        if self.config.prototype == "global":
            vox_logits = baseline_gap_logits(self.global_prototype(support), query.voxels, self.head)
            if self.post is not None:
                vox_logits = ad.reshape(
                    self.post(ad.reshape(vox_logits, (-1, 1)), query.voxels, query.rulebook), (-1,))
        else:
            regions = self.regions(support)
            n_regions = len(regions)
            vox_logits, alpha = baseline_cp_logits(regions, query.voxels, self.attention, self.head,
                                                   self.post, query.rulebook)
        point_logits = ad.take_rows(ad.reshape(vox_logits, (-1, 1)), query.grid.point_voxel)
        return FewShotOutput(ad.reshape(point_logits, (-1,)), vox_logits, query, alpha, n_regions)


@dataclass(frozen=True)
class SupervisedConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    n_classes: int = 19  # background + 18
    head_views: tuple = (64, 16, 1)


class SupervisedNet:
    """Encoder whose classifier compares embeddings with learnable class prototypes."""

    def __init__(self, config: SupervisedConfig, seed: int = 0):
        if config.n_classes < 2:
            raise ValueError("need at least two classes")
        self.config = config
        self.params = ParameterSet()
        rng = np.random.default_rng(seed)
        d = config.encoder.dim
        self.encoder = SparseEncoder(config.encoder, self.params, rng)
        self.bank = self.params.new("prototypes", uniform_weight(rng, (config.n_classes, d), 1))
        self.head = MvcStack.create(self.params, rng, d, config.head_views, "head")

    def __call__(self, cloud: PointCloud) -> Tensor:
        enc = self.encoder(cloud)
        vox = supervised_logits(enc.voxels, self.bank, self.head)
        return ad.take_rows(vox, enc.grid.point_voxel)
