"""Regional foreground features and compositional prototypes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor


@dataclass(eq=False)
class RegionSet:
    embeddings: Tensor  # (R', D)
    centroids: np.ndarray  # (R', 3)
    codes: np.ndarray  # (R',) octant code of each region
    members: list  # foreground row indices per region

    def __len__(self) -> int:
        return self.embeddings.shape[0]


def octant_codes(centroids: np.ndarray, max_regions: int = 8) -> np.ndarray:
    """Split the bounding box at its center along x, then y, then z."""
    if max_regions not in (1, 2, 4, 8):
        raise ValueError(f"max_regions must be 1, 2, 4 or 8, got {max_regions}")
    n_axes = int(np.log2(max_regions))
    lo, hi = centroids.min(axis=0), centroids.max(axis=0)
    above = centroids > (lo + hi) / 2
    codes = np.zeros(len(centroids), dtype=np.int64)
    for ax in range(n_axes):
        codes = codes * 2 + above[:, ax]
    return codes


def build_regions(embeddings: Tensor, centroids: np.ndarray, max_regions: int = 8) -> RegionSet:
    centroids = np.asarray(centroids, dtype=np.float64).reshape(-1, 3)
    if embeddings.shape[0] == 0 or centroids.shape[0] == 0:
        raise ValueError("no foreground voxels to build regions from")
    if centroids.shape[0] != embeddings.shape[0]:
        raise ValueError(f"{embeddings.shape[0]} embeddings but {centroids.shape[0]} centroids")
    codes = octant_codes(centroids, max_regions)
    used = np.unique(codes)
    members = [np.flatnonzero(codes == c) for c in used]
    avg = np.zeros((len(used), len(codes)))
    for i, m in enumerate(members):
        avg[i, m] = 1.0 / len(m)
    region_emb = Tensor(avg) @ embeddings
    region_cent = np.stack([centroids[m].mean(axis=0) for m in members])
    return RegionSet(region_emb, region_cent, used, members)


def compose_prototype(regions: RegionSet, query: Tensor, attention) -> tuple[Tensor, Tensor]:
    """Per-query prototypes sum_i softmax_i(g_iq) h_i; returns (prototypes, weights)."""
    logits = attention.pairwise(regions.embeddings, query)  # (Q, R')
    alpha = ad.softmax(logits)
    return alpha @ regions.embeddings, alpha
