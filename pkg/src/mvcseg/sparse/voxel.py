"""Voxel hashing and submanifold rulebooks."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ..data.pointcloud import PointCloud

# offset ordering: index(o) = 9(ox+1) + 3(oy+1) + (oz+1); index(-o) = 26 - index(o)
OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
CENTER = 13
_BITS = 21
_BIAS = 1 << (_BITS - 1)


def _keys(coords: np.ndarray) -> np.ndarray:
    c = coords + _BIAS
    return (c[:, 0] << (2 * _BITS)) | (c[:, 1] << _BITS) | c[:, 2]


@dataclass(eq=False)
class VoxelGrid:
    voxel_size: float
    coords: np.ndarray  # (V, 3) int, lexicographically sorted
    features: np.ndarray  # (V, 6): mean rgb, mean offset inside the voxel (centered)
    centroids: np.ndarray  # (V, 3) mean xyz of member points
    counts: np.ndarray  # (V,)
    point_voxel: np.ndarray  # (N,) voxel index of each point

    def __len__(self) -> int:
        return self.coords.shape[0]

    def index_of(self, coords: np.ndarray) -> np.ndarray:
        """Voxel index per coordinate row, -1 where inactive."""
        keys = _keys(self.coords)
        q = _keys(np.asarray(coords, dtype=np.int64).reshape(-1, 3))
        pos = np.searchsorted(keys, q)
        pos = np.minimum(pos, len(keys) - 1)
        return np.where(keys[pos] == q, pos, -1)


def voxelize(cloud: PointCloud, v: float) -> VoxelGrid:
    if not v > 0:
        raise ValueError(f"voxel size must be positive, got {v}")
    if not np.all(np.isfinite(cloud.xyz)):
        raise ValueError("non-finite coordinates")
    scaled = cloud.xyz / v
    q = np.floor(scaled).astype(np.int64)
    if np.abs(q).max(initial=0) >= _BIAS:
        raise ValueError("coordinates exceed the voxel hash range")
    coords, inv, counts = np.unique(q, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    n_vox = coords.shape[0]

    def seg_mean(values):
        out = np.zeros((n_vox, values.shape[1]))
        np.add.at(out, inv, values)
        return out / counts[:, None]

    feats = np.concatenate([seg_mean(cloud.rgb), seg_mean(scaled - q) - 0.5], axis=1)
    return VoxelGrid(float(v), coords, feats, seg_mean(cloud.xyz), counts, inv)


@dataclass(eq=False)
class Rulebook:
    pairs: list  # per offset: (input_idx, output_idx) int arrays
    neighbors: np.ndarray  # (V, 27): index of s + o, -1 if inactive
    kernel_size: int = 3

    @property
    def n_sites(self) -> int:
        return self.neighbors.shape[0]


def build_rulebook(grid: VoxelGrid) -> Rulebook:
    if len(grid) == 0:
        raise ValueError("empty voxel grid")
    nbr = np.stack([grid.index_of(grid.coords + o) for o in OFFSETS], axis=1)
    pairs = []
    for o in range(len(OFFSETS)):
        out_idx = np.flatnonzero(nbr[:, o] >= 0)
        pairs.append((nbr[out_idx, o], out_idx))
    return Rulebook(pairs, nbr)
