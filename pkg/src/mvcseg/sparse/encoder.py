"""Sparse fully-convolutional encoder shared by support and query branches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import ParameterSet, Tensor, uniform_weight
from ..data.pointcloud import PointCloud
from .conv import submanifold_conv
from .voxel import Rulebook, VoxelGrid, build_rulebook, voxelize

IN_CHANNELS = 6


@dataclass(frozen=True)
class EncoderConfig:
    widths: tuple = (32, 64, 96, 128)
    residual_blocks: int = 2
    voxel_size: float = 0.05

    def __post_init__(self):
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError(f"encoder widths must be positive, got {self.widths}")
        if self.residual_blocks < 0 or self.voxel_size <= 0:
            raise ValueError("residual_blocks must be >= 0 and voxel_size > 0")

    @property
    def dim(self) -> int:
        return self.widths[-1]


@dataclass(eq=False)
class EncodedCloud:
    grid: VoxelGrid
    rulebook: Rulebook
    voxels: Tensor  # (V, D)

    def points(self) -> Tensor:
        """Devoxelize: every point takes its voxel's embedding."""
        return ad.take_rows(self.voxels, self.grid.point_voxel)


def prepare(cloud: PointCloud, voxel_size: float) -> tuple[VoxelGrid, Rulebook]:
    grid = voxelize(cloud, voxel_size)
    return grid, build_rulebook(grid)


class SparseEncoder:
    def __init__(self, config: EncoderConfig, params: ParameterSet, rng: np.random.Generator, prefix="encoder"):
        self.config = config
        self.layers = []
        cin = IN_CHANNELS
        for i, cout in enumerate(config.widths):
            self.layers.append(self._conv(params, rng, f"{prefix}.conv{i}", cin, cout))
            cin = cout
        self.blocks = [self._conv(params, rng, f"{prefix}.res{i}", cin, cin) for i in range(config.residual_blocks)]

    @staticmethod
    def _conv(params, rng, name, cin, cout):
        w = params.new(f"{name}.weight", uniform_weight(rng, (27, cin, cout), 27 * cin))
        b = params.new(f"{name}.bias", np.zeros(cout))
        return w, b

    def encode(self, grid: VoxelGrid, rulebook: Rulebook) -> Tensor:
        x = Tensor(grid.features)
        for w, b in self.layers:
            x = ad.relu(submanifold_conv(x, rulebook, w, b))
        for w, b in self.blocks:
            x = ad.relu(x + submanifold_conv(x, rulebook, w, b))
        return x

    def __call__(self, cloud: PointCloud) -> EncodedCloud:
        grid, rb = prepare(cloud, self.config.voxel_size)
        return EncodedCloud(grid, rb, self.encode(grid, rb))


def encoder_forward(cloud: PointCloud, encoder: SparseEncoder) -> Tensor:
    """Per-point embeddings (N x D)."""
    return encoder(cloud).points()


def masked_average(embeddings: Tensor, mask: np.ndarray) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (embeddings.shape[0],):
        raise ValueError(f"mask length {mask.shape} does not match {embeddings.shape[0]} embeddings")
    if not mask.any():
        raise ValueError("mask has no positive point")
    return ad.tmean(ad.take_rows(embeddings, mask), axis=0, keepdims=True)
