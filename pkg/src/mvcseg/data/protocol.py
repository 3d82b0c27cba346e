"""Fold construction, instance cropping, relabeling and episode sampling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .pointcloud import Episode, PointCloud

SCANNET_CLASSES = (
    "cabinet", "bed", "chair", "sofa", "table", "door",
    "window", "bookshelf", "picture", "counter", "desk", "curtain",
    "refrigerator", "shower curtain", "toilet", "sink", "bathtub", "otherfurniture",
)
N_FOLDS = 3
FOLD_SIZE = 6


@dataclass(frozen=True)
class FoldSplit:
    fold: int
    test: tuple  # 0-based class indices into the universe
    train: tuple
    universe: tuple

    @property
    def test_names(self) -> tuple:
        return tuple(self.universe[j] for j in self.test)

    @property
    def train_names(self) -> tuple:
        return tuple(self.universe[j] for j in self.train)

    @property
    def test_labels(self) -> tuple:
        return tuple(j + 1 for j in self.test)

    @property
    def train_labels(self) -> tuple:
        return tuple(j + 1 for j in self.train)


def make_folds(universe: Sequence[str], i: int) -> FoldSplit:
    if len(universe) != N_FOLDS * FOLD_SIZE:
        raise ValueError(f"expected {N_FOLDS * FOLD_SIZE} classes, got {len(universe)}")
    if not 0 <= i < N_FOLDS:
        raise ValueError(f"fold index must be in 0..{N_FOLDS - 1}, got {i}")
    test = tuple(range(FOLD_SIZE * i, FOLD_SIZE * i + FOLD_SIZE))
    train = tuple(j for j in range(len(universe)) if j not in test)
    return FoldSplit(i, test, train, tuple(universe))


def instance_cube(cloud: PointCloud, instance: int) -> tuple[np.ndarray, float]:
    """Center and side of the crop cube: bbox center, twice the largest bbox extent."""
    pts = cloud.xyz[cloud.instance == instance]
    if pts.shape[0] == 0:
        raise KeyError(f"instance {instance} not present in cloud")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    return (lo + hi) / 2, 2.0 * float((hi - lo).max())


def crop_instance(cloud: PointCloud, instance: int) -> PointCloud:
    center, side = instance_cube(cloud, instance)
    inside = np.all(np.abs(cloud.xyz - center) <= side / 2, axis=1)
    # guard against rounding at the cube faces: instance points always stay
    inside |= cloud.instance == instance
    return cloud.subset(inside)


def relabel_for_split(cloud: PointCloud, allowed: Iterable[int]) -> PointCloud:
    """Labels outside ``allowed`` become background (0)."""
    allowed = np.fromiter(allowed, dtype=np.int64)
    sem = np.where(np.isin(cloud.semantic, allowed), cloud.semantic, 0)
    return cloud.with_semantic(sem)


@dataclass(eq=False)
class Crop:
    cloud: PointCloud
    cls: int  # semantic label of the instance the crop is centered on
    source: str
    instance: int


def build_pool(scenes: Iterable[tuple[str, PointCloud]], allowed: Iterable[int]) -> list[Crop]:
    """One crop per instance of an allowed class, masks relabeled to ``allowed``."""
    allowed = tuple(allowed)
    pool = []
    for name, scene in scenes:
        for inst in scene.instance_ids():
            cls = scene.instance_class(int(inst))
            if cls not in allowed:
                continue
            crop = relabel_for_split(crop_instance(scene, int(inst)), allowed)
            pool.append(Crop(crop, cls, name, int(inst)))
    return pool


class InsufficientExamplesError(ValueError):
    pass


def class_counts(pool: Sequence[Crop], classes: Iterable[int]) -> dict[int, int]:
    counts = {int(c): 0 for c in classes}
    for crop in pool:
        if crop.cls in counts and crop.cloud.mask(crop.cls).any():
            counts[crop.cls] += 1
    return counts


def sample_episode(pool: Sequence[Crop], classes: Iterable[int], k: int, seed,
                   counts: dict | None = None) -> Episode:
    """Pick an eligible class uniformly, then k supports and one distinct query."""
    if k < 1:
        raise ValueError(f"shot count must be >= 1, got {k}")
    classes = sorted(int(c) for c in classes)
    counts = class_counts(pool, classes) if counts is None else counts
    eligible = [c for c in classes if counts.get(c, 0) >= k + 1]
    if not eligible:
        raise InsufficientExamplesError(f"no class has {k + 1} examples; counts per class: {counts}")
    rng = np.random.default_rng(seed)
    cls = eligible[int(rng.integers(len(eligible)))]
    members = [i for i, c in enumerate(pool) if c.cls == cls and c.cloud.mask(cls).any()]
    pick = rng.choice(len(members), size=k + 1, replace=False)
    chosen = [pool[members[j]] for j in pick]
    support = [(c.cloud, c.cloud.mask(cls)) for c in chosen[:k]]
    query = chosen[k]
    return Episode(
        cls=cls,
        support=support,
        query=query.cloud,
        query_mask=query.cloud.mask(cls),
        support_refs=[(c.source, c.instance) for c in chosen[:k]],
        query_ref=(query.source, query.instance),
    ).validate()
