"""Seeded synthetic indoor scenes: primitives resting on a floor plane.

The default catalog has 18 classes, mirroring the 18-class universe used for
the three 6-class folds. Class ``j`` (0-based) carries semantic label ``j + 1``.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np

from .pointcloud import PointCloud

GOLDEN = 0.6180339887498949


@dataclass(frozen=True)
class ClassSpec:
    name: str
    shape: str  # box | sphere | cylinder | panel
    # extents (x, y, z) in meters are drawn from [lo, hi] and then scaled so the
    # largest one falls in SceneSpec.extent_range
    lo: tuple = (1.0, 1.0, 1.0)
    hi: tuple = (1.0, 1.0, 1.0)
    rgb: tuple = (0.5, 0.5, 0.5)
    color_std: float = 0.04


@dataclass(frozen=True)
class SceneSpec:
    classes: tuple
    instances: tuple = (2, 5)
    floor_size: float = 1.4
    floor_density: float = 4000.0  # points per m^2
    object_density: float = 550.0
    extent_range: tuple = (0.2, 0.4)
    floor_rgb: tuple = (0.45, 0.45, 0.45)
    floor_color_std: float = 0.05
    noise: float = 0.004
    max_points: int = 10000


_SHAPES = [
    ("box", (1.0, 1.0, 1.0), (1.0, 1.0, 1.0)),  # cube
    ("box", (1.0, 0.5, 0.2), (1.0, 0.8, 0.35)),  # flat slab
    ("box", (0.4, 0.4, 1.0), (0.6, 0.6, 1.0)),  # tall box
    ("sphere", (1.0, 1.0, 1.0), (1.0, 1.0, 1.0)),
    ("sphere", (1.0, 0.6, 0.5), (1.0, 0.8, 0.7)),  # ellipsoid
    ("cylinder", (0.5, 0.5, 1.0), (0.7, 0.7, 1.0)),  # upright
    ("cylinder", (1.0, 1.0, 0.25), (1.0, 1.0, 0.4)),  # disk
    ("panel", (1.0, 0.05, 0.6), (1.0, 0.08, 1.0)),  # vertical board
    ("box", (1.0, 0.3, 0.3), (1.0, 0.4, 0.4)),  # long bar
]


def default_catalog() -> SceneSpec:
    classes = []
    for j in range(18):
        shape, lo, hi = _SHAPES[j % len(_SHAPES)]
        hue = (j * GOLDEN) % 1.0
        rgb = colorsys.hsv_to_rgb(hue, 0.75, 0.85)
        classes.append(ClassSpec(f"{shape}{j}", shape, lo, hi, tuple(float(c) for c in rgb)))
    return SceneSpec(tuple(classes))


def _rotz(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _sample_box(rng, ext, n):
    # five visible faces (no bottom), area-weighted
    ex, ey, ez = ext
    faces = np.array([ex * ey, ex * ez, ex * ez, ey * ez, ey * ez])
    which = rng.choice(5, size=n, p=faces / faces.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 3)) * ext
    u[:, 2] += ez / 2
    u[which == 0, 2] = ez
    u[which == 1, 1] = -ey / 2
    u[which == 2, 1] = ey / 2
    u[which == 3, 0] = -ex / 2
    u[which == 4, 0] = ex / 2
    return u


def _sample_sphere(rng, ext, n):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    v *= np.asarray(ext) / 2
    v[:, 2] += ext[2] / 2
    return v


def _sample_cylinder(rng, ext, n):
    rx, ry, h = ext[0] / 2, ext[1] / 2, ext[2]
    side = np.pi * (rx + ry) * h
    cap = np.pi * rx * ry
    on_cap = rng.uniform(size=n) < cap / (cap + side)
    t = rng.uniform(0, 2 * np.pi, size=n)
    r = np.where(on_cap, np.sqrt(rng.uniform(size=n)), 1.0)
    z = np.where(on_cap, h, rng.uniform(0, h, size=n))
    return np.stack([rx * r * np.cos(t), ry * r * np.sin(t), z], axis=1)


_SAMPLERS = {"box": _sample_box, "panel": _sample_box, "sphere": _sample_sphere, "cylinder": _sample_cylinder}


def _surface_area(shape, ext):
    ex, ey, ez = ext
    if shape in ("box", "panel"):
        return ex * ey + 2 * ez * (ex + ey)
    if shape == "sphere":
        a, b, c = ex / 2, ey / 2, ez / 2
        p = 1.6075
        return 4 * np.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3) ** (1 / p)
    return np.pi * (ex + ey) / 2 * ez + np.pi * ex * ey / 4


@dataclass
class _Placed:
    cls: int
    xy: np.ndarray
    radius: float


def synth_scene(seed: int, spec: SceneSpec | None = None) -> PointCloud:
    """Deterministic scene: a floor plus 2-5 labeled primitive instances."""
    spec = default_catalog() if spec is None else spec
    if not spec.classes:
        raise ValueError("scene spec has no classes")
    rng = np.random.default_rng(seed)
    n_inst = int(rng.integers(spec.instances[0], spec.instances[1] + 1))
    L = spec.floor_size

    xyz, rgb, sem, inst = [], [], [], []
    placed: list[_Placed] = []
    for k in range(n_inst):
        cls = int(rng.integers(len(spec.classes)))
        cs = spec.classes[cls]
        ext = rng.uniform(cs.lo, cs.hi)
        ext = ext * rng.uniform(*spec.extent_range) / ext.max()
        radius = 0.5 * float(np.hypot(ext[0], ext[1]))
        xy = None
        for _ in range(50):
            cand = rng.uniform(radius, L - radius, size=2) if L > 2 * radius else np.full(2, L / 2)
            if all(np.linalg.norm(cand - p.xy) > radius + p.radius + 0.02 for p in placed):
                xy = cand
                break
        if xy is None:
            continue
        placed.append(_Placed(cls, xy, radius))
        n = max(8, int(round(_surface_area(cs.shape, ext) * spec.object_density)))
        local = _SAMPLERS[cs.shape](rng, ext, n)
        pts = local @ _rotz(rng.uniform(0, 2 * np.pi)).T
        pts[:, :2] += xy
        pts += rng.normal(scale=spec.noise, size=pts.shape)
        tint = np.asarray(cs.rgb) + rng.normal(scale=cs.color_std, size=3)
        col = tint + rng.normal(scale=cs.color_std, size=(n, 3))
        xyz.append(pts)
        rgb.append(col)
        sem.append(np.full(n, cls + 1))
        inst.append(np.full(n, len(placed)))

    n_floor = int(round(L * L * spec.floor_density))
    fl = np.column_stack([rng.uniform(0, L, size=(n_floor, 2)), np.zeros(n_floor)])
    fcol = np.asarray(spec.floor_rgb) + rng.normal(scale=spec.floor_color_std, size=(n_floor, 1))
    fcol = fcol + rng.normal(scale=spec.floor_color_std / 3, size=(n_floor, 3))
    xyz.append(fl)
    rgb.append(fcol)
    sem.append(np.zeros(n_floor, dtype=np.int64))
    inst.append(np.zeros(n_floor, dtype=np.int64))

    cloud = PointCloud(np.concatenate(xyz), np.clip(np.concatenate(rgb), 0.0, 1.0),
                       np.concatenate(sem), np.concatenate(inst))
    if len(cloud) > spec.max_points:
        # thin the floor only; object points are kept
        floor = np.flatnonzero(cloud.instance == 0)
        drop = rng.choice(floor, size=len(cloud) - spec.max_points, replace=False)
        keep = np.ones(len(cloud), dtype=bool)
        keep[drop] = False
        cloud = cloud.subset(keep)
    return cloud.validate()


def scene_seed(seed: int, index: int) -> int:
    """Seed of scene ``index`` in a dataset generated from ``seed``."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def synth_dataset(n: int, seed: int = 0, spec: SceneSpec | None = None) -> list[tuple[str, PointCloud]]:
    spec = default_catalog() if spec is None else spec
    return [(f"scene_{i:05d}.pcseg", synth_scene(scene_seed(seed, i), spec)) for i in range(n)]
