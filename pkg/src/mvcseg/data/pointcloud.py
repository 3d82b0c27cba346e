"""Point cloud / episode containers and the PCSEG1 binary format."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PCSEG_MAGIC = b"PCSEG1\0"
_RECORD = np.dtype([("xyz", "<f4", 3), ("rgb", "<f4", 3), ("sem", "<u2"), ("inst", "<u2")])


class InvalidCloudError(ValueError):
    pass


@dataclass(eq=False)
class PointCloud:
    xyz: np.ndarray  # (N, 3) meters
    rgb: np.ndarray  # (N, 3) in [0, 1]
    semantic: np.ndarray  # (N,) 0 = background
    instance: np.ndarray  # (N,) 0 = none

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        self.rgb = np.asarray(self.rgb, dtype=np.float64).reshape(-1, 3)
        self.semantic = np.asarray(self.semantic, dtype=np.int64).reshape(-1)
        self.instance = np.asarray(self.instance, dtype=np.int64).reshape(-1)

    def __len__(self) -> int:
        return self.xyz.shape[0]

    def validate(self) -> "PointCloud":
        n = len(self)
        if n < 1:
            raise InvalidCloudError("point cloud is empty")
        if not (self.rgb.shape[0] == self.semantic.shape[0] == self.instance.shape[0] == n):
            raise InvalidCloudError("per-point arrays have mismatched lengths")
        if not np.all(np.isfinite(self.xyz)):
            raise InvalidCloudError("non-finite coordinates")
        if np.any(self.rgb < 0) or np.any(self.rgb > 1):
            raise InvalidCloudError("rgb outside [0, 1]")
        ids = self.instance > 0
        pairs = np.unique(np.stack([self.instance[ids], self.semantic[ids]], axis=1), axis=0)
        if len(np.unique(pairs[:, 0])) != len(pairs):
            raise InvalidCloudError("an instance id spans more than one semantic class")
        return self

    def subset(self, keep) -> "PointCloud":
        return PointCloud(self.xyz[keep], self.rgb[keep], self.semantic[keep], self.instance[keep])

    def with_semantic(self, semantic: np.ndarray) -> "PointCloud":
        return PointCloud(self.xyz, self.rgb, semantic, self.instance)

    def mask(self, cls: int) -> np.ndarray:
        """Ground-truth binary mask of class ``cls``."""
        return self.semantic == cls

    def instance_ids(self) -> np.ndarray:
        ids = np.unique(self.instance)
        return ids[ids > 0]

    def instance_class(self, inst: int) -> int:
        labels = self.semantic[self.instance == inst]
        if labels.size == 0:
            raise KeyError(f"instance {inst} not present")
        return int(labels[0])


@dataclass(eq=False)
class Episode:
    cls: int
    support: list  # [(PointCloud, mask)]
    query: PointCloud
    query_mask: np.ndarray
    support_refs: list = field(default_factory=list)
    query_ref: object = None

    @property
    def k(self) -> int:
        return len(self.support)

    def validate(self) -> "Episode":
        for cloud, m in self.support:
            if m.shape != (len(cloud),):
                raise ValueError("support mask length differs from its cloud")
            if not m.any():
                raise ValueError("support mask has no positive point")
            if cloud is self.query:
                raise ValueError("query cloud appears in the support set")
        if self.query_mask.shape != (len(self.query),):
            raise ValueError("query mask length differs from the query cloud")
        return self


def write_cloud(path, cloud: PointCloud) -> None:
    rec = np.empty(len(cloud), dtype=_RECORD)
    rec["xyz"] = cloud.xyz
    rec["rgb"] = cloud.rgb
    rec["sem"] = cloud.semantic
    rec["inst"] = cloud.instance
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(PCSEG_MAGIC + struct.pack("<I", len(cloud)) + rec.tobytes())
    tmp.replace(path)


def read_cloud(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if not raw.startswith(PCSEG_MAGIC):
        raise InvalidCloudError(f"{path}: missing PCSEG1 header")
    (n,) = struct.unpack_from("<I", raw, len(PCSEG_MAGIC))
    body = raw[len(PCSEG_MAGIC) + 4 :]
    if len(body) != n * _RECORD.itemsize:
        raise InvalidCloudError(f"{path}: expected {n} records, file holds {len(body) / _RECORD.itemsize:g}")
    rec = np.frombuffer(body, dtype=_RECORD)
    return PointCloud(rec["xyz"], rec["rgb"], rec["sem"], rec["inst"])


# episode manifest: class=<id> k=<k> support=<file:instance,...> query=<file:instance>


@dataclass(frozen=True)
class ManifestEntry:
    cls: int
    k: int
    support: tuple  # ((file, instance), ...)
    query: tuple  # (file, instance)

    def format(self) -> str:
        sup = ",".join(f"{f}:{i}" for f, i in self.support)
        return f"class={self.cls} k={self.k} support={sup} query={self.query[0]}:{self.query[1]}"


def _ref(token: str) -> tuple:
    name, _, inst = token.rpartition(":")
    if not name:
        raise ValueError(f"bad reference {token!r}, expected <file>:<instance>")
    return name, int(inst)


def parse_manifest_line(line: str) -> ManifestEntry:
    fields = dict(tok.split("=", 1) for tok in line.split())
    missing = {"class", "k", "support", "query"} - set(fields)
    if missing:
        raise ValueError(f"manifest line lacks {sorted(missing)}: {line!r}")
    support = tuple(_ref(t) for t in fields["support"].split(","))
    k = int(fields["k"])
    if len(support) != k:
        raise ValueError(f"k={k} but {len(support)} support references")
    return ManifestEntry(int(fields["class"]), k, support, _ref(fields["query"]))


def read_manifest(path) -> list[ManifestEntry]:
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append(parse_manifest_line(line))
    return out


def write_manifest(path, entries) -> None:
    Path(path).write_text("".join(e.format() + "\n" for e in entries))
