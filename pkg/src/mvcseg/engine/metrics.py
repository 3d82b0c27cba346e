"""Losses, IoU accounting and benchmark reports."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..autodiff import NumericDomainError, Tensor


def episode_loss(logits: Tensor, gt: np.ndarray) -> Tensor:
    """Mean per-point binary cross-entropy of sigmoid(logits) against ``gt``."""
    y = np.asarray(gt, dtype=np.float64).reshape(-1)
    if logits.shape != y.shape:
        raise ad.ShapeError(f"episode_loss: logits {logits.shape} vs mask {y.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise NumericDomainError("non-finite logits")
    # softplus(z) - y z == -[y log s(z) + (1 - y) log(1 - s(z))]
    return ad.tmean(ad.softplus(logits) - logits * y)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean C-way cross-entropy; ``logits`` is (N x C)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ad.ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -ad.tsum(ad.log_softmax(logits) * onehot) * (1.0 / len(labels))


def iou(tp: int, fp: int, fn: int) -> float | None:
    """tp / (tp + fp + fn); None when all three are zero (class not scored)."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    denom = tp + fp + fn
    return None if denom == 0 else tp / denom


@dataclass
class EpisodeResult:
    cls: int
    pred: np.ndarray
    tp: int
    fp: int
    fn: int
    loss: float = math.nan

    @classmethod
    def from_masks(cls, label: int, pred: np.ndarray, gt: np.ndarray, loss: float = math.nan) -> "EpisodeResult":
        pred = np.asarray(pred, dtype=bool)
        gt = np.asarray(gt, dtype=bool)
        tp = int(np.count_nonzero(pred & gt))
        return cls(label, pred, tp, int(np.count_nonzero(pred)) - tp, int(np.count_nonzero(gt)) - tp, loss)


@dataclass
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    episodes: int = 0

    def add(self, r: EpisodeResult) -> None:
        self.tp += r.tp
        self.fp += r.fp
        self.fn += r.fn
        self.episodes += 1

    @property
    def iou(self) -> float | None:
        return iou(self.tp, self.fp, self.fn)


def mean_iou(counts: dict[int, ClassCounts]) -> float:
    # sorted so the float sum does not depend on episode arrival order
    vals = [c.iou for _, c in sorted(counts.items()) if c.episodes and c.iou is not None]
    return float(np.mean(vals)) if vals else math.nan


@dataclass
class BenchmarkReport:
    counts: dict = field(default_factory=dict)  # fold -> {class label -> ClassCounts}
    episodes: int = 0
    seed: int = 0
    shots: int = 1
    complexity: dict = field(default_factory=dict)  # label -> (macs, params)
    wall_clock: float = 0.0

    def add(self, fold: int, result: EpisodeResult) -> None:
        self.counts.setdefault(fold, {}).setdefault(result.cls, ClassCounts()).add(result)
        self.episodes += 1

    def fold_miou(self, fold: int) -> float:
        return mean_iou(self.counts.get(fold, {}))

    def per_class_iou(self, fold: int) -> dict[int, float | None]:
        return {c: v.iou for c, v in sorted(self.counts.get(fold, {}).items())}

    @property
    def mean_over_folds(self) -> float:
        vals = [self.fold_miou(f) for f in sorted(self.counts)]
        return float(np.mean(vals)) if vals else math.nan

    def to_csv(self) -> str:
        lines = ["fold,class,tp,fp,fn,iou"]
        for fold in sorted(self.counts):
            for cls, c in sorted(self.counts[fold].items()):
                v = c.iou
                lines.append(f"{fold},{cls},{c.tp},{c.fp},{c.fn},{'' if v is None else repr(v)}")
        for fold in sorted(self.counts):
            lines.append(f"meanIoU,{fold},{self.fold_miou(fold)!r}")
        if len(self.counts) > 1:
            lines.append(f"meanIoU,mean,{self.mean_over_folds!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "BenchmarkReport":
        rep = cls()
        for line in text.splitlines()[1:]:
            parts = line.split(",")
            if parts[0] == "meanIoU" or not line:
                continue
            fold, label, tp, fp, fn = (int(x) for x in parts[:5])
            rep.counts.setdefault(fold, {})[label] = ClassCounts(tp, fp, fn, 1)
        return rep

    def summary_means(self, text: str | None = None) -> dict:
        text = self.to_csv() if text is None else text
        out = {}
        for line in text.splitlines():
            if line.startswith("meanIoU,"):
                _, key, value = line.split(",")
                out[key] = float(value)
        return out


def group_by_frequency(counts: dict[int, int]) -> dict[str, list[int]]:
    """Tercile split of classes by point count (ties by class id): few / medium / many."""
    if any(v <= 0 for v in counts.values()):
        raise ValueError("class counts must be positive")
    order = sorted(counts, key=lambda c: (counts[c], c))
    n = len(order)
    cuts = [round(n * i / 3) for i in range(4)]
    return {name: order[cuts[i]:cuts[i + 1]] for i, name in enumerate(("few", "medium", "many"))}
