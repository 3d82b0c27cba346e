"""Fully supervised training with a learnable class-prototype bank."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .. import autodiff as ad
from ..autodiff import NumericDomainError
from ..data.pointcloud import PointCloud
from ..models import SupervisedNet
from .fewshot import DivergenceError
from .metrics import ClassCounts, cross_entropy, group_by_frequency

log = logging.getLogger(__name__)


@dataclass
class SupervisedResult:
    losses: np.ndarray  # mean loss per epoch
    accuracy: list = field(default_factory=list)  # per-epoch point accuracy over the epoch's scenes


def train_supervised(model: SupervisedNet, scenes: Sequence[PointCloud], epochs: int = 10, lr: float = 0.05,
                     momentum: float = 0.9, seed: int = 0, on_epoch: Callable | None = None) -> SupervisedResult:
    """One SGD step per scene, scenes shuffled each epoch. No class re-weighting."""
    if not scenes:
        raise ValueError("no training scenes")
    n_cls = model.config.n_classes
    for s in scenes:
        if s.semantic.max() >= n_cls:
            raise ValueError(f"scene label {int(s.semantic.max())} outside {n_cls} classes")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    params = list(model.params)
    losses = np.empty(epochs)
    accuracy = []
    step = 0
    for epoch in range(epochs):
        total, correct, points = 0.0, 0, 0
        for j in rng.permutation(len(scenes)):
            cloud = scenes[j]
            logits = model(cloud)
            try:
                loss = cross_entropy(logits, cloud.semantic)
            except NumericDomainError:
                raise DivergenceError(step, math.nan) from None
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(step, value)
            correct += int(np.count_nonzero(logits.data.argmax(axis=1) == cloud.semantic))
            points += len(cloud)
            ad.backward(loss)
            try:
                ad.sgd_step(params, lr, momentum)
            except NumericDomainError:
                raise DivergenceError(step, value) from None
            total += value
            step += 1
        losses[epoch] = total / len(scenes)
        accuracy.append(correct / points)
        log.info("epoch %d loss %.4f acc %.3f", epoch + 1, losses[epoch], accuracy[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, losses[epoch], accuracy[-1])
    return SupervisedResult(losses, accuracy)


def predict_supervised(model: SupervisedNet, cloud: PointCloud) -> np.ndarray:
    with ad.no_grad():
        return model(cloud).data.argmax(axis=1)


@dataclass
class SupervisedReport:
    counts: dict  # class -> ClassCounts
    groups: dict  # few/medium/many -> class list

    def class_iou(self) -> dict:
        return {c: v.iou for c, v in sorted(self.counts.items())}

    def group_miou(self) -> dict:
        out = {}
        for name, members in self.groups.items():
            vals = [self.counts[c].iou for c in members if c in self.counts and self.counts[c].iou is not None]
            out[name] = float(np.mean(vals)) if vals else math.nan
        return out

    def to_csv(self) -> str:
        lines = ["class,tp,fp,fn,iou,group"]
        where = {c: g for g, members in self.groups.items() for c in members}
        for c, v in sorted(self.counts.items()):
            iou = v.iou
            lines.append(f"{c},{v.tp},{v.fp},{v.fn},{'' if iou is None else repr(iou)},{where.get(c, '')}")
        for name, value in self.group_miou().items():
            lines.append(f"meanIoU,{name},{value!r}")
        return "\n".join(lines) + "\n"


def eval_supervised(model: SupervisedNet, scenes: Sequence[PointCloud], train_counts: dict[int, int],
                    classes: Sequence[int] | None = None) -> SupervisedReport:
    """Per-class IoU accumulated over ``scenes``, grouped by training frequency.

    ``train_counts`` maps class id to its point count in the training scenes.
    Background (class 0) is scored but never grouped.
    """
    classes = sorted(train_counts) if classes is None else list(classes)
    counts = {c: ClassCounts() for c in classes}
    for cloud in scenes:
        pred = predict_supervised(model, cloud)
        for c in classes:
            p, g = pred == c, cloud.semantic == c
            tp = int(np.count_nonzero(p & g))
            cc = counts[c]
            cc.tp += tp
            cc.fp += int(np.count_nonzero(p)) - tp
            cc.fn += int(np.count_nonzero(g)) - tp
            cc.episodes += 1
    groups = group_by_frequency({c: n for c, n in train_counts.items() if c != 0 and n > 0})
    return SupervisedReport(counts, groups)


def point_counts(scenes: Sequence[PointCloud], n_classes: int) -> dict[int, int]:
    total = np.zeros(n_classes, dtype=np.int64)
    for s in scenes:
        total += np.bincount(s.semantic, minlength=n_classes)[:n_classes]
    return {c: int(n) for c, n in enumerate(total)}
