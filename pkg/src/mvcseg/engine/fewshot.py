"""Episodic training and evaluation loops."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .. import autodiff as ad
from ..autodiff import NumericDomainError
from ..data.protocol import Crop, class_counts, sample_episode
from ..models import FewShotNet
from .metrics import BenchmarkReport, EpisodeResult, episode_loss

log = logging.getLogger(__name__)

TRAIN_STREAM = 1
EVAL_STREAM = 2


class DivergenceError(RuntimeError):
    def __init__(self, episode: int, value: float):
        super().__init__(f"training diverged at episode {episode} (loss={value})")
        self.episode = episode


def episode_seed(seed: int, stream: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, stream, index])


@dataclass
class TrainResult:
    losses: np.ndarray
    curve: list = field(default_factory=list)  # (episode, mean loss of the window)


def train_fewshot(model: FewShotNet, pool: Sequence[Crop], classes, episodes: int = 2000, lr: float = 0.05,
                  momentum: float = 0.9, seed: int = 0, shots: int = 1, log_every: int = 50,
                  on_log: Callable | None = None) -> TrainResult:
    classes = tuple(classes)
    counts = class_counts(pool, classes)
    losses = np.empty(episodes)
    curve = []
    params = list(model.params)
    for i in range(episodes):
        ep = sample_episode(pool, classes, shots, episode_seed(seed, TRAIN_STREAM, i), counts)
        out = model(ep)
        try:
            loss = episode_loss(out.point_logits, ep.query_mask)
        except NumericDomainError:
            raise DivergenceError(i, float("nan")) from None
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(i, value)
        ad.backward(loss)
        try:
            ad.sgd_step(params, lr, momentum)
        except NumericDomainError:
            raise DivergenceError(i, value) from None
        losses[i] = value
        if (i + 1) % log_every == 0:
            window = float(losses[i + 1 - log_every : i + 1].mean())
            curve.append((i + 1, window))
            log.info("episode %d loss %.4f", i + 1, window)
            if on_log is not None:
                on_log(i + 1, window)
    return TrainResult(losses, curve)


def predict(model: FewShotNet, episode) -> tuple[np.ndarray, float]:
    """Foreground mask (sigmoid > 0.5) and loss for one episode, without gradients."""
    with ad.no_grad():
        out = model(episode)
        loss = episode_loss(out.point_logits, episode.query_mask).item()
    return out.point_logits.data > 0.0, loss


def eval_fewshot(model: FewShotNet, pool: Sequence[Crop], classes, shots: int = 1, episodes: int = 1000,
                 seed: int = 0, fold: int = 0, report: BenchmarkReport | None = None,
                 keep: list | None = None, predictor: Callable | None = None) -> BenchmarkReport:
    """Dataset-level IoU over ``episodes`` fixed test episodes.

    ``keep`` collects (EpisodeResult, ground truth) pairs for later recounts;
    ``predictor`` overrides the model's masks.
    """
    classes = tuple(classes)
    counts = class_counts(pool, classes)
    report = BenchmarkReport(seed=seed, shots=shots) if report is None else report
    t0 = time.perf_counter()
    for i in range(episodes):
        ep = sample_episode(pool, classes, shots, episode_seed(seed, EVAL_STREAM, i), counts)
        if predictor is None:
            pred, loss = predict(model, ep)
        else:
            pred, loss = predictor(ep), float("nan")
        res = EpisodeResult.from_masks(ep.cls, pred, ep.query_mask, loss)
        report.add(fold, res)
        if keep is not None:
            keep.append((res, ep.query_mask.copy()))
    report.wall_clock += time.perf_counter() - t0
    return report
