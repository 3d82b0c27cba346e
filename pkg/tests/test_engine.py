import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvcseg import autodiff as ad
from mvcseg.autodiff import Tensor
from mvcseg.data import PointCloud, build_pool, default_catalog, make_folds, synth_dataset
from mvcseg.engine import (
    BenchmarkReport,
    ClassCounts,
    DivergenceError,
    EpisodeResult,
    cross_entropy,
    episode_loss,
    eval_fewshot,
    eval_supervised,
    group_by_frequency,
    iou,
    mean_iou,
    point_counts,
    train_fewshot,
    train_supervised,
)
from mvcseg.models import FewShotConfig, FewShotNet, SupervisedConfig, SupervisedNet
from mvcseg.selftest import recount_mismatches
from mvcseg.sparse import EncoderConfig

TINY = FewShotConfig(EncoderConfig((8, 16), 1, 0.1), attention_views=(4, 1), head_views=(4, 1), post_width=4)


def test_episode_loss_examples():
    assert episode_loss(Tensor([20.0, -20.0, 20.0]), np.array([1, 0, 1])).item() < 1e-8
    assert episode_loss(Tensor(np.zeros(7)), np.array([1, 0, 0, 1, 1, 0, 1])).item() == pytest.approx(math.log(2))
    with pytest.raises(ad.NumericDomainError):
        episode_loss(Tensor([np.inf, 0.0]), np.array([1, 0]))
    with pytest.raises(ad.ShapeError):
        episode_loss(Tensor([0.0, 0.0]), np.array([1, 0, 1]))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 60))
def test_episode_loss_matches_per_point_bce(seed, n):
    rng = np.random.default_rng(seed)
    z = rng.normal(scale=4, size=n)
    y = rng.uniform(size=n) < 0.5
    total = 0.0
    for zi, yi in zip(z, y):
        p = 1 / (1 + math.exp(-zi))
        total += -(math.log(p) if yi else math.log(1 - p))
    assert episode_loss(Tensor(z), y).item() == pytest.approx(total / n, rel=1e-10)


def test_cross_entropy_matches_loop():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(12, 4))
    y = rng.integers(0, 4, size=12)
    ref = np.mean([-(row[c] - math.log(sum(math.exp(v) for v in row))) for row, c in zip(z, y)])
    assert cross_entropy(Tensor(z), y).item() == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("counts,expect", [((3, 1, 2), 0.5), ((7, 0, 0), 1.0), ((0, 5, 0), 0.0), ((0, 0, 0), None)])
def test_iou_examples(counts, expect):
    assert iou(*counts) == expect


def test_iou_rejects_negative():
    with pytest.raises(ValueError):
        iou(-1, 0, 0)


def test_episode_result_conservation():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 100))
        pred, gt = rng.uniform(size=n) < 0.3, rng.uniform(size=n) < 0.3
        r = EpisodeResult.from_masks(1, pred, gt)
        assert r.tp + r.fn == gt.sum() and r.tp + r.fp == pred.sum()


def test_mean_iou_excludes_unscored_classes():
    counts = {1: ClassCounts(3, 1, 2, 1), 2: ClassCounts(0, 0, 0, 1), 3: ClassCounts(1, 0, 0, 1)}
    assert mean_iou(counts) == pytest.approx(0.75)


def test_recount_oracle():
    assert recount_mismatches(200, seed=1) == 0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_perfect_episode_never_lowers_iou(seed):
    rng = np.random.default_rng(seed)
    c = ClassCounts(*(int(v) for v in rng.integers(0, 50, size=3)), 1)
    before = c.iou
    gt = rng.uniform(size=30) < 0.5
    c.add(EpisodeResult.from_masks(1, gt, gt))
    assert before is None or c.iou >= before


def test_report_csv_roundtrip():
    rep = BenchmarkReport()
    rng = np.random.default_rng(0)
    for fold in (0, 1):
        for _ in range(40):
            gt, pred = rng.uniform(size=50) < 0.4, rng.uniform(size=50) < 0.4
            rep.add(fold, EpisodeResult.from_masks(int(rng.integers(1, 7)), pred, gt))
    text = rep.to_csv()
    assert text.splitlines()[0] == "fold,class,tp,fp,fn,iou"
    back = BenchmarkReport.from_csv(text)
    means = rep.summary_means()
    for fold in (0, 1):
        assert back.fold_miou(fold) == means[str(fold)]
    assert means["mean"] == pytest.approx((means["0"] + means["1"]) / 2, abs=0)


@pytest.mark.parametrize("counts,expect", [
    ({1: 1, 2: 10, 3: 100}, {"few": [1], "medium": [2], "many": [3]}),
    ({4: 5, 2: 5, 9: 5, 1: 5}, {"few": [1], "medium": [2, 4], "many": [9]}),
])
def test_group_by_frequency_examples(counts, expect):
    assert group_by_frequency(counts) == expect


def test_group_by_frequency_eighteen():
    rng = np.random.default_rng(0)
    counts = {c: int(rng.integers(1, 1000)) for c in range(1, 19)}
    g = group_by_frequency(counts)
    assert [len(g[k]) for k in ("few", "medium", "many")] == [6, 6, 6]
    order = sorted(counts, key=lambda c: (counts[c], c))
    assert g["few"] + g["medium"] + g["many"] == order
    with pytest.raises(ValueError):
        group_by_frequency({1: 0})


@pytest.fixture(scope="module")
def fold_pools():
    scenes = synth_dataset(120, 0)
    fold = make_folds([c.name for c in default_catalog().classes], 0)
    return fold, build_pool(scenes, fold.train_labels), build_pool(scenes, fold.test_labels)


def test_lr_zero_is_noop(fold_pools):
    fold, train, _ = fold_pools
    net = FewShotNet(TINY, 0)
    before = net.params.state()
    train_fewshot(net, train, fold.train_labels, episodes=5, lr=0.0, seed=0)
    after = net.params.state()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_training_deterministic(fold_pools):
    fold, train, _ = fold_pools
    a = train_fewshot(FewShotNet(TINY, 1), train, fold.train_labels, episodes=8, seed=3)
    b = train_fewshot(FewShotNet(TINY, 1), train, fold.train_labels, episodes=8, seed=3)
    assert a.losses.tobytes() == b.losses.tobytes()


def test_training_reduces_loss(fold_pools):
    fold, train, _ = fold_pools
    res = train_fewshot(FewShotNet(TINY, 0), train, fold.train_labels, episodes=400, seed=0)
    assert res.losses[-100:].mean() < res.losses[:100].mean()
    assert [e for e, _ in res.curve] == list(range(50, 401, 50))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts(fold_pools):
    fold, train, _ = fold_pools
    with pytest.raises(DivergenceError) as info:
        train_fewshot(FewShotNet(TINY, 0), train, fold.train_labels, episodes=200, lr=1e6, momentum=0.0, seed=0)
    assert info.value.episode < 200


def test_eval_oracle_predictors(fold_pools):
    fold, _, test = fold_pools
    net = FewShotNet(TINY, 0)
    perfect = eval_fewshot(net, test, fold.test_labels, episodes=30, predictor=lambda ep: ep.query_mask)
    assert perfect.fold_miou(0) == 1.0
    empty = eval_fewshot(net, test, fold.test_labels, episodes=30,
                         predictor=lambda ep: np.zeros(len(ep.query), bool))
    assert empty.fold_miou(0) == 0.0


def test_eval_counts_match_recount(fold_pools):
    fold, _, test = fold_pools
    keep = []
    rep = eval_fewshot(FewShotNet(TINY, 0), test, fold.test_labels, episodes=20, keep=keep)
    assert rep.episodes == 20
    for cls, c in rep.counts[0].items():
        tp = sum(int(np.sum(r.pred & g)) for r, g in keep if r.cls == cls)
        fp = sum(int(np.sum(r.pred & ~g)) for r, g in keep if r.cls == cls)
        fn = sum(int(np.sum(~r.pred & g)) for r, g in keep if r.cls == cls)
        assert (c.tp, c.fp, c.fn) == (tp, fp, fn)


def test_eval_deterministic(fold_pools):
    fold, _, test = fold_pools
    net = FewShotNet(TINY, 2)
    a = eval_fewshot(net, test, fold.test_labels, shots=5, episodes=6, seed=4).to_csv()
    b = eval_fewshot(net, test, fold.test_labels, shots=5, episodes=6, seed=4).to_csv()
    assert a == b


def toy_scene(seed):
    rng = np.random.default_rng(seed)
    n = 400
    xyz = rng.uniform(0, 1, (n, 3))
    lab = (xyz[:, 0] > 0.5).astype(int)
    rgb = np.where(lab[:, None] == 1, [0.9, 0.1, 0.1], [0.1, 0.1, 0.9]) + rng.normal(0, 0.05, (n, 3))
    return PointCloud(xyz, np.clip(rgb, 0, 1), lab, lab)


SUP = SupervisedConfig(EncoderConfig((8, 16), 1, 0.1), 2, (4, 1))


@pytest.mark.parametrize("seed", range(3))
def test_supervised_overfits_toy_scene(seed):
    res = train_supervised(SupervisedNet(SUP, seed), [toy_scene(0)], epochs=200, lr=0.05, seed=seed)
    assert max(res.accuracy) > 0.95


def test_supervised_lr_zero_and_determinism():
    net = SupervisedNet(SUP, 0)
    before = net.params.state()
    train_supervised(net, [toy_scene(0)], epochs=2, lr=0.0)
    assert all(before[k].tobytes() == v.tobytes() for k, v in net.params.state().items())
    a = train_supervised(SupervisedNet(SUP, 1), [toy_scene(0), toy_scene(1)], epochs=3, seed=5)
    b = train_supervised(SupervisedNet(SUP, 1), [toy_scene(0), toy_scene(1)], epochs=3, seed=5)
    assert a.losses.tobytes() == b.losses.tobytes()


def test_supervised_rejects_out_of_range_labels():
    bad = toy_scene(0).with_semantic(np.full(400, 5))
    with pytest.raises(ValueError):
        train_supervised(SupervisedNet(SUP, 0), [bad], epochs=1)


def test_eval_supervised_groups():
    scenes = [c for _, c in synth_dataset(12, 3)]
    cfg = SupervisedConfig(EncoderConfig((4, 8), 0, 0.1), 19, (2, 1))
    net = SupervisedNet(cfg, 0)
    counts = point_counts(scenes[:8], 19)
    assert sum(counts.values()) == sum(len(s) for s in scenes[:8])
    rep = eval_supervised(net, scenes[8:], counts)
    present = [c for c in range(1, 19) if counts[c] > 0]
    assert sorted(rep.groups["few"] + rep.groups["medium"] + rep.groups["many"]) == present
    lines = rep.to_csv().splitlines()
    assert lines[0] == "class,tp,fp,fn,iou,group"
    assert {l.split(",")[1] for l in lines if l.startswith("meanIoU")} == {"few", "medium", "many"}
