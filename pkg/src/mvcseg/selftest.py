"""Fast self-verification checks; each is its own oracle."""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .autodiff.tensor import PRIMITIVES
from .data import PointCloud, synth_scene
from .engine.metrics import EpisodeResult, ClassCounts
from .heads import (
    ConcatConv,
    InnerProduct,
    MvcStack,
    PostHead,
    baseline_cp_logits,
    baseline_gap_logits,
    build_regions,
    compose_prototype,
    make_head,
    supervised_logits,
)
from .sparse import EncoderConfig, SparseEncoder, build_rulebook, encoder_forward, submanifold_conv, voxelize

GRAD_TOL = 1e-4


@contextlib.contextmanager
def corrupted_gradient(op: str = "relu", factor: float = 1.5):
    """Test hook: scale one primitive's backward so gradient checks must fail."""
    prim = PRIMITIVES[op]

    def bad(*args, **kwargs):
        return [None if g is None else g * factor for g in prim.backward(*args, **kwargs)]

    PRIMITIVES[op] = replace(prim, backward=bad)
    try:
        yield
    finally:
        PRIMITIVES[op] = prim


def _cloud(rng, n, extent=0.5):
    return PointCloud(rng.uniform(0, extent, size=(n, 3)), rng.uniform(size=(n, 3)), np.zeros(n), np.zeros(n))


def _randomize_biases(ps, rng):
    # zero biases leave dead relu rows sitting exactly on the kink
    for p in ps:
        if p.name.endswith(("b_k", ".b", "bias")):
            p.data[...] = rng.normal(scale=0.3, size=p.data.shape)


def _head_fragment(kind: str, seed: int):
    rng = np.random.default_rng(seed)
    ps = ParameterSet()
    d = 5
    grid = voxelize(_cloud(rng, 40), 0.1)
    rb = build_rulebook(grid)
    q = ps.new("query", rng.normal(size=(len(grid), d)))
    fg = ps.new("support", rng.normal(size=(6, d)))
    cent = rng.uniform(size=(6, 3))
    y = (rng.uniform(size=len(grid)) < 0.4).astype(float)
    if kind == "gap":
        head = ConcatConv.create(ps, rng, d, (4, 3, 1))

        def f():
            z = baseline_gap_logits(ad.tmean(fg, axis=0, keepdims=True), q, head)
            return ad.tmean(ad.softplus(z) - z * y)
    elif kind == "supervised":
        bank = ps.new("bank", rng.normal(size=(3, d)))
        head = MvcStack.create(ps, rng, d, (4, 2, 1), "sup")
        onehot = np.eye(3)[rng.integers(0, 3, size=len(grid))]

        def f():
            return -ad.tsum(ad.log_softmax(supervised_logits(q, bank, head)) * onehot)
    else:
        att = make_head(kind, ps, rng, d, (4, 2, 1), "att")
        head = MvcStack.create(ps, rng, d, (4, 2, 1), "head")
        post = PostHead(ps, rng, d, 5, 3)

        def f():
            z, _ = baseline_cp_logits(build_regions(fg, cent), q, att, head, post, rb)
            return ad.tmean(ad.softplus(z) - z * y)
    _randomize_biases(ps, rng)
    return f, list(ps)


def head_gradient_error(kind: str, seed: int, max_coords: int = 20) -> float:
    f, params = _head_fragment(kind, seed)
    return ad.grad_check(f, params, eps=1e-7, max_coords=max_coords, seed=seed)


def pipeline_gradient_error(seed: int, max_coords: int = 10) -> float:
    """Encoder -> compositional prototypes -> MVC head -> post head -> loss."""
    rng = np.random.default_rng(seed)
    ps = ParameterSet()
    enc = SparseEncoder(EncoderConfig((3, 4), 1, 0.15), ps, rng)
    d = enc.config.dim
    att = MvcStack.create(ps, rng, d, (3, 1), "att")
    head = MvcStack.create(ps, rng, d, (3, 2, 1), "head")
    post = PostHead(ps, rng, d, 3, 3)
    _randomize_biases(ps, rng)
    scene = synth_scene(seed)
    keep = np.random.default_rng(seed + 1).uniform(size=len(scene)) < 0.04
    support, query = scene.subset(keep), scene.subset(~keep & (np.arange(len(scene)) % 40 == 0))
    fg = support.semantic > 0
    if not fg.any():
        fg[0] = True
    y = (query.semantic > 0).astype(float)

    def f():
        s = enc(support)
        qe = enc(query)
        vox = np.unique(s.grid.point_voxel[fg])
        regions = build_regions(ad.take_rows(s.voxels, vox), s.grid.centroids[vox])
        z, _ = baseline_cp_logits(regions, qe.voxels, att, head, post, qe.rulebook)
        zp = ad.reshape(ad.take_rows(ad.reshape(z, (-1, 1)), qe.grid.point_voxel), (-1,))
        return ad.tmean(ad.softplus(zp) - zp * y)

    return ad.grad_check(f, list(ps), eps=1e-7, max_coords=max_coords, seed=seed)


def reduction_error(pairs: int = 1000, dim: int = 16, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    hs, hq = rng.normal(size=(pairs, dim)), rng.normal(size=(pairs, dim))
    out = MvcStack.identity(dim).paired(Tensor(hs), Tensor(hq)).data[:, 0]
    return float(np.max(np.abs(out - np.einsum("ij,ij->i", hs, hq))))


def composition_errors(instances: int = 1000, seed: int = 0) -> tuple[float, float, float]:
    """(attention-sum error, envelope violation, logit-shift error) maxima."""
    rng = np.random.default_rng(seed)
    worst = [0.0, 0.0, 0.0]
    for _ in range(instances):
        d = int(rng.integers(2, 9))
        n = int(rng.integers(1, 30))
        regions = build_regions(Tensor(rng.normal(size=(n, d))), rng.uniform(size=(n, 3)))
        q = Tensor(rng.normal(size=(int(rng.integers(1, 12)), d)))
        P, alpha = compose_prototype(regions, q, InnerProduct())
        worst[0] = max(worst[0], float(np.max(np.abs(alpha.data.sum(axis=1) - 1.0))))
        emb = regions.embeddings.data
        below = emb.min(axis=0) - P.data
        above = P.data - emb.max(axis=0)
        worst[1] = max(worst[1], float(max(below.max(), above.max(), 0.0)))
        shift = float(rng.uniform(-20, 20))
        P2, _ = compose_prototype(regions, q, _Shifted(shift))
        worst[2] = max(worst[2], float(np.max(np.abs(P2.data - P.data))))
    return worst[0], worst[1], worst[2]


class _Shifted(InnerProduct):
    def __init__(self, c: float):
        self.c = c

    def pairwise(self, support, query):
        return super().pairwise(support, query) + self.c


def dense_conv_error(cases: int = 100, max_size: int = 8, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    offsets = list(itertools.product((-1, 0, 1), repeat=3))
    for _ in range(cases):
        size = int(rng.integers(2, max_size + 1))
        occ = rng.uniform(size=(size,) * 3) < rng.uniform(0.1, 0.9)
        occ.flat[rng.integers(occ.size)] = True
        coords = np.argwhere(occ)
        n = len(coords)
        grid = voxelize(PointCloud((coords + 0.5) * 0.1, rng.uniform(size=(n, 3)), np.zeros(n), np.zeros(n)), 0.1)
        cin, cout = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        x, w, b = rng.normal(size=(n, cin)), rng.normal(size=(27, cin, cout)), rng.normal(size=cout)
        out = submanifold_conv(Tensor(x), build_rulebook(grid), Tensor(w), Tensor(b)).data
        dense = np.zeros((size + 2,) * 3 + (cin,))
        for c, f in zip(grid.coords, x):
            dense[tuple(c + 1)] = f
        for c, row in zip(grid.coords, out):
            ref = b.copy()
            for k, o in enumerate(offsets):
                ref += dense[tuple(c + 1 + np.array(o))] @ w[k]
            worst = max(worst, float(np.max(np.abs(row - ref))))
    return worst


def recount_mismatches(episodes: int = 200, seed: int = 0) -> int:
    """Accumulated counts vs a per-point recount over stored masks."""
    rng = np.random.default_rng(seed)
    acc: dict[int, ClassCounts] = {}
    stored = []
    for _ in range(episodes):
        n = int(rng.integers(1, 400))
        cls = int(rng.integers(1, 7))
        gt = rng.uniform(size=n) < rng.uniform(0, 0.5)
        pred = rng.uniform(size=n) < rng.uniform(0, 0.5)
        acc.setdefault(cls, ClassCounts()).add(EpisodeResult.from_masks(cls, pred, gt))
        stored.append((cls, pred, gt))
    bad = 0
    for cls, counts in acc.items():
        tp = fp = fn = 0
        for c, pred, gt in stored:
            if c != cls:
                continue
            for p, g in zip(pred, gt):
                tp += bool(p and g)
                fp += bool(p and not g)
                fn += bool(g and not p)
        bad += (tp, fp, fn) != (counts.tp, counts.fp, counts.fn)
        if tp + fp + fn and counts.iou != tp / (tp + fp + fn):
            bad += 1
    return bad


def checks() -> list[tuple[str, Callable[[], tuple[bool, str]]]]:
    def grad(kind):
        def run():
            err = max(head_gradient_error(kind, s) for s in range(2))
            return err < GRAD_TOL, f"max rel err {err:.2e}"
        return run

    def pipeline():
        err = pipeline_gradient_error(0)
        return err < GRAD_TOL, f"max rel err {err:.2e}"

    def reduction():
        err = reduction_error()
        return err < 1e-12, f"max abs err {err:.2e}"

    def composition():
        a, env, shift = composition_errors(200)
        ok = a < 1e-9 and env <= 1e-12 and shift < 1e-9
        return ok, f"sum err {a:.1e}, envelope {env:.1e}, shift err {shift:.1e}"

    def conv():
        err = dense_conv_error(20, 6)
        return err < 1e-10, f"max abs err {err:.2e}"

    def recount():
        bad = recount_mismatches(50)
        return bad == 0, f"{bad} mismatched classes"

    return [
        ("gradient/gap", grad("gap")),
        ("gradient/cp-inner", grad("inner")),
        ("gradient/cp-concatconv", grad("concatconv")),
        ("gradient/cp-mvc", grad("mvc")),
        ("gradient/supervised", grad("supervised")),
        ("gradient/pipeline", pipeline),
        ("reduction/inner-product", reduction),
        ("composition/softmax-convexity", composition),
        ("sparse-conv/dense-oracle", conv),
        ("metrics/iou-recount", recount),
    ]


def run(out=print, corrupt: bool = False) -> list[str]:
    """Run every check, print one line each; return names of failed checks."""
    failed = []
    ctx = corrupted_gradient() if corrupt else contextlib.nullcontext()
    with ctx:
        for name, check in checks():
            try:
                ok, detail = check()
            except Exception as e:  # a crashing check is a failing check
                ok, detail = False, f"{type(e).__name__}: {e}"
            out(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
            if not ok:
                failed.append(name)
    return failed
