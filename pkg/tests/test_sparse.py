import itertools

import numpy as np
import pytest

from mvcseg import autodiff as ad
from mvcseg.autodiff import Parameter, ParameterSet, Tensor
from mvcseg.data import PointCloud, synth_scene
from mvcseg.sparse import (
    CENTER,
    OFFSETS,
    EncoderConfig,
    SparseEncoder,
    build_rulebook,
    encoder_forward,
    masked_average,
    submanifold_conv,
    voxelize,
)


def cloud_from(xyz, rng=None):
    xyz = np.asarray(xyz, dtype=float)
    rng = np.random.default_rng(0) if rng is None else rng
    n = len(xyz)
    return PointCloud(xyz, rng.uniform(size=(n, 3)), np.zeros(n), np.zeros(n))


def random_active_grid(rng, size):
    occ = rng.uniform(size=(size, size, size)) < rng.uniform(0.2, 0.8)
    occ.flat[rng.integers(occ.size)] = True
    coords = np.argwhere(occ)
    # one point at each voxel center
    return voxelize(cloud_from((coords + 0.5) * 0.1, rng), 0.1), occ


def dense_conv_at_active(occ, feats_by_coord, w, b):
    """Brute-force dense cross-correlation, read at active sites only."""
    size = occ.shape[0]
    cin = w.shape[1]
    dense = np.zeros((size + 2, size + 2, size + 2, cin))
    for c, f in feats_by_coord.items():
        dense[c[0] + 1, c[1] + 1, c[2] + 1] = f
    out = {}
    for c in feats_by_coord:
        acc = b.copy()
        for k, o in enumerate(itertools.product((-1, 0, 1), repeat=3)):
            acc = acc + dense[c[0] + 1 + o[0], c[1] + 1 + o[1], c[2] + 1 + o[2]] @ w[k]
        out[c] = acc
    return out


def test_voxelize_two_points_one_voxel():
    g = voxelize(cloud_from([[0.01, 0.01, 0.01], [0.02, 0.02, 0.02]]), 0.05)
    assert len(g) == 1
    np.testing.assert_array_equal(g.coords, [[0, 0, 0]])
    np.testing.assert_array_equal(g.point_voxel, [0, 0])


def test_voxelize_translation_by_one_voxel():
    rng = np.random.default_rng(3)
    xyz = rng.uniform(0, 1, size=(500, 3))
    a = voxelize(cloud_from(xyz), 0.25)
    b = voxelize(cloud_from(xyz + [0.25, 0, 0]), 0.25)
    assert len(a) == len(b)
    np.testing.assert_array_equal(np.sort(b.coords - [1, 0, 0], axis=0), np.sort(a.coords, axis=0))


@pytest.mark.parametrize("seed", range(5))
def test_voxel_count_matches_set_oracle(seed):
    rng = np.random.default_rng(seed)
    xyz = rng.normal(size=(1000, 3))
    v = 0.3
    distinct = {tuple(int(np.floor(c / v)) for c in p) for p in xyz}
    g = voxelize(cloud_from(xyz), v)
    assert len(g) == len(distinct)
    assert np.all(g.counts >= 1) and g.counts.sum() == 1000
    np.testing.assert_array_equal(g.coords[g.point_voxel], np.floor(xyz / v).astype(int))


def test_voxelize_errors():
    with pytest.raises(ValueError):
        voxelize(cloud_from([[0, 0, 0]]), 0.0)
    with pytest.raises(ValueError):
        voxelize(cloud_from([[np.nan, 0, 0]]), 0.1)


def test_rulebook_single_voxel():
    rb = build_rulebook(voxelize(cloud_from([[0.0, 0.0, 0.0]]), 1.0))
    for k, (src, dst) in enumerate(rb.pairs):
        assert len(src) == (1 if k == CENTER else 0)


def test_rulebook_adjacent_pair():
    rb = build_rulebook(voxelize(cloud_from([[0.5, 0.5, 0.5], [1.5, 0.5, 0.5]]), 1.0))
    sizes = {tuple(o): len(p[0]) for o, p in zip(OFFSETS, rb.pairs)}
    assert sizes[(1, 0, 0)] == 1 and sizes[(-1, 0, 0)] == 1 and sizes[(0, 0, 0)] == 2
    assert sum(sizes.values()) == 4


def test_rulebook_full_block_matches_neighbor_scan():
    coords = np.array(list(itertools.product(range(3), repeat=3)))
    g = voxelize(cloud_from(coords + 0.5), 1.0)
    rb = build_rulebook(g)
    active = {tuple(c) for c in g.coords}
    for o, (src, dst) in zip(OFFSETS, rb.pairs):
        expect = sum(1 for c in active if tuple(np.add(c, o)) in active)
        assert len(src) == expect
    center = g.index_of([[1, 1, 1]])[0]
    assert sum(int(np.count_nonzero(dst == center)) for _, dst in rb.pairs) == 27
    src, dst = rb.pairs[CENTER]
    np.testing.assert_array_equal(src, np.arange(27))
    np.testing.assert_array_equal(dst, np.arange(27))


def test_conv_identity_center():
    rng = np.random.default_rng(0)
    g, _ = random_active_grid(rng, 5)
    rb = build_rulebook(g)
    w = np.zeros((27, 4, 4))
    w[CENTER] = np.eye(4)
    x = rng.normal(size=(len(g), 4))
    out = submanifold_conv(Tensor(x), rb, Tensor(w), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_isolated_voxel():
    rng = np.random.default_rng(1)
    g = voxelize(cloud_from([[0.5, 0.5, 0.5], [5.5, 5.5, 5.5]]), 1.0)
    rb = build_rulebook(g)
    w, b, x = rng.normal(size=(27, 3, 2)), rng.normal(size=2), rng.normal(size=(2, 3))
    out = submanifold_conv(Tensor(x), rb, Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, x @ w[CENTER] + b, atol=1e-14)


@pytest.mark.parametrize("seed", range(12))
def test_conv_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    size = int(rng.integers(2, 9))
    g, occ = random_active_grid(rng, size)
    rb = build_rulebook(g)
    cin, cout = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    x, w, b = rng.normal(size=(len(g), cin)), rng.normal(size=(27, cin, cout)), rng.normal(size=cout)
    out = submanifold_conv(Tensor(x), rb, Tensor(w), Tensor(b)).data
    ref = dense_conv_at_active(occ, {tuple(c): f for c, f in zip(g.coords, x)}, w, b)
    for c, row in zip(g.coords, out):
        np.testing.assert_allclose(row, ref[tuple(c)], atol=1e-10, rtol=0)


def test_conv_shape_error():
    g, _ = random_active_grid(np.random.default_rng(0), 3)
    rb = build_rulebook(g)
    with pytest.raises(ad.ShapeError):
        submanifold_conv(Tensor(np.zeros((len(g), 3))), rb, Tensor(np.zeros((27, 4, 2))), Tensor(np.zeros(2)))


@pytest.mark.parametrize("seed", range(3))
def test_conv_gradients(seed):
    rng = np.random.default_rng(seed)
    g, _ = random_active_grid(rng, 4)
    rb = build_rulebook(g)
    x = Parameter("x", Tensor(rng.normal(size=(len(g), 3)), requires_grad=True))
    w = Parameter("w", Tensor(rng.normal(size=(27, 3, 2)), requires_grad=True))
    b = Parameter("b", Tensor(rng.normal(size=2), requires_grad=True))
    y = rng.normal(size=(len(g), 2))

    def f():
        return ad.tsum(ad.sigmoid(submanifold_conv(x.tensor, rb, w.tensor, b.tensor)) * y)

    assert ad.grad_check(f, [x, w, b], eps=1e-6) < 1e-7


def small_encoder(seed=0, widths=(4, 6), blocks=1, v=0.1):
    ps = ParameterSet()
    return SparseEncoder(EncoderConfig(widths, blocks, v), ps, np.random.default_rng(seed)), ps


def test_encoder_shape_and_determinism():
    cloud = synth_scene(0)
    enc, _ = small_encoder(widths=(8, 16, 12))
    a = encoder_forward(cloud, enc)
    assert a.shape == (len(cloud), 12)
    b = encoder_forward(cloud, enc)
    assert a.data.tobytes() == b.data.tobytes()
    enc2, _ = small_encoder(widths=(8, 16, 12))
    assert encoder_forward(cloud, enc2).data.tobytes() == a.data.tobytes()


def test_encoder_duplicate_points_invariant():
    cloud = synth_scene(1)
    dup = PointCloud(np.vstack([cloud.xyz, cloud.xyz]), np.vstack([cloud.rgb, cloud.rgb]),
                     np.concatenate([cloud.semantic] * 2), np.concatenate([cloud.instance] * 2))
    enc, _ = small_encoder()
    a = encoder_forward(cloud, enc).data
    b = encoder_forward(dup, enc).data
    np.testing.assert_allclose(b[: len(cloud)], a, atol=1e-12)
    np.testing.assert_allclose(b[len(cloud):], a, atol=1e-12)


def test_encoder_integer_translation_equivariance():
    cloud = synth_scene(2)
    enc, _ = small_encoder(v=0.1)
    moved = PointCloud(cloud.xyz + np.array([3, -2, 1]) * 0.1 * 8, cloud.rgb, cloud.semantic, cloud.instance)
    a = encoder_forward(cloud, enc).data
    b = encoder_forward(moved, enc).data
    # voxel offsets may round differently in the last bit; compare row multisets
    np.testing.assert_allclose(np.sort(a, axis=0), np.sort(b, axis=0), atol=1e-9)


def test_submanifold_property_through_encoder():
    cloud = synth_scene(3)
    enc, _ = small_encoder()
    e = enc(cloud)
    assert e.voxels.shape[0] == len(e.grid) == e.rulebook.n_sites


def test_masked_average():
    rng = np.random.default_rng(0)
    emb = Tensor(rng.normal(size=(20, 5)))
    np.testing.assert_allclose(masked_average(emb, np.ones(20, bool)).data[0], emb.data.mean(axis=0))
    one = np.zeros(20, bool)
    one[7] = True
    np.testing.assert_array_equal(masked_average(emb, one).data[0], emb.data[7])
    for s in range(10):
        m = np.random.default_rng(s).uniform(size=20) < 0.4
        m[0] = True
        total = np.zeros(5)
        for i in range(20):
            if m[i]:
                total += emb.data[i]
        np.testing.assert_allclose(masked_average(emb, m).data[0], total / m.sum(), atol=1e-14)
    with pytest.raises(ValueError):
        masked_average(emb, np.zeros(20, bool))


def test_encoder_end_to_end_gradients():
    cloud = synth_scene(4)
    cloud = cloud.subset(np.random.default_rng(0).uniform(size=len(cloud)) < 0.05)
    enc, ps = small_encoder(widths=(3, 4), blocks=1, v=0.15)
    target = np.random.default_rng(1).normal(size=(len(cloud), 4))

    def f():
        return ad.tsum(encoder_forward(cloud, enc) * target)

    assert ad.grad_check(f, list(ps), eps=1e-6, max_coords=20) < 1e-4
