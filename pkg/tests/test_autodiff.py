import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvcseg import autodiff as ad
from mvcseg.autodiff import Parameter, ParameterSet, Tensor


def central_diff(f, x: np.ndarray, eps=1e-5):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + eps
        up = f()
        flat[i] = o - eps
        down = f()
        flat[i] = o
        g.reshape(-1)[i] = (up - down) / (2 * eps)
    return g


def test_matmul_ones():
    out = ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 1))))
    assert out.shape == (2, 1)
    np.testing.assert_array_equal(out.data, 3.0)


@pytest.mark.parametrize("c", [-1e3, 0.0, 7.5, 1e3])
def test_softmax_constant_row(c):
    out = ad.softmax(Tensor([c, c, c]))
    np.testing.assert_allclose(out.data, 1 / 3, rtol=0, atol=1e-15)


def test_relu():
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_shape_error_names_primitive():
    with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_and_log_reject_nonfinite():
    with pytest.raises(ad.NumericDomainError):
        ad.softmax(Tensor([1.0, np.inf]))
    with pytest.raises(ad.NumericDomainError):
        ad.log(Tensor([np.nan]))


def test_log_floor():
    assert ad.log(Tensor([0.0])).item() == pytest.approx(np.log(1e-12))


def test_dot_product_grads():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=5), requires_grad=True)
    y = Tensor(rng.normal(size=5), requires_grad=True)
    ad.backward((x * y).sum())
    np.testing.assert_array_equal(x.grad, y.data)
    np.testing.assert_array_equal(y.grad, x.data)


def test_sum_of_softmax_has_zero_grad():
    z = Tensor(np.random.default_rng(1).normal(size=(4, 6)), requires_grad=True)
    ad.backward(ad.softmax(z).sum())
    np.testing.assert_allclose(z.grad, 0.0, atol=1e-15)


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.ShapeError):
        ad.backward(x * 2.0)
    with pytest.raises(ValueError, match="recorded"):
        ad.backward(Tensor([1.0]))


def test_grads_accumulate_and_unreached_is_zero():
    a = Tensor([2.0], requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    ad.backward(a * a)
    ad.backward(a * a)
    assert a.grad[0] == pytest.approx(8.0)
    assert np.all(unused.grad == 0.0)


def _three_layer(seed):
    rng = np.random.default_rng(seed)
    ps = ParameterSet()
    w1 = ps.new("w1", rng.normal(size=(5, 7)))
    b1 = ps.new("b1", rng.normal(size=7))
    w2 = ps.new("w2", rng.normal(size=(7, 4)))
    w3 = ps.new("w3", rng.normal(size=(4, 3)))
    x = Tensor(rng.normal(size=(6, 5)))
    target = np.eye(3)[rng.integers(0, 3, size=6)]

    def f():
        h = ad.sigmoid(x @ w1 + b1)
        h = ad.exp(ad.matmul(h, w2) * 0.3)
        logp = ad.log_softmax(h @ w3)
        return -(logp * Tensor(target)).sum(axis=1).mean()

    return ps, f


@pytest.mark.parametrize("seed", range(3))
def test_three_layer_against_finite_differences(seed):
    ps, f = _three_layer(seed)
    ad.backward(f())
    for p in ps:
        numeric = central_diff(lambda: f().item(), p.data, eps=1e-5)
        rel = np.abs(p.grad - numeric) / np.maximum(1.0, np.abs(numeric))
        assert rel.max() < 1e-6, p.name


def test_every_primitive_matches_finite_differences():
    rng = np.random.default_rng(3)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4,)), requires_grad=True)
    c = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    idx = np.array([2, 0, 2, 1])

    def f():
        t = ad.concat([a + b, a - c, -(a * c)])
        t = ad.take_rows(t, idx)
        t = ad.transpose(t) @ Tensor(np.ones((4, 2)))
        t = ad.reshape(t, (6, 4))
        u = ad.softmax(t) + ad.softplus(t) + ad.relu(t) + ad.log(c).sum(axis=0, keepdims=True)
        return ad.tmean(u, axis=0).sum() + ad.tsum(ad.exp(b * 0.1))

    ad.backward(f())
    for t in (a, b, c):
        numeric = central_diff(lambda: f().item(), t.data, eps=1e-6)
        np.testing.assert_allclose(t.grad, numeric, atol=1e-7, rtol=1e-6)


def test_doubling_loss_doubles_grads():
    ps, f = _three_layer(5)
    ad.backward(f())
    g1 = [p.grad.copy() for p in ps]
    ps.zero_grad()
    ad.backward(f() * 2.0)
    for p, g in zip(ps, g1):
        np.testing.assert_array_equal(p.grad, 2 * g)


def test_determinism_bitwise():
    runs = []
    for _ in range(2):
        ps, f = _three_layer(9)
        out = f()
        ad.backward(out)
        runs.append((out.data.tobytes(), [p.grad.tobytes() for p in ps]))
    assert runs[0] == runs[1]


def test_record_is_topological_and_replays_bitwise():
    ps, f = _three_layer(2)
    out = f()
    rec = ad.record_of(out)
    produced = set(rec.leaves)
    for e in rec.entries:
        assert all(i in produced for i in e.input_ids)
        produced.add(e.output_id)
    values = rec.replay()
    for oid, arr in rec.outputs.items():
        assert values[oid].tobytes() == arr.tobytes()


def test_grad_check_linear_is_exact():
    rng = np.random.default_rng(0)
    w = Parameter("w", Tensor(rng.normal(size=(3, 4)), requires_grad=True))
    x = Tensor(rng.normal(size=(4, 2)))
    err = ad.grad_check(lambda: (w.tensor @ x).sum(), [w], eps=1e-4)
    assert err < 1e-10


def test_grad_check_rejects_bad_eps_and_nonfinite():
    w = Parameter("w", Tensor([1.0], requires_grad=True))
    with pytest.raises(ValueError):
        ad.grad_check(lambda: w.tensor * 1.0, [w], eps=1e-2)
    with pytest.raises(ad.NumericDomainError):
        ad.grad_check(lambda: w.tensor * np.inf, [w], eps=1e-6)


def test_sgd_lr_zero_is_noop():
    p = Parameter("x", Tensor([1.0, -2.0], requires_grad=True))
    p.grad[...] = [3.0, 4.0]
    ad.sgd_step([p], lr=0.0, momentum=0.9)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    np.testing.assert_array_equal(p.grad, 0.0)


def test_sgd_half_square():
    p = Parameter("x", Tensor([1.0], requires_grad=True))
    ad.backward(p.tensor * p.tensor * 0.5)
    ad.sgd_step([p], lr=0.1, momentum=0.0)
    assert p.data[0] == pytest.approx(0.9, abs=1e-15)


def test_sgd_two_step_momentum_unroll():
    # constant grad g = 2 (loss = 2x); buffer: 2 then 0.9*2 + 2 = 3.8
    p = Parameter("x", Tensor([1.0], requires_grad=True))
    for _ in range(2):
        ad.backward(p.tensor * 2.0)
        ad.sgd_step([p], lr=0.1, momentum=0.9)
    assert p.data[0] == pytest.approx(1.0 - 0.2 - 0.38, abs=1e-15)
    assert p.buffer[0] == pytest.approx(3.8)


def test_sgd_nonfinite_grad_names_parameter():
    p = Parameter("layer.w", Tensor([1.0], requires_grad=True))
    p.grad[0] = np.nan
    with pytest.raises(ad.NumericDomainError, match="layer.w"):
        ad.sgd_step([p], lr=0.1)


def test_duplicate_parameter_names_rejected():
    ps = ParameterSet()
    ps.new("a", np.zeros(2))
    with pytest.raises(ValueError):
        ps.new("a", np.zeros(2))


@settings(max_examples=25, deadline=None)
@given(shapes=st.lists(st.lists(st.integers(1, 4), min_size=0, max_size=3), min_size=1, max_size=4),
       seed=st.integers(0, 2**31))
def test_checkpoint_roundtrip(tmp_path_factory, shapes, seed):
    rng = np.random.default_rng(seed)
    ps = ParameterSet()
    for i, shp in enumerate(shapes):
        ps.new(f"p{i}.weight", rng.normal(size=shp) * 1e3)
    path = tmp_path_factory.mktemp("ck") / "model.pmvc"
    ad.save_checkpoint(path, ps)
    assert path.read_bytes()[:5] == b"PMVC1"
    state = ad.load_checkpoint(path)
    assert list(state) == ps.names()
    for p in ps:
        assert state[p.name].tobytes() == p.data.tobytes()
