import numpy as np
import pytest

from vguide import autodiff as ad
from vguide.errors import ShapeError

rng = np.random.default_rng(0)


def numeric_grad(f, arrays, eps=1e-6):
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + eps
            hi = f()
            arr[idx] = old - eps
            lo = f()
            arr[idx] = old
            g[idx] = (hi - lo) / (2 * eps)
        out.append(g)
    return out


def check(build, *shapes, positive=False):
    arrays = [rng.standard_normal(s) for s in shapes]
    if positive:
        arrays = [np.abs(a) + 0.5 for a in arrays]
    weights = None

    def value():
        nonlocal weights
        out = build(*[ad.Tensor(a) for a in arrays])
        if weights is None:
            weights = np.random.default_rng(1).standard_normal(out.shape)
        return float((out.data * weights).sum())

    value()
    leaves = [ad.Tensor(a) for a in arrays]
    with ad.Tape() as tape:
        out = build(*leaves)
        loss = ad.total(ad.mul(out, weights))
    analytic = tape.gradients(loss, leaves)
    numeric = numeric_grad(value, arrays)
    for a, n in zip(analytic, numeric):
        np.testing.assert_allclose(a, n, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("build,shapes", [
    (ad.add, [(3, 4), (4,)]),
    (ad.sub, [(2, 1, 3), (4, 3)]),
    (ad.mul, [(3, 4), (3, 1)]),
    (lambda a: ad.scale(a, -2.5), [(5,)]),
    (ad.matmul, [(2, 3, 4), (4, 5)]),
    (ad.exp, [(3, 3)]),
    (ad.tanh, [(4,)]),
    (lambda a: ad.total(a, axis=1), [(3, 4, 2)]),
    (lambda a: ad.reshape(a, (6, 2)), [(3, 4)]),
    (lambda a: ad.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
    (lambda a, b: ad.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    (lambda a: ad.slice_(a, (slice(None), slice(1, 3))), [(3, 4)]),
    (lambda a: ad.slice_(a, np.array([0, 2, 0])), [(3, 2)]),
    (lambda t: ad.embedding_lookup(t, np.array([[1, 1], [0, 3]])), [(4, 3)]),
    (ad.layer_norm, [(2, 5), (5,), (5,)]),
    (lambda a: ad.log_softmax(a), [(3, 6)]),
])
def test_finite_differences(build, shapes):
    check(build, *shapes)


def test_log_finite_differences():
    check(ad.log, (4,), positive=True)


def test_cross_entropy_finite_differences():
    targets = np.array([[0, 2], [1, 1]])
    weights = np.array([[1.0, 0.5], [0.0, 2.0]])
    check(lambda x: ad.cross_entropy_from_logprobs(ad.log_softmax(x), targets, weights), (2, 2, 3))


def test_reused_node_accumulates():
    x = ad.Tensor(np.array([1.5, -2.0]))
    with ad.Tape() as tape:
        loss = ad.total(ad.add(ad.mul(x, x), x))
    (g,) = tape.gradients(loss, [x])
    np.testing.assert_allclose(g, 2 * x.data + 1)


def test_unused_leaf_gets_zeros():
    x, y = ad.Tensor(np.ones(3)), ad.Tensor(np.ones((2, 2)))
    with ad.Tape() as tape:
        loss = ad.total(x)
    gx, gy = tape.gradients(loss, [x, y])
    assert gy.shape == (2, 2) and not gy.any()
    np.testing.assert_array_equal(gx, np.ones(3))


def test_no_tape_means_no_recording():
    assert not ad.recording()
    ad.add(np.ones(2), np.ones(2))
    with ad.Tape() as tape:
        assert ad.recording()
    assert tape.records == []


def test_non_scalar_loss_rejected():
    x = ad.Tensor(np.ones(3))
    with ad.Tape() as tape:
        y = ad.exp(x)
    with pytest.raises(ShapeError):
        tape.backward(y)


@pytest.mark.parametrize("call", [
    lambda: ad.add(np.ones(3), np.ones(4)),
    lambda: ad.matmul(np.ones((2, 3)), np.ones((2, 3))),
    lambda: ad.reshape(np.ones(5), (2, 3)),
    lambda: ad.embedding_lookup(np.ones((3, 2)), [3]),
    lambda: ad.layer_norm(np.ones((2, 4)), np.ones(3), np.ones(4)),
    lambda: ad.cross_entropy_from_logprobs(np.zeros((2, 3)), [0]),
])
def test_shape_errors(call):
    with pytest.raises(ShapeError):
        call()


def test_log_softmax_normalizes_extreme_values():
    out = ad.log_softmax(np.array([[1000.0, 0.0, -1000.0]])).data
    assert np.isfinite(out).all()
    assert np.exp(out).sum() == pytest.approx(1.0)
