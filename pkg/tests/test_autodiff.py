import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ghostcl import autodiff as ad
from ghostcl.autodiff import Tensor, parameter
from ghostcl.optim import SGD, Adam, DivergenceError, clip_grad_norm, cosine_lr, init_uniform

from gradcheck import max_rel_error


def rand(rng, *shape):
    return rng.normal(size=shape)


def test_square_value_and_grad():
    x = parameter(3.0)
    y = x * x
    y.backward()
    assert y.item() == 9.0
    assert x.grad == pytest.approx(6.0)


def test_identity_matmul():
    a = parameter(np.arange(12.0).reshape(3, 4))
    y = ad.matmul(Tensor(np.eye(3)), a)
    np.testing.assert_array_equal(y.data, a.data)
    y.sum().backward()
    np.testing.assert_array_equal(a.grad, np.ones((3, 4)))


def test_reused_input_accumulates():
    x = parameter(1.5)
    (x + x).backward()
    assert x.grad == 2.0


def test_backward_needs_scalar():
    x = parameter(np.ones((2, 2)))
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_shape_mismatch():
    with pytest.raises(ValueError):
        ad.add(Tensor(np.ones((3, 4))), Tensor(np.ones((4, 3))))
    with pytest.raises(ValueError):
        ad.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 4))))
    with pytest.raises(ValueError):
        ad.conv2d(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))))


# Every primitive on random 3x4 inputs (conv/pool on small 4D maps).
PRIMITIVES = {
    "add": (lambda a, b: (a + b).sum(), [(3, 4), (3, 4)]),
    "bias_add": (lambda a, b: ((a + b) * (a + b)).sum(), [(3, 4), (4,)]),
    "mul": (lambda a, b: (a * b).sum(), [(3, 4), (3, 4)]),
    "div": (lambda a, b: (a / (b * b + 1.0)).sum(), [(3, 4), (3, 4)]),
    "matmul": (lambda a, b: (ad.matmul(a, b.T) ** 2).sum(), [(3, 4), (3, 4)]),
    "relu": (lambda a: (ad.relu(a) * a).sum(), [(3, 4)]),
    "leaky_relu": (lambda a: (ad.leaky_relu(a) * a).sum(), [(3, 4)]),
    "tanh": (lambda a: ad.tanh(a).sum(), [(3, 4)]),
    "exp": (lambda a: ad.exp(a).sum(), [(3, 4)]),
    "log": (lambda a: ad.log(a * a + 0.5).sum(), [(3, 4)]),
    "norm": (lambda a: ad.norm(a, axis=1).sum(), [(3, 4)]),
    "sum_axis": (lambda a: (ad.tsum(a, axis=0) ** 2).sum(), [(3, 4)]),
    "mean": (lambda a: (ad.mean(a, axis=1) ** 2).mean(), [(3, 4)]),
    "hinge": (lambda a: ad.hinge(a + 0.1).sum(), [(3, 4)]),
    "logsumexp": (lambda a: ad.logsumexp(a, axis=1).sum(), [(3, 4)]),
    "cosine": (lambda a, b: ad.exp(ad.cosine_similarity(a, b) * 3.0).sum(), [(3, 4), (5, 4)]),
    "take": (lambda a: (a[np.array([0, 2, 2]), np.array([1, 3, 3])] ** 2).sum(), [(3, 4)]),
    "concat": (lambda a, b: (ad.concat([a, b], axis=1) ** 3).sum(), [(3, 4), (3, 2)]),
    "conv2d": (lambda x, w, b: (ad.conv2d(x, w, b) ** 2).sum(), [(2, 2, 6, 6), (3, 2, 3, 3), (3,)]),
    "conv2d_pad": (lambda x, w: (ad.conv2d(x, w, padding=1) ** 2).sum(), [(1, 2, 4, 4), (2, 2, 3, 3)]),
    "max_pool": (lambda x: (ad.max_pool2d(x) ** 2).sum(), [(2, 3, 4, 5)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    fn, shapes = PRIMITIVES[name]
    rng = np.random.default_rng(7)
    arrays = [rand(rng, *s) for s in shapes]
    assert max_rel_error(fn, arrays) < 1e-6


def test_deterministic_bit_identical():
    rng = np.random.default_rng(3)
    x, w = rand(rng, 2, 1, 8, 8), rand(rng, 4, 1, 3, 3)

    def run():
        xp, wp = parameter(x), parameter(w)
        out = ad.max_pool2d(ad.relu(ad.conv2d(xp, wp))).sum()
        out.backward()
        return out.data.copy(), wp.grad.copy()

    (v1, g1), (v2, g2) = run(), run()
    assert v1.tobytes() == v2.tobytes()
    assert g1.tobytes() == g2.tobytes()


def test_no_grad_records_nothing():
    x = parameter(2.0)
    with ad.no_grad():
        y = x * x
    assert not y.requires_grad


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
def test_matmul_grad_property(n, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rand(rng, n, 3), rand(rng, 3, m)
    assert max_rel_error(lambda p, q: (ad.matmul(p, q) ** 2).sum(), [a, b]) < 1e-4


# ---------------------------------------------------------------- optimizers
def test_sgd_plain_step():
    p = parameter(0.0)
    p.grad = np.array(1.0)
    SGD([p], lr=0.1).step()
    assert p.data == pytest.approx(-0.1)


def test_sgd_weight_decay():
    p = parameter(1.0)
    p.grad = np.array(0.0)
    SGD([p], lr=0.1, weight_decay=1e-4).step()
    assert p.data == pytest.approx(0.99999, abs=1e-15)


def test_adam_first_step():
    p = parameter(0.0)
    p.grad = np.array(1.0)
    Adam([p], lr=1e-5).step()
    assert p.data == pytest.approx(-1e-5, rel=1e-6)


def test_non_finite_gradient_aborts():
    p = parameter(0.0)
    p.grad = np.array(np.nan)
    with pytest.raises(DivergenceError):
        SGD([p], lr=0.1).step()


def test_sgd_momentum_accumulates():
    p = parameter(0.0)
    opt = SGD([p], lr=1.0, momentum=0.5)
    for _ in range(2):
        p.grad = np.array(1.0)
        opt.step()
    # -1, then -(1 + 0.5)
    assert p.data == pytest.approx(-2.5)
    assert opt.steps == 2


@pytest.mark.parametrize("epoch,expected", [(0, 0.1), (90, 0.0), (45, 0.05)])
def test_cosine_lr(epoch, expected):
    assert cosine_lr(epoch, 90, 0.1) == pytest.approx(expected, abs=1e-15)


def test_cosine_lr_errors():
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 0.1)
    with pytest.raises(ValueError):
        cosine_lr(91, 90, 0.1)


def test_init_uniform_bound():
    rng = np.random.default_rng(0)
    p = init_uniform(rng, (50, 16), fan_in=16)
    assert np.abs(p.data).max() <= 0.25
    assert p.requires_grad


def test_clip_grad_norm_rescales_jointly():
    a, b = parameter(np.zeros(2)), parameter(0.0)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array(4.0)
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(a.grad, [0.6, 0.0])
    assert b.grad == pytest.approx(0.8)
    clip_grad_norm([a, b], 10.0)
    np.testing.assert_allclose(a.grad, [0.6, 0.0])
