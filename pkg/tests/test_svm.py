import cvxpy as cp
import numpy as np
import pytest

from ghostcl.generator import GhostSet
from ghostcl.svm import SeparatorSet, fit_linear_svm, separator_margins, train_separators


def qp_oracle(x, y, C, weight):
    """Exact primal soft-margin SVM with an unregularised bias."""
    w = cp.Variable(x.shape[1])
    b = cp.Variable()
    hinge = cp.pos(1 - cp.multiply(y, x @ w + b))
    cp.Problem(cp.Minimize(0.5 * cp.sum_squares(w) + C * cp.sum(cp.multiply(weight, hinge)))).solve()
    return np.asarray(w.value), float(b.value)


def ten_point_instance(seed):
    rng = np.random.default_rng(seed)
    ghosts = rng.normal(size=(5, 2)) + [1.5, 0.5]
    seen = rng.normal(size=(5, 2)) - [1.0, 0.5]
    ghosts /= np.linalg.norm(ghosts, axis=1, keepdims=True)
    seen /= np.linalg.norm(seen, axis=1, keepdims=True)
    return ghosts, seen


def test_one_dimensional_max_margin():
    x = np.array([[2.0], [3.0], [-2.0], [-3.0]])
    y = np.array([1.0, 1.0, -1.0, -1.0])
    w, b = fit_linear_svm(x, y, C=1e3)
    assert w[0] > 0
    assert abs(b / w[0]) < 1e-6          # boundary at 0
    assert np.all(y * (x[:, 0] * w[0] + b) >= 1.0 - 1e-9)


def test_overlapping_sets_cannot_reach_zero_hinge():
    pts = np.random.default_rng(0).normal(size=(6, 2))
    x = np.concatenate([pts, pts])
    y = np.r_[np.ones(6), -np.ones(6)]
    w, b = fit_linear_svm(x, y, C=1.0)
    assert np.maximum(0, 1 - y * (x @ w + b)).sum() > 0


@pytest.mark.parametrize("seed", range(5))
def test_matches_qp_oracle(seed):
    ghosts, seen = ten_point_instance(seed)
    sep = train_separators(seen, np.zeros(5, int), GhostSet({7: ghosts}), reg_C=1.0,
                           rng=np.random.default_rng(0))
    x = np.concatenate([ghosts, seen])
    y = np.r_[np.ones(5), -np.ones(5)]
    w_star, b_star = qp_oracle(x, y, 1.0, np.ones(10))
    w, b = sep.weights[7], sep.biases[7]
    assert w @ w_star / np.linalg.norm(w) / np.linalg.norm(w_star) >= 0.99
    # support vectors sit on the margin; count only clear violations
    violations = np.sum(y * (x @ w + b) < 1 - 1e-2)
    violations_star = np.sum(y * (x @ w_star + b_star) < 1 - 1e-2)
    assert violations == violations_star


def test_balanced_weights_match_weighted_oracle():
    rng = np.random.default_rng(3)
    ghosts = rng.normal(size=(3, 2)) + [1.0, 1.0]
    seen = rng.normal(size=(9, 2)) - [0.5, 0.5]
    ghosts /= np.linalg.norm(ghosts, axis=1, keepdims=True)
    seen /= np.linalg.norm(seen, axis=1, keepdims=True)
    sep = train_separators(seen, np.zeros(9, int), GhostSet({0: ghosts}), reg_C=1.0)
    x = np.concatenate([ghosts, seen])
    y = np.r_[np.ones(3), -np.ones(9)]
    w_star, _ = qp_oracle(x, y, 1.0, np.r_[np.full(3, 3.0), np.ones(9)])
    w = sep.weights[0]
    assert w @ w_star / np.linalg.norm(w) / np.linalg.norm(w_star) >= 0.99


def test_subsampling_cap_and_determinism():
    rng = np.random.default_rng(0)
    seen = rng.normal(size=(40, 3))
    labels = np.repeat([0, 1], 20)
    ghosts = GhostSet({5: rng.normal(size=(30, 3)) + 2, 6: rng.normal(size=(30, 3)) - 2})
    a = train_separators(seen, labels, ghosts, max_per_class=10, rng=np.random.default_rng(4))
    b = train_separators(seen, labels, ghosts, max_per_class=10, rng=np.random.default_rng(4))
    assert a.classes == [5, 6]
    for c in a.classes:
        assert a.weights[c].tobytes() == b.weights[c].tobytes() and a.biases[c] == b.biases[c]


def test_errors():
    with pytest.raises(ValueError):
        train_separators(np.zeros((0, 2)), np.zeros(0), GhostSet({1: np.ones((2, 2))}))
    with pytest.raises(ValueError):
        train_separators(np.ones((2, 2)), np.zeros(2), GhostSet({}))


def test_margins():
    s = SeparatorSet({0: np.array([1.0, 0.0])}, {0: -1.0})
    assert separator_margins(s, np.array([[1.0, 0.0]]))[0, 0] == 0.0
    s2 = SeparatorSet({0: np.array([1.0, 2.0]), 1: np.array([-1.0, 0.5])}, {0: 0.3, 1: -0.7})
    h = np.random.default_rng(0).normal(size=(4, 2))
    on_plane = np.array([[-0.3, 0.0]])
    assert separator_margins(s2, on_plane)[0, 0] == pytest.approx(0.0)
    diff = separator_margins(s2, 2 * h) - 2 * separator_margins(s2, h)
    np.testing.assert_allclose(diff, -np.tile([0.3, -0.7], (4, 1)), atol=1e-12)
