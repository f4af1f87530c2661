"""One-unseen-class-vs-all-seen linear SVMs for the latent regulariser."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class SeparatorSet:
    weights: dict[int, np.ndarray] = field(default_factory=dict)
    biases: dict[int, float] = field(default_factory=dict)
    task: int = 0

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def classes(self) -> list[int]:
        return sorted(self.weights)

    def matrix(self) -> tuple[np.ndarray, np.ndarray]:
        cs = self.classes
        return np.stack([self.weights[c] for c in cs]), np.array([self.biases[c] for c in cs])


def fit_linear_svm(x: np.ndarray, y: np.ndarray, C: float = 1.0, epochs: int = 200,
                   sample_weight: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Full-batch Pegasos on 1/2 |w|^2 + C sum_i s_i [1 - y_i (w.x_i + b)]_+.

    Equivalently lam/2 |w|^2 + mean_i s_i hinge_i with lam = 1 / (C n), stepped
    with eta_t = 1 / (lam t). The bias is unregularised. Returns the average of
    the second half of the iterates.
    """
    n, d = x.shape
    s = np.ones(n) if sample_weight is None else np.asarray(sample_weight, float)
    lam = 1.0 / (C * n)
    w = np.zeros(d)
    b = 0.0
    w_avg = np.zeros(d)
    b_avg = 0.0
    start = epochs // 2
    for t in range(1, epochs + 1):
        eta = 1.0 / (lam * t)
        viol = y * (x @ w + b) < 1.0
        coef = s[viol] * y[viol]
        gw = lam * w - coef @ x[viol] / n
        w = w - eta * gw
        b = b + eta * coef.sum() / n
        radius = 1.0 / np.sqrt(lam)
        nw = np.linalg.norm(w)
        if nw > radius:
            w *= radius / nw
        if t > start:
            k = t - start
            w_avg += (w - w_avg) / k
            b_avg += (b - b_avg) / k
    return w_avg, float(b_avg)


def _subsample(x: np.ndarray, cap: int, rng: np.random.Generator) -> np.ndarray:
    if len(x) <= cap:
        return x
    return x[np.sort(rng.choice(len(x), size=cap, replace=False))]


def train_separators(seen_features: np.ndarray, seen_labels: np.ndarray, ghosts,
                     reg_C: float = 1.0, max_per_class: int = 500, epochs: int = 200,
                     balance: bool = True, rng: np.random.Generator | None = None,
                     task: int = 0) -> SeparatorSet:
    """Train one separator per ghost class: ghosts of c are +1, every seen feature -1.

    Inputs are expected to be L2-normalised already.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    if len(seen_features) == 0:
        raise ValueError("no seen features")
    if ghosts is None or not ghosts.features:
        raise ValueError("no ghost features")
    seen_labels = np.asarray(seen_labels)
    neg = np.concatenate([_subsample(seen_features[seen_labels == c], max_per_class, rng)
                          for c in np.unique(seen_labels)])
    out = SeparatorSet(task=task)
    for c in sorted(ghosts.features):
        pos = _subsample(ghosts.features[c], max_per_class, rng)
        if len(pos) == 0:
            raise ValueError(f"no ghost features for class {c}")
        x = np.concatenate([pos, neg])
        y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
        weight = np.ones(len(x))
        if balance:
            weight[: len(pos)] = len(neg) / len(pos)
        w, b = fit_linear_svm(x, y, C=reg_C, epochs=epochs, sample_weight=weight)
        out.weights[c] = w
        out.biases[c] = b
    return out


def separator_margins(separators: SeparatorSet, features: np.ndarray) -> np.ndarray:
    """N x K matrix of w_c . h_i + b_c, columns in ascending class order."""
    W, b = separators.matrix()
    if features.shape[1] != W.shape[1]:
        raise ValueError("feature dimension does not match separators")
    return features @ W.T + b
