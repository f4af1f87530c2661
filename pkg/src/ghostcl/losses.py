"""Training objectives and their weighted combination.

Batch losses are averaged over samples.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DISTILL_KINDS = ("pod", "less-forget", "none")


@dataclass
class LossConfig:
    delta: float = 0.6
    tau: float = 1.0
    lambda1: float = 3.0
    lambda2: float = 1e-3
    distill: str = "pod"
    bandwidths: list[float] = field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0, 16.0])
    median_scaled: bool = True     # bandwidths are multiples of the median pairwise distance
    scale: float = 1.0             # optional multiplier on cosine scores before NCA
    pod_flat: float = 1.0          # weight of the embedding term inside POD
    svm_reg: bool = False

    def __post_init__(self):
        if min(self.delta, self.tau, self.lambda1, self.lambda2, self.pod_flat) < 0:
            raise ValueError("margins and weights must be non-negative")
        if not self.bandwidths or min(self.bandwidths) <= 0:
            raise ValueError("bandwidths must be positive")
        if self.distill not in DISTILL_KINDS:
            raise ValueError(f"distill must be one of {DISTILL_KINDS}")


def _positions(labels, classes: Sequence[int]) -> np.ndarray:
    lookup = {int(c): i for i, c in enumerate(classes)}
    try:
        return np.array([lookup[int(y)] for y in np.asarray(labels).reshape(-1)], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]} has no score column") from None


def nca_loss(scores: Tensor, labels, delta: float, classes: Sequence[int] | None = None,
             scale: float = 1.0) -> Tensor:
    """Hinged NCA with margin: [-(s_y - delta) + log sum_{c != y} exp s_c]_+, batch mean.

    ``classes`` names the score columns (default 0..K-1); ``labels`` are class ids.
    """
    scores = ad.as_tensor(scores)
    n, k = scores.shape
    classes = list(range(k)) if classes is None else list(classes)
    if len(classes) != k:
        raise ValueError("classes must name every score column")
    pos = _positions(labels, classes)
    if scale != 1.0:
        scores = scores * scale
    target = scores[np.arange(n), pos]
    mask = np.zeros((n, k), dtype=bool)
    mask[np.arange(n), pos] = True
    others = ad.where(mask, np.full((n, k), -np.inf), scores)
    per_sample = ad.hinge(ad.logsumexp(others, axis=1) - (target - delta * scale))
    return ad.mean(per_sample)


def nca_ghost_loss(scores_all: Tensor, labels, delta: float, seen: Sequence[int],
                   unseen: Sequence[int], classes: Sequence[int] | None = None,
                   scale: float = 1.0) -> Tensor:
    """NCA whose denominator runs over wrong seen *and* unseen classes."""
    if not len(seen):
        raise ValueError("empty seen class set")
    scores_all = ad.as_tensor(scores_all)
    classes = list(range(scores_all.shape[1])) if classes is None else list(classes)
    cols = list(seen) + list(unseen)
    sub = scores_all if cols == classes else scores_all[:, _positions(cols, classes)]
    return nca_loss(sub, labels, delta, classes=cols, scale=scale)


def less_forget_distill(features_old, features_new: Tensor) -> Tensor:
    """Mean of 1 - cos(old_i, new_i)."""
    features_old = ad.as_tensor(features_old)
    return ad.mean(1.0 - ad.rowwise_cosine(features_old, features_new))


def pod_pool(a: Tensor) -> tuple[Tensor, Tensor | None]:
    """(width-pooled, height-pooled) flattened descriptors of an N,C,H,W map.

    A 2-D tap (N, H) has no spatial extent and is returned as-is.
    """
    if a.ndim == 2:
        return a, None
    n = a.shape[0]
    width = ad.tsum(a, axis=3).reshape(n, -1)    # N, C*H
    height = ad.tsum(a, axis=2).reshape(n, -1)   # N, C*W
    return width, height


def _sq_dist_normalized(a: Tensor, b: Tensor) -> Tensor:
    d = ad.l2_normalize(a) - ad.l2_normalize(b)
    return ad.tsum(d * d, axis=1)


def pod_distill(taps_old, taps_new, final_old, final_new: Tensor, flat_weight: float = 1.0) -> Tensor:
    """Pooled-spatial distillation on every tap plus a flat term on the embedding.

    Per sample: mean over taps of ||norm(pool(old)) - norm(pool(new))||^2, plus
    flat_weight * ||norm(final_old) - norm(final_new)||^2; then averaged over the batch.
    """
    if len(taps_old) != len(taps_new):
        raise ValueError("tap count differs between models")
    per_sample = None
    for old, new in zip(taps_old, taps_new):
        old = ad.as_tensor(old)
        if old.shape != new.shape:
            raise ValueError(f"tap shapes differ: {old.shape} vs {new.shape}")
        ow, oh = pod_pool(old)
        nw, nh = pod_pool(new)
        desc_old = ow if oh is None else ad.concat([ow, oh], axis=1)
        desc_new = nw if nh is None else ad.concat([nw, nh], axis=1)
        term = _sq_dist_normalized(desc_old, desc_new)
        per_sample = term if per_sample is None else per_sample + term
    flat = _sq_dist_normalized(ad.as_tensor(final_old), final_new) * flat_weight
    if per_sample is not None:
        flat = flat + per_sample * (1.0 / len(taps_old))
    return ad.mean(flat)


def svm_reg_loss(seen_features: Tensor, separators, tau: float, normalize: bool = True,
                 expect_unseen: bool = False) -> Tensor:
    """Mean over seen features and separators of [w_c . h + b_c + tau]_+.

    The separators are constants: no gradient reaches w or b.
    """
    if separators is None or len(separators) == 0:
        if expect_unseen:
            raise ValueError("unseen classes exist but no separators were trained")
        return Tensor(0.0)
    h = ad.l2_normalize(seen_features) if normalize else seen_features
    W, b = separators.matrix()
    margins = ad.matmul(h, Tensor(W.T)) + Tensor(b)
    return ad.mean(ad.hinge(margins + tau))


def pairwise_sq_dists(a: Tensor, b: Tensor) -> Tensor:
    n, d = a.shape
    m, d2 = b.shape
    if d != d2:
        raise ValueError(f"dimension mismatch: {d} vs {d2}")
    diff = a.reshape(n, 1, d) - b.reshape(1, m, d)
    return ad.tsum(diff * diff, axis=2)


def median_distance(x: np.ndarray) -> float:
    x = np.asarray(x)
    d = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))
    off = d[~np.eye(len(x), dtype=bool)]
    med = float(np.median(off)) if off.size else 0.0
    return med if med > 0 else 1.0


def mmd_loss(real, generated: Tensor, bandwidths: Sequence[float]) -> Tensor:
    """Biased MMD^2 summed over Gaussian kernels exp(-||x-y||^2 / (2 sigma^2))."""
    real, generated = ad.as_tensor(real), ad.as_tensor(generated)
    if real.shape[0] == 0 or generated.shape[0] == 0:
        raise ValueError("empty sample set")
    if real.shape[1] != generated.shape[1]:
        raise ValueError(f"dimension mismatch: {real.shape[1]} vs {generated.shape[1]}")
    dxx = pairwise_sq_dists(real, real)
    dyy = pairwise_sq_dists(generated, generated)
    dxy = pairwise_sq_dists(real, generated)
    total = None
    for sigma in bandwidths:
        gamma = -1.0 / (2.0 * sigma * sigma)
        term = (ad.mean(ad.exp(dxx * gamma)) + ad.mean(ad.exp(dyy * gamma))
                - 2.0 * ad.mean(ad.exp(dxy * gamma)))
        total = term if total is None else total + term
    return total


def total_loss(parts: dict, config: LossConfig, ghost_mode: bool, first_task: bool = False):
    """Base:  nca + l1 * distill.   Ghost: nca_ghost + l1 * distill + l2 * svm."""
    key = "nca_ghost" if ghost_mode else "nca"
    if key not in parts:
        raise KeyError(f"missing loss part {key!r}")
    total = parts[key]
    if not first_task and config.distill != "none":
        if "distill" not in parts:
            raise KeyError("missing loss part 'distill'")
        total = total + config.lambda1 * parts["distill"]
    if ghost_mode and config.svm_reg:
        if "svm" not in parts:
            raise KeyError("missing loss part 'svm'")
        total = total + config.lambda2 * parts["svm"]
    return total
