"""Attribute-conditioned GMMN feature generator and ghost-feature sets."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import median_distance, mmd_loss
from .optim import Adam, init_uniform

NOISE_DIM = 15


@dataclass
class FeatureScaler:
    low: np.ndarray
    high: np.ndarray

    @property
    def span(self) -> np.ndarray:
        return self.high - self.low

    def apply(self, x: np.ndarray) -> np.ndarray:
        span = self.span
        flat = span == 0
        out = (x - self.low) / np.where(flat, 1.0, span)
        return np.where(flat, 0.5, out)

    def invert(self, x: np.ndarray) -> np.ndarray:
        return x * self.span + self.low


def fit_scaler(features: np.ndarray) -> FeatureScaler:
    features = np.asarray(features, dtype=np.float64)
    if features.size == 0:
        raise ValueError("cannot fit a scaler on no features")
    return FeatureScaler(features.min(axis=0), features.max(axis=0))


@dataclass
class GhostSet:
    """Per-class ghost features in the extractor's (unscaled) feature space."""

    features: dict[int, np.ndarray] = field(default_factory=dict)
    task: int = 0

    def __post_init__(self):
        for c, f in list(self.features.items()):
            f = np.array(f, dtype=np.float64)
            f.flags.writeable = False
            self.features[c] = f

    def __len__(self) -> int:
        return sum(len(f) for f in self.features.values())

    @property
    def classes(self) -> list[int]:
        return sorted(self.features)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        cs = self.classes
        if not cs:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        x = np.concatenate([self.features[c] for c in cs])
        y = np.concatenate([np.full(len(self.features[c]), c) for c in cs])
        return x, y


class Gmmn:
    """noise (15) ++ attributes -> hidden -> hidden -> d, leaky-ReLU, linear output."""

    def __init__(self, attr_dim: int, out_dim: int, rng: np.random.Generator,
                 hidden=(64, 128), noise_dim: int = NOISE_DIM, slope: float = 0.2):
        self.attr_dim = attr_dim
        self.out_dim = out_dim
        self.noise_dim = noise_dim
        self.hidden = list(hidden)
        self.slope = slope
        sizes = [noise_dim + attr_dim, *self.hidden, out_dim]
        self.params: dict[str, Tensor] = {}
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params[f"l{i}.w"] = init_uniform(rng, (a, b), a)
            self.params[f"l{i}.b"] = init_uniform(rng, (b,), a)
        self.losses: list[float] = []

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def forward(self, noise: np.ndarray, attributes: np.ndarray) -> Tensor:
        n = len(noise)
        cond = np.broadcast_to(np.asarray(attributes, dtype=np.float64), (n, self.attr_dim))
        h = Tensor(np.concatenate([noise, cond], axis=1))
        layers = len(self.hidden) + 1
        for i in range(layers):
            h = ad.matmul(h, self.params[f"l{i}.w"]) + self.params[f"l{i}.b"]
            if i < layers - 1:
                h = ad.leaky_relu(h, self.slope)
        return h

    def header(self) -> dict:
        return {"kind": "gmmn", "attr_dim": self.attr_dim, "out_dim": self.out_dim,
                "noise_dim": self.noise_dim, "hidden": self.hidden, "slope": self.slope}


def _check_attributes(gen: Gmmn, attributes) -> np.ndarray:
    a = np.asarray(attributes, dtype=np.float64).reshape(-1)
    if len(a) != gen.attr_dim:
        raise ValueError(f"attribute length {len(a)} != {gen.attr_dim}")
    return a


def gmmn_sample(gen: Gmmn, attributes, n: int, rng: np.random.Generator) -> np.ndarray:
    """n samples in the scaled feature space."""
    a = _check_attributes(gen, attributes)
    if n == 0:
        return np.zeros((0, gen.out_dim))
    noise = rng.standard_normal((n, gen.noise_dim))
    with ad.no_grad():
        return gen.forward(noise, a).data


def fit_generator(gen: Gmmn, features_by_class: dict[int, np.ndarray],
                  attributes: dict[int, np.ndarray], epochs: int, lr: float,
                  rng: np.random.Generator, bandwidths=(1.0, 2.0, 4.0, 8.0, 16.0),
                  median_scaled: bool = True) -> Gmmn:
    """Minimise MMD between each seen class's (scaled) features and generated ones.

    One class per step with all of its real features and as many generated
    rows; classes visited in ascending id order every epoch. Parameters carry
    over between calls.
    """
    if not features_by_class:
        raise ValueError("need at least one seen class")
    for c, f in features_by_class.items():
        if len(f) == 0:
            raise ValueError(f"class {c} has no features")
    if epochs <= 0:
        return gen
    classes = sorted(features_by_class)
    conds = {c: _check_attributes(gen, attributes[c]) for c in classes}
    sigmas = {}
    for c in classes:
        scale = median_distance(features_by_class[c]) if median_scaled else 1.0
        sigmas[c] = [scale * b for b in bandwidths]
    opt = Adam(gen.parameters(), lr=lr)
    for _ in range(epochs):
        for c in classes:
            real = features_by_class[c]
            noise = rng.standard_normal((len(real), gen.noise_dim))
            opt.zero_grad()
            loss = mmd_loss(real, gen.forward(noise, conds[c]), sigmas[c])
            loss.backward()
            opt.step()
            gen.losses.append(loss.item())
    return gen


def produce_ghosts(gen: Gmmn, scaler: FeatureScaler, unseen, attributes: dict[int, np.ndarray],
                   count_per_class: int, rng: np.random.Generator, task: int = 0) -> GhostSet:
    out = {}
    for c in sorted(unseen):
        if c not in attributes:
            raise KeyError(f"unseen class {c} has no attributes")
        out[c] = scaler.invert(gmmn_sample(gen, attributes[c], count_per_class, rng))
    return GhostSet(out, task=task)
