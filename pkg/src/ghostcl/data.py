"""Datasets, continual scenarios and the rehearsal memory."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    samples: np.ndarray
    labels: np.ndarray
    attributes: np.ndarray | None = None          # C x A, one row per class
    sample_attributes: np.ndarray | None = None   # N x A, optional per-sample bits
    split: str = "train"
    index: np.ndarray | None = None               # position in the source set

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.samples) != len(self.labels):
            raise ValueError("samples and labels differ in length")
        if self.index is None:
            self.index = np.arange(len(self.labels))
        if self.attributes is not None and len(self.labels) and self.labels.max() >= len(self.attributes):
            raise ValueError("label without an attribute row")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.samples.shape[1:])

    def subset(self, mask_or_idx) -> "LabeledDataset":
        sa = None if self.sample_attributes is None else self.sample_attributes[mask_or_idx]
        return replace(self, samples=self.samples[mask_or_idx], labels=self.labels[mask_or_idx],
                       sample_attributes=sa, index=self.index[mask_or_idx])

    def select(self, classes: Sequence[int], purpose: str = "train") -> "LabeledDataset":
        """Samples of ``classes``. ``purpose`` is recorded by auditing wrappers."""
        return self.subset(np.isin(self.labels, list(classes)))


# ------------------------------------------------------------------------- IDX
def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path, expected_magic: int) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise IdxFormatError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: magic {magic:#010x}, expected {expected_magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise IdxFormatError(f"{path}: truncated payload ({len(raw) - header} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (images if 3-D, labels if 1-D)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        fh.write(array.tobytes())


def load_mnist_idx(images_path, labels_path, stats: tuple[float, float] | None = None,
                   split: str = "train") -> tuple[LabeledDataset, tuple[float, float]]:
    """Load an IDX image/label pair.

    Pixels go to [0, 1] and are then standardised with ``stats`` (mean, std);
    when ``stats`` is None they are computed from this set, which is then
    taken to be the training set. Returns the dataset and the stats used.
    """
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.ndim != 3:
        raise IdxFormatError("image file must be N x rows x cols")
    if len(images) != len(labels):
        raise IdxFormatError(f"{len(images)} images but {len(labels)} labels")
    x = images.astype(np.float64) / 255.0
    if stats is None:
        stats = (float(x.mean()), float(x.std()))
    x = (x - stats[0]) / stats[1]
    return LabeledDataset(x[:, None, :, :], labels.astype(np.int64), split=split), stats


# ------------------------------------------------------------------- synthetic
def make_synthetic_attribute_dataset(num_classes: int, attr_dim: int, input_dim: int,
                                     samples_per_class: int, noise_scale: float,
                                     rng: np.random.Generator,
                                     max_retries: int = 1000) -> LabeledDataset:
    """Classes with distinct binary attributes and means that are a fixed linear map of them."""
    if min(num_classes, attr_dim, input_dim, samples_per_class) <= 0:
        raise ValueError("all extents must be positive")
    if attr_dim > input_dim:
        raise ValueError("attr_dim must not exceed input_dim")
    if num_classes > 2 ** attr_dim:
        raise ValueError(f"{num_classes} distinct attribute vectors do not fit in {attr_dim} bits")
    rows: list[np.ndarray] = []
    seen: set[bytes] = set()
    retries = 0
    while len(rows) < num_classes:
        a = rng.integers(0, 2, size=attr_dim).astype(np.float64)
        key = a.tobytes()
        if key in seen:
            retries += 1
            if retries > max_retries:
                raise ValueError("attribute vectors keep colliding; attr_dim too small")
            continue
        seen.add(key)
        rows.append(a)
    E = np.stack(rows)
    mixing = rng.normal(size=(input_dim, attr_dim))
    means = E @ mixing.T
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    x = means[labels] + noise_scale * rng.normal(size=(len(labels), input_dim))
    perm = rng.permutation(len(labels))
    return LabeledDataset(x[perm], labels[perm], attributes=E)


def class_attribute_vector(dataset: LabeledDataset, c: int) -> np.ndarray:
    """Continuous class descriptor: the mean of per-sample attributes, or the stored row."""
    mask = dataset.labels == c
    if dataset.sample_attributes is not None:
        if not mask.any():
            raise KeyError(f"class {c} absent from dataset")
        return dataset.sample_attributes[mask].mean(axis=0)
    if dataset.attributes is None or not 0 <= c < len(dataset.attributes):
        raise KeyError(f"class {c} has no attributes")
    return dataset.attributes[c].astype(np.float64)


def stratified_split(dataset: LabeledDataset, fraction: float, rng: np.random.Generator,
                     names: tuple[str, str] = ("train", "val")) -> tuple[LabeledDataset, LabeledDataset]:
    """Carve ``fraction`` of every class out into a second, index-disjoint set."""
    held = np.zeros(len(dataset), dtype=bool)
    for c in dataset.classes:
        idx = np.flatnonzero(dataset.labels == c)
        k = int(round(fraction * len(idx)))
        held[rng.permutation(idx)[:k]] = True
    a, b = dataset.subset(~held), dataset.subset(held)
    a.split, b.split = names
    return a, b


# ------------------------------------------------------------------- scenario
@dataclass
class Scenario:
    groups: list[list[int]]

    def __post_init__(self):
        flat = [c for g in self.groups for c in g]
        if any(len(g) == 0 for g in self.groups):
            raise ValueError("empty task group")
        if len(set(flat)) != len(flat):
            raise ValueError("task groups overlap")

    @property
    def num_tasks(self) -> int:
        return len(self.groups)

    @property
    def all_classes(self) -> list[int]:
        return sorted(c for g in self.groups for c in g)

    # tasks are numbered 1..T
    def new(self, t: int) -> list[int]:
        return list(self.groups[t - 1])

    def seen(self, t: int) -> list[int]:
        return [c for g in self.groups[:t] for c in g]

    def unseen(self, t: int) -> list[int]:
        return [c for g in self.groups[t:] for c in g]


def build_scenario(classes: Sequence[int] | LabeledDataset, split_spec: Sequence[int],
                   order: Sequence[int] | None = None) -> Scenario:
    """Cut the class list into consecutive groups of the given sizes."""
    if isinstance(classes, LabeledDataset):
        classes = classes.classes
    classes = sorted(int(c) for c in classes)
    if order is not None:
        if sorted(order) != classes:
            raise ValueError("explicit order must be a permutation of the classes")
        classes = list(order)
    if sum(split_spec) != len(classes) or any(s <= 0 for s in split_spec):
        raise ValueError(f"split {list(split_spec)} does not partition {len(classes)} classes")
    groups, start = [], 0
    for size in split_spec:
        groups.append(classes[start:start + size])
        start += size
    return Scenario(groups)


def parse_split(text: str) -> list[int]:
    """'6+2+2' or '5+1x5' -> list of task sizes."""
    sizes: list[int] = []
    for part in text.replace(" ", "").split("+"):
        if "x" in part:
            size, times = part.split("x")
            sizes.extend([int(size)] * int(times))
        else:
            sizes.append(int(part))
    return sizes


# ------------------------------------------------------------------ rehearsal
@dataclass
class RehearsalMemory:
    capacity: int
    store: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def classes(self) -> list[int]:
        return sorted(self.store)

    def count(self, c: int) -> int:
        return len(self.store[c])

    def as_dataset(self) -> LabeledDataset | None:
        if not self.store:
            return None
        xs = [self.store[c] for c in self.classes]
        ys = [np.full(len(self.store[c]), c) for c in self.classes]
        return LabeledDataset(np.concatenate(xs), np.concatenate(ys), split="memory")


POLICIES = ("closest-to-class-mean", "first-k", "random")


def rehearsal_update(memory: RehearsalMemory, finished: LabeledDataset, s: int,
                     policy: str = "closest-to-class-mean",
                     features: np.ndarray | None = None,
                     rng: np.random.Generator | None = None) -> RehearsalMemory:
    """Return a new memory holding up to ``s`` samples of each class in ``finished``.

    ``features`` (aligned with ``finished``) is needed by the mean-based policy,
    ``rng`` by the random one.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    store = dict(memory.store)
    for c in finished.classes:
        if c in store:
            raise ValueError(f"class {c} is already in memory")
        idx = np.flatnonzero(finished.labels == c)
        if len(idx) > s:
            if policy == "first-k":
                idx = idx[:s]
            elif policy == "random":
                if rng is None:
                    raise ValueError("random policy needs an rng")
                idx = np.sort(rng.choice(idx, size=s, replace=False))
            else:
                if features is None:
                    raise ValueError("closest-to-class-mean needs features")
                f = features[idx]
                f = f / (np.linalg.norm(f, axis=1, keepdims=True) + 1e-12)
                dist = np.linalg.norm(f - f.mean(axis=0), axis=1)
                idx = idx[np.argsort(dist, kind="stable")[:s]]
        store[c] = finished.samples[idx].copy()
    return RehearsalMemory(capacity=s, store=store)
