"""Feature extractors, the cosine proxy classifier and checkpoint I/O."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, parameter
from .optim import init_uniform

NORM_EPS = 1e-12


# ----------------------------------------------------------------- extractors
ARCHITECTURES = ("mnist-2d", "mlp-synth")


@dataclass
class FeatureExtractor:
    """``arch`` plus an ordered name -> parameter map.

    mnist-2d: conv5x5 -> relu -> pool2 -> conv5x5 -> relu -> pool2 -> fc(d)
    mlp-synth: fc -> relu -> fc -> relu -> fc(d)
    """

    arch: dict
    params: dict[str, Tensor]
    frozen: bool = False

    @property
    def out_dim(self) -> int:
        return int(self.arch["out_dim"])

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.arch["input_shape"])

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def forward(self, x) -> tuple[Tensor, list[Tensor]]:
        x = ad.as_tensor(x)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match {self.input_shape}")
        p = self.params
        taps: list[Tensor] = []
        if self.arch["name"] == "mnist-2d":
            h = ad.max_pool2d(ad.relu(ad.conv2d(x, p["conv1.w"], p["conv1.b"])))
            taps.append(h)
            h = ad.max_pool2d(ad.relu(ad.conv2d(h, p["conv2.w"], p["conv2.b"])))
            taps.append(h)
            h = h.reshape(h.shape[0], -1)
        else:
            h = ad.relu(ad.matmul(x, p["fc1.w"]) + p["fc1.b"])
            taps.append(h)
            h = ad.relu(ad.matmul(h, p["fc2.w"]) + p["fc2.b"])
            taps.append(h)
        out = ad.matmul(h, p["out.w"]) + p["out.b"]
        return out, taps

    __call__ = forward

    def features(self, x, batch_size: int = 512) -> np.ndarray:
        """Plain-array features, computed without recording a graph."""
        rows = []
        with ad.no_grad():
            for i in range(0, len(x), batch_size):
                rows.append(self.forward(x[i:i + batch_size])[0].data)
        if not rows:
            return np.zeros((0, self.out_dim))
        return np.concatenate(rows)


def build_extractor(arch: dict, rng: np.random.Generator) -> FeatureExtractor:
    arch = dict(arch)
    name = arch["name"]
    d = int(arch.setdefault("out_dim", 2 if name == "mnist-2d" else 16))
    params: dict[str, Tensor] = {}
    if name == "mnist-2d":
        c1, c2 = arch.setdefault("channels", [8, 16])
        k = int(arch.setdefault("kernel", 5))
        arch.setdefault("input_shape", [1, 28, 28])
        cin, hgt, wid = arch["input_shape"]
        params["conv1.w"] = init_uniform(rng, (c1, cin, k, k), cin * k * k)
        params["conv1.b"] = init_uniform(rng, (c1,), cin * k * k)
        params["conv2.w"] = init_uniform(rng, (c2, c1, k, k), c1 * k * k)
        params["conv2.b"] = init_uniform(rng, (c2,), c1 * k * k)
        side_h = ((hgt - k + 1) // 2 - k + 1) // 2
        side_w = ((wid - k + 1) // 2 - k + 1) // 2
        flat = c2 * side_h * side_w
    elif name == "mlp-synth":
        h1, h2 = arch.setdefault("hidden", [64, 64])
        din = int(arch["input_shape"][0])
        params["fc1.w"] = init_uniform(rng, (din, h1), din)
        params["fc1.b"] = init_uniform(rng, (h1,), din)
        params["fc2.w"] = init_uniform(rng, (h1, h2), h1)
        params["fc2.b"] = init_uniform(rng, (h2,), h1)
        flat = h2
    else:
        raise ValueError(f"unknown architecture {name!r}; expected one of {ARCHITECTURES}")
    params["out.w"] = init_uniform(rng, (flat, d), flat)
    params["out.b"] = init_uniform(rng, (d,), flat)
    return FeatureExtractor(arch, params)


def snapshot(extractor: FeatureExtractor) -> FeatureExtractor:
    """Frozen deep copy; its arrays are read-only and never receive gradients."""
    params = {}
    for name, p in extractor.params.items():
        data = p.data.copy()
        data.flags.writeable = False
        params[name] = Tensor(data)
    return FeatureExtractor(dict(extractor.arch), params, frozen=True)


# ------------------------------------------------------------------ proxies
SEEN, UNSEEN = "seen", "unseen"


@dataclass
class ProxyBank:
    """One proxy row per class; row order is the order classes were added."""

    class_ids: list[int]
    theta: Tensor
    status: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.theta.shape[0] != len(self.class_ids):
            raise ValueError("one proxy row per class")

    def __len__(self) -> int:
        return len(self.class_ids)

    @property
    def dim(self) -> int:
        return self.theta.shape[1]

    def row(self, c: int) -> int:
        return self.class_ids.index(c)

    def rows(self, classes) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.class_ids)}
        return np.array([lookup[int(c)] for c in classes], dtype=np.int64)

    def unseen(self) -> list[int]:
        return [c for c in self.class_ids if self.status.get(c) == UNSEEN]

    def mark_seen(self, classes) -> None:
        for c in classes:
            self.status[int(c)] = SEEN

    def init_from_ghosts(self, ghosts) -> None:
        """Move unseen proxies onto the normalised mean of their ghost rows."""
        for c, feats in ghosts.features.items():
            if self.status.get(c) == UNSEEN and len(feats):
                m = feats.mean(axis=0)
                self.theta.data[self.row(c)] = m / (np.linalg.norm(m) + NORM_EPS)


def empty_bank(dim: int) -> ProxyBank:
    return ProxyBank([], parameter(np.zeros((0, dim))), {})


def extend_proxies(bank: ProxyBank, new_classes, rng: np.random.Generator,
                   ghosts=None, status: str = UNSEEN) -> ProxyBank:
    """Append a row per class: ghost-mean init when ghosts are given, else fan-in uniform."""
    new_classes = [int(c) for c in new_classes]
    dup = set(new_classes) & set(bank.class_ids)
    if dup or len(set(new_classes)) != len(new_classes):
        raise ValueError(f"duplicate class ids {sorted(dup) or new_classes}")
    d = bank.dim
    rows = []
    for c in new_classes:
        feats = None if ghosts is None else ghosts.features.get(c)
        if feats is not None and len(feats):
            m = feats.mean(axis=0)
            rows.append(m / (np.linalg.norm(m) + NORM_EPS))
        else:
            rows.append(rng.uniform(-1.0, 1.0, size=d) / np.sqrt(d))
    data = np.concatenate([bank.theta.data, np.array(rows).reshape(-1, d)])
    st = dict(bank.status)
    st.update({c: status for c in new_classes})
    return ProxyBank(bank.class_ids + new_classes, parameter(data), st)


def cosine_scores(features: Tensor, bank: ProxyBank) -> Tensor:
    """N x C matrix of cosine similarities, columns in bank row order."""
    features = ad.as_tensor(features)
    if features.shape[1] != bank.dim:
        raise ValueError(f"feature dim {features.shape[1]} != proxy dim {bank.dim}")
    if np.any(np.all(features.data == 0, axis=1)) or np.any(np.all(bank.theta.data == 0, axis=1)):
        raise ValueError("zero-norm feature or proxy")
    return ad.cosine_similarity(features, bank.theta, eps=NORM_EPS)


def predict(scores, class_ids) -> np.ndarray:
    """Argmax class id per row; ties go to the lowest class id."""
    scores = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    class_ids = np.asarray(class_ids)
    if scores.shape[-1] == 0 or len(class_ids) == 0:
        raise ValueError("empty proxy bank")
    order = np.argsort(class_ids, kind="stable")
    return class_ids[order][np.argmax(scores[:, order], axis=1)]


# --------------------------------------------------------------- checkpoints
MAGIC = b"GHCK"
VERSION = 1


def save_checkpoint(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Header JSON, dimension table, then float64 little-endian payloads in order."""
    text = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(text)), text, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for arr in arrays.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos = 12
    header = json.loads(raw[pos:pos + hlen])
    pos += hlen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    table = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        dims = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        table.append((name, dims))
    arrays = {}
    for name, dims in table:
        n = int(np.prod(dims)) if dims else 1
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(dims).copy()
        pos += 8 * n
    if pos != len(raw):
        raise ValueError(f"{path}: trailing or missing payload bytes")
    return header, arrays


def save_model(path, extractor: FeatureExtractor, bank: ProxyBank, extra: dict | None = None) -> None:
    header = {
        "kind": "model",
        "arch": extractor.arch,
        "class_ids": bank.class_ids,
        "status": {str(c): s for c, s in bank.status.items()},
        **(extra or {}),
    }
    arrays = {name: p.data for name, p in extractor.params.items()}
    arrays["proxies"] = bank.theta.data
    save_checkpoint(path, header, arrays)


def load_model(path) -> tuple[FeatureExtractor, ProxyBank, dict]:
    header, arrays = load_checkpoint(path)
    proxies = arrays.pop("proxies")
    extractor = FeatureExtractor(header["arch"], {k: parameter(v) for k, v in arrays.items()})
    status = {int(c): s for c, s in header["status"].items()}
    bank = ProxyBank(list(header["class_ids"]), parameter(proxies), status)
    return extractor, bank, header
