"""The continual training loop: per-task training, ghost production, evaluation."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import GHOST_MODES, ExperimentConfig
from .data import (
    LabeledDataset,
    RehearsalMemory,
    Scenario,
    build_scenario,
    class_attribute_vector,
    load_mnist_idx,
    make_synthetic_attribute_dataset,
    rehearsal_update,
    stratified_split,
)
from .generator import GhostSet, Gmmn, fit_generator, fit_scaler, produce_ghosts
from .losses import less_forget_distill, nca_ghost_loss, pod_distill, svm_reg_loss, total_loss
from .model import (
    SEEN,
    UNSEEN,
    FeatureExtractor,
    ProxyBank,
    build_extractor,
    cosine_scores,
    empty_bank,
    extend_proxies,
    predict,
    save_model,
    snapshot,
)
from .optim import DivergenceError, clip_grad_norm, cosine_lr, make_optimizer
from .svm import SeparatorSet, train_separators

log = logging.getLogger(__name__)

MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


class GhostUnavailableError(RuntimeError):
    pass


# ----------------------------------------------------------------- reports
@dataclass
class AccuracyReport:
    task: int
    acc_all: float
    acc_seen: float
    acc_unseen: float | None
    per_class: dict[int, float]
    wallclock_s: float = 0.0


def continual_accuracy(reports) -> float:
    if not reports:
        raise ValueError("no reports")
    return float(np.mean([r.acc_all for r in reports]))


@dataclass
class MetricsLog:
    mode: str
    seed: int
    reports: list[AccuracyReport] = field(default_factory=list)

    @property
    def continual(self) -> float:
        return continual_accuracy(self.reports)

    @property
    def final(self) -> float:
        return self.reports[-1].acc_all

    @property
    def wallclock(self) -> list[float]:
        return [r.wallclock_s for r in self.reports]


def evaluate(extractor: FeatureExtractor, bank: ProxyBank, test: LabeledDataset,
             seen, task: int = 0, features: np.ndarray | None = None) -> AccuracyReport:
    """Score every proxy in the bank; aggregate over all, seen and unseen test samples."""
    if len(test) == 0:
        raise ValueError("empty test set")
    feats = extractor.features(test.samples) if features is None else features
    with ad.no_grad():
        pred = predict(cosine_scores(feats, bank), bank.class_ids)
    return report_from_predictions(pred, test.labels, seen, task)


def report_from_predictions(pred, labels, seen, task: int = 0) -> AccuracyReport:
    pred, labels = np.asarray(pred), np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty test set")
    hit = pred == labels
    seen_mask = np.isin(labels, list(seen))
    per_class = {int(c): float(hit[labels == c].mean()) for c in np.unique(labels)}
    acc_seen = float(hit[seen_mask].mean()) if seen_mask.any() else 0.0
    acc_unseen = float(hit[~seen_mask].mean()) if (~seen_mask).any() else None
    return AccuracyReport(task, float(hit.mean()), acc_seen, acc_unseen, per_class)


# -------------------------------------------------------------------- data
@dataclass
class DataBundle:
    train: LabeledDataset
    test: LabeledDataset
    val: LabeledDataset | None = None


def prepare_data(config: ExperimentConfig) -> DataBundle:
    """Deterministic in ``dataset.data_seed``; the run seed never touches the data."""
    dc = config.dataset
    rng = np.random.default_rng(dc.data_seed)
    if dc.kind == "mnist":
        root = Path(dc.path)
        missing = [f for f in MNIST_FILES if not (root / f).exists()]
        if missing:
            raise FileNotFoundError(f"missing MNIST files in {root}: {missing} (see scripts/fetch_mnist.py)")
        full, stats = load_mnist_idx(root / MNIST_FILES[0], root / MNIST_FILES[1])
        test, _ = load_mnist_idx(root / MNIST_FILES[2], root / MNIST_FILES[3], stats=stats, split="test")
    else:
        total = dc.train_per_class + dc.test_per_class
        ds = make_synthetic_attribute_dataset(dc.num_classes, dc.attr_dim, dc.input_dim, total,
                                              dc.noise_scale, rng)
        full, test = stratified_split(ds, dc.test_per_class / total, rng, names=("train", "test"))
    val = None
    frac = dc.val_fraction if dc.val_fraction is not None else (1 / 6 if dc.kind == "mnist" else 0.2)
    if frac > 0:
        full, val = stratified_split(full, frac, rng)
    if dc.limit_per_class is not None:
        keep = np.concatenate([np.flatnonzero(full.labels == c)[: dc.limit_per_class] for c in full.classes])
        full = full.subset(np.sort(keep))
    return DataBundle(full, test, val)


def _concat(parts) -> LabeledDataset:
    parts = [p for p in parts if p is not None and len(p)]
    return LabeledDataset(np.concatenate([p.samples for p in parts]),
                          np.concatenate([p.labels for p in parts]), split="train")


# ------------------------------------------------------------------- state
@dataclass
class State:
    extractor: FeatureExtractor
    bank: ProxyBank
    memory: RehearsalMemory
    rngs: dict[str, np.random.Generator]
    previous: FeatureExtractor | None = None
    ghosts: GhostSet | None = None
    separators: SeparatorSet | None = None
    generator: Gmmn | None = None
    last_fit_count: int = 0


class NullObserver:
    def on_task_start(self, t: int) -> None:
        pass


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "batches", "proxies", "memory", "generator", "ghosts", "svm", "finetune")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


def init_state(config: ExperimentConfig) -> State:
    rngs = _streams(config.seed)
    extractor = build_extractor(config.arch, rngs["init"])
    return State(extractor, empty_bank(extractor.out_dim),
                 RehearsalMemory(config.optimizer.memory_per_class), rngs)


# ---------------------------------------------------------------- training
def _distill_term(config: ExperimentConfig, previous: FeatureExtractor, x, feats, taps):
    with ad.no_grad():
        old_feats, old_taps = previous.forward(x)
    if config.losses.distill == "pod":
        return pod_distill([t.data for t in old_taps], taps, old_feats.data, feats,
                           flat_weight=config.losses.pod_flat)
    return less_forget_distill(old_feats.data, feats)


def _ghost_batch(ghost_x, ghost_y, size, rng):
    idx = rng.integers(0, len(ghost_x), size=size)
    return ghost_x[idx], ghost_y[idx]


def _train_main(state: State, config: ExperimentConfig, data: LabeledDataset, seen, ghost_classes,
                ghost_arrays, first_task: bool) -> None:
    oc, lc = config.optimizer, config.losses
    params = state.extractor.parameters() + [state.bank.theta]
    opt = make_optimizer(oc.kind, params, oc.lr, oc.momentum, oc.weight_decay)
    use_ghosts = ghost_arrays is not None
    use_svm = use_ghosts and lc.svm_reg
    rng = state.rngs["batches"]
    n = len(data)
    for epoch in range(oc.epochs):
        lr = cosine_lr(epoch, oc.epochs, oc.lr)
        order = rng.permutation(n)
        for start in range(0, n, oc.batch_size):
            idx = order[start:start + oc.batch_size]
            x, y = data.samples[idx], data.labels[idx]
            feats, taps = state.extractor.forward(x)
            scores = cosine_scores(feats, state.bank)
            cls = nca_ghost_loss(scores, y, lc.delta, seen, ghost_classes,
                                 classes=state.bank.class_ids, scale=lc.scale)
            if use_ghosts:
                gx, gy = _ghost_batch(*ghost_arrays, len(idx), rng)
                gscores = cosine_scores(Tensor(gx), state.bank)
                cls = cls + nca_ghost_loss(gscores, gy, lc.delta, seen, ghost_classes,
                                           classes=state.bank.class_ids, scale=lc.scale)
            parts = {"nca_ghost" if use_ghosts else "nca": cls}
            if not first_task and lc.distill != "none":
                parts["distill"] = _distill_term(config, state.previous, x, feats, taps)
            if use_svm:
                parts["svm"] = svm_reg_loss(feats, state.separators, lc.tau)
            loss = total_loss(parts, lc, ghost_mode=use_ghosts, first_task=first_task)
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            if oc.grad_clip is not None:
                clip_grad_norm(params, oc.grad_clip)
            opt.step(lr)


def _balanced_subset(data: LabeledDataset, per_class: int, rng) -> LabeledDataset:
    keep = []
    for c in data.classes:
        idx = np.flatnonzero(data.labels == c)
        if len(idx) > per_class:
            idx = np.sort(rng.choice(idx, size=per_class, replace=False))
        keep.append(idx)
    return data.subset(np.concatenate(keep))


def _finetune(state: State, config: ExperimentConfig, data: LabeledDataset, seen, ghost_classes,
              ghost_arrays) -> None:
    """Classifier-only pass on a class-balanced set with the extractor frozen."""
    oc, lc = config.optimizer, config.losses
    if oc.finetune_epochs == 0:
        return
    rng = state.rngs["finetune"]
    balanced = _balanced_subset(data, max(oc.memory_per_class, 1), rng)
    feats = state.extractor.features(balanced.samples)
    labels = balanced.labels
    opt = make_optimizer(oc.kind, [state.bank.theta], oc.finetune_lr, oc.momentum, 0.0)
    use_ghosts = ghost_arrays is not None
    n = len(labels)
    for epoch in range(oc.finetune_epochs):
        lr = cosine_lr(epoch, oc.finetune_epochs, oc.finetune_lr)
        order = rng.permutation(n)
        for start in range(0, n, oc.batch_size):
            idx = order[start:start + oc.batch_size]
            loss = nca_ghost_loss(cosine_scores(Tensor(feats[idx]), state.bank), labels[idx], lc.delta,
                                  seen, ghost_classes, classes=state.bank.class_ids, scale=lc.scale)
            if use_ghosts:
                gx, gy = _ghost_batch(*ghost_arrays, len(idx), rng)
                loss = loss + nca_ghost_loss(cosine_scores(Tensor(gx), state.bank), gy, lc.delta, seen,
                                             ghost_classes, classes=state.bank.class_ids, scale=lc.scale)
            opt.zero_grad()
            loss.backward()
            opt.step(lr)


# ------------------------------------------------------------------- ghosts
def _features_by_class(extractor: FeatureExtractor, data: LabeledDataset) -> dict[int, np.ndarray]:
    feats = extractor.features(data.samples)
    return {c: feats[data.labels == c] for c in data.classes}


def _produce_ghosts(state: State, config: ExperimentConfig, train: LabeledDataset,
                    seen_data: LabeledDataset, targets, t: int) -> GhostSet:
    """Ghost features for ``targets`` (classes unseen during the next task)."""
    by_class = _features_by_class(state.extractor, seen_data)
    gc = config.generator
    count = gc.count_per_class or max(len(f) for f in by_class.values())
    if config.ghost_source == "real-oracle":
        rng = state.rngs["ghosts"]
        future = train.select(targets, purpose="oracle")
        out = {}
        for c in targets:
            rows = future.samples[future.labels == c]
            if len(rows) > count:
                rows = rows[np.sort(rng.choice(len(rows), size=count, replace=False))]
            out[c] = state.extractor.features(rows)
        return GhostSet(out, task=t)
    attrs = {c: class_attribute_vector(train, c) for c in sorted(set(by_class) | set(targets))}
    all_feats = np.concatenate(list(by_class.values()))
    scaler = fit_scaler(all_feats)
    scaled = {c: scaler.apply(f) for c, f in by_class.items()}
    if state.generator is None:
        state.generator = Gmmn(len(next(iter(attrs.values()))), state.extractor.out_dim,
                               state.rngs["generator"], hidden=gc.hidden, noise_dim=gc.noise_dim)
    fit_generator(state.generator, scaled, attrs, gc.epochs, gc.lr, state.rngs["generator"],
                  bandwidths=config.losses.bandwidths, median_scaled=config.losses.median_scaled)
    state.last_fit_count = count
    return produce_ghosts(state.generator, scaler, targets, attrs, count, state.rngs["ghosts"], task=t)


def _attach_ghost_proxies(state: State, ghosts: GhostSet) -> None:
    fresh = [c for c in ghosts.classes if c not in state.bank.class_ids]
    if fresh:
        state.bank = extend_proxies(state.bank, fresh, state.rngs["proxies"], ghosts=ghosts, status=UNSEEN)
    state.bank.init_from_ghosts(ghosts)


# --------------------------------------------------------------------- task
def run_task(state: State, config: ExperimentConfig, scenario: Scenario, data: DataBundle, t: int,
             observer=None, on_evaluated=None) -> AccuracyReport:
    """One task of the ghost procedure; ``on_evaluated(state, t)`` sees the evaluated model."""
    observer = observer or NullObserver()
    observer.on_task_start(t)
    started = time.perf_counter()
    T = scenario.num_tasks
    new, seen = scenario.new(t), scenario.seen(t)
    ghost_mode = config.mode in GHOST_MODES

    fresh = [c for c in new if c not in state.bank.class_ids]
    if fresh:
        state.bank = extend_proxies(state.bank, fresh, state.rngs["proxies"], status=SEEN)
    state.bank.mark_seen(new)

    task_data = _concat([data.train.select(new, purpose="train"), state.memory.as_dataset()])
    ghost_arrays, ghost_classes = None, []
    if ghost_mode and 1 < t < T:
        if state.ghosts is None or len(state.ghosts) == 0:
            raise GhostUnavailableError(f"task {t} needs ghost features but none were produced")
        ghost_classes = [c for c in state.ghosts.classes if c not in seen]
        ghost_arrays = state.ghosts.arrays()
        if config.losses.svm_reg:
            prev_feats = state.previous.features(task_data.samples)
            gx, _ = ghost_arrays
            norm = lambda a: a / (np.linalg.norm(a, axis=1, keepdims=True) + 1e-12)
            normed = GhostSet({c: norm(f) for c, f in state.ghosts.features.items()}, task=t)
            state.separators = train_separators(norm(prev_feats), task_data.labels, normed,
                                                reg_C=config.svm.C, max_per_class=config.svm.max_per_class,
                                                epochs=config.svm.epochs, balance=config.svm.balance,
                                                rng=state.rngs["svm"], task=t)

    _train_main(state, config, task_data, seen, ghost_classes, ghost_arrays, first_task=(t == 1))
    if t < T:
        _finetune(state, config, task_data, seen, ghost_classes, ghost_arrays)

    report = evaluate(state.extractor, state.bank, data.test, seen, task=t)
    if on_evaluated is not None:
        on_evaluated(state, t)

    new_data = data.train.select(new, purpose="train")
    state.memory = rehearsal_update(state.memory, new_data, config.optimizer.memory_per_class,
                                    policy=config.optimizer.memory_policy,
                                    features=state.extractor.features(new_data.samples),
                                    rng=state.rngs["memory"])

    state.ghosts, state.separators = None, None
    if ghost_mode and t <= T - 2:
        targets = [c for g in scenario.groups[t + 1:] for c in g]
        old = state.memory.as_dataset().select(scenario.seen(t - 1)) if t > 1 else None
        seen_data = _concat([new_data, old])
        state.ghosts = _produce_ghosts(state, config, data.train, seen_data, targets, t)
        _attach_ghost_proxies(state, state.ghosts)

    state.previous = snapshot(state.extractor)
    report.wallclock_s = time.perf_counter() - started
    log.info("task %d/%d %s acc_all=%.4f acc_seen=%.4f", t, T, config.mode, report.acc_all, report.acc_seen)
    return report


def _run_joint(state: State, config: ExperimentConfig, data: DataBundle, observer) -> AccuracyReport:
    observer = observer or NullObserver()
    observer.on_task_start(1)
    started = time.perf_counter()
    classes = data.train.classes
    train = data.train.select(classes, purpose="oracle")
    state.bank = extend_proxies(state.bank, classes, state.rngs["proxies"], status=SEEN)
    _train_main(state, config, train, classes, [], None, first_task=True)
    report = evaluate(state.extractor, state.bank, data.test, classes, task=1)
    report.wallclock_s = time.perf_counter() - started
    return report


def run_experiment(config: ExperimentConfig, data: DataBundle | None = None, observer=None,
                   checkpoint_dir=None, state: State | None = None) -> MetricsLog:
    data = prepare_data(config) if data is None else data
    state = init_state(config) if state is None else state
    logbook = MetricsLog(config.mode, config.seed)
    if config.mode == "joint-oracle":
        logbook.reports.append(_run_joint(state, config, data, observer))
        _checkpoint(checkpoint_dir, state, config, 1)
        return logbook
    scenario = build_scenario(data.train.classes, config.scenario.sizes, config.scenario.order)
    save = None if checkpoint_dir is None else (lambda st, t: _checkpoint(checkpoint_dir, st, config, t))
    for t in range(1, scenario.num_tasks + 1):
        logbook.reports.append(run_task(state, config, scenario, data, t, observer, on_evaluated=save))
    return logbook


def _checkpoint(directory, state: State, config: ExperimentConfig, t: int) -> None:
    if directory is None:
        return
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_model(directory / f"task{t}.ckpt", state.extractor, state.bank,
               extra={"task": t, "mode": config.mode, "seed": config.seed})
