import itertools
from dataclasses import dataclass, field

import numpy as np
import pytest
from hypothesis import given, strategies as st

import ghostcl.engine as engine
from ghostcl.config import ConfigError
from ghostcl.data import LabeledDataset, build_scenario
from ghostcl.engine import (
    AccuracyReport,
    GhostUnavailableError,
    continual_accuracy,
    init_state,
    prepare_data,
    report_from_predictions,
    run_experiment,
    run_task,
)
from ghostcl.model import UNSEEN


# ------------------------------------------------------------------ evaluate
def test_perfect_predictor():
    labels = np.repeat(np.arange(10), 5)
    r = report_from_predictions(labels, labels, seen=range(6), task=1)
    assert (r.acc_all, r.acc_seen, r.acc_unseen) == (1.0, 1.0, 1.0)


def test_constant_predictor_is_chance():
    labels = np.repeat(np.arange(10), 7)
    r = report_from_predictions(np.zeros_like(labels), labels, seen=range(6))
    assert r.acc_all == pytest.approx(0.1)
    assert r.per_class[0] == 1.0 and r.per_class[3] == 0.0


def test_unseen_absent_at_last_task():
    labels = np.arange(10)
    assert report_from_predictions(labels, labels, seen=range(10)).acc_unseen is None


def test_empty_test_set():
    with pytest.raises(ValueError):
        report_from_predictions([], [], seen=[0])


def _rep(a):
    return AccuracyReport(0, a, a, None, {})


def test_continual_accuracy_examples():
    assert continual_accuracy([_rep(0.5), _rep(0.7)]) == pytest.approx(0.6)
    assert continual_accuracy([_rep(0.42)]) == 0.42
    with pytest.raises(ValueError):
        continual_accuracy([])


@given(st.lists(st.floats(0, 1), min_size=1, max_size=6), st.randoms())
def test_continual_accuracy_order_free(accs, rnd):
    shuffled = accs[:]
    rnd.shuffle(shuffled)
    a = continual_accuracy([_rep(x) for x in accs])
    b = continual_accuracy([_rep(x) for x in shuffled])
    assert a == pytest.approx(b, abs=1e-12)


# --------------------------------------------------------------------- audit
@dataclass
class AuditedDataset(LabeledDataset):
    """Records every class-selection together with the task running at the time."""

    journal: list = field(default_factory=list)
    clock: list = field(default_factory=lambda: [0])

    def select(self, classes, purpose="train"):
        self.journal.append((self.clock[0], tuple(int(c) for c in classes), purpose))
        return super().select(classes, purpose)


class Clock:
    def __init__(self, ds):
        self.ds = ds

    def on_task_start(self, t):
        self.ds.clock[0] = t


def audited_run(config):
    data = prepare_data(config)
    tr = data.train
    data.train = AuditedDataset(tr.samples, tr.labels, tr.attributes, tr.sample_attributes, tr.split, tr.index)
    log = run_experiment(config, data=data, observer=Clock(data.train))
    return data.train.journal, log


@pytest.mark.parametrize("mode", ["base", "ghost", "ghost-svm", "ghost-real"])
def test_no_future_samples_outside_oracle(tiny, mode):
    config = tiny(mode)
    journal, _ = audited_run(config)
    scenario = build_scenario(list(range(8)), config.scenario.sizes)
    assert journal
    for t, classes, purpose in journal:
        allowed = set(scenario.seen(t))
        if purpose == "oracle":
            assert mode == "ghost-real"
            # only ever for classes that are unseen during the next task
            assert set(classes) <= set(scenario.unseen(t + 1))
        else:
            assert set(classes) <= allowed, (t, classes)
    oracle_calls = [j for j in journal if j[2] == "oracle"]
    assert len(oracle_calls) == (1 if mode == "ghost-real" else 0)


def test_rehearsal_budget_after_every_task(tiny):
    config = tiny("ghost")
    data = prepare_data(config)
    state = init_state(config)
    scenario = build_scenario(data.train.classes, config.scenario.sizes)
    for t in range(1, scenario.num_tasks + 1):
        run_task(state, config, scenario, data, t)
        assert state.memory.classes == sorted(scenario.seen(t))
        for c in state.memory.classes:
            assert state.memory.count(c) <= config.optimizer.memory_per_class


# ------------------------------------------------------------ procedure shape
def spy_training(monkeypatch):
    calls = []
    original = engine._train_main

    def spy(state, config, data, seen, ghost_classes, ghost_arrays, first_task):
        calls.append({"seen": list(seen), "ghosts": list(ghost_classes),
                      "used": ghost_arrays is not None, "first": first_task})
        return original(state, config, data, seen, ghost_classes, ghost_arrays, first_task)

    monkeypatch.setattr(engine, "_train_main", spy)
    return calls


def test_ghosts_used_only_in_middle_task(tiny, monkeypatch):
    calls = spy_training(monkeypatch)
    run_experiment(tiny("ghost"))
    assert [c["used"] for c in calls] == [False, True, False]
    assert calls[1]["ghosts"] == [6, 7]
    assert [c["first"] for c in calls] == [True, False, False]


def test_six_task_split_uses_ghosts_between(tiny, monkeypatch):
    calls = spy_training(monkeypatch)
    run_experiment(tiny("ghost", scenario={"split": "3+1x5"}))
    assert [c["used"] for c in calls] == [False, True, True, True, True, False]
    assert calls[1]["ghosts"] == [4, 5, 6, 7]
    assert calls[4]["ghosts"] == [7]


def test_no_distillation_in_first_task(tiny, monkeypatch):
    tasks_with_distill = []
    original = engine._distill_term
    current = {"t": 0}

    class Obs:
        def on_task_start(self, t):
            current["t"] = t

    def spy(*args):
        tasks_with_distill.append(current["t"])
        return original(*args)

    monkeypatch.setattr(engine, "_distill_term", spy)
    run_experiment(tiny("base"), observer=Obs())
    assert 1 not in tasks_with_distill and {2, 3} <= set(tasks_with_distill)


def test_base_mode_never_touches_ghost_code(tiny, monkeypatch):
    def boom(*a, **k):
        raise AssertionError("ghost path executed in base mode")

    for name in ("fit_generator", "produce_ghosts", "train_separators", "svm_reg_loss",
                 "_produce_ghosts", "_attach_ghost_proxies", "Gmmn"):
        monkeypatch.setattr(engine, name, boom)
    log = run_experiment(tiny("base"))
    assert len(log.reports) == 3


def test_missing_ghosts_is_an_error(tiny):
    config = tiny("ghost")
    data = prepare_data(config)
    state = init_state(config)
    scenario = build_scenario(data.train.classes, config.scenario.sizes)
    with pytest.raises(GhostUnavailableError):
        run_task(state, config, scenario, data, 2)


def test_proxy_rows_stable_and_ghosts_become_seen(tiny):
    config = tiny("ghost")
    data = prepare_data(config)
    state = init_state(config)
    scenario = build_scenario(data.train.classes, config.scenario.sizes)
    history = []
    for t in (1, 2, 3):
        run_task(state, config, scenario, data, t)
        history.append((list(state.bank.class_ids), dict(state.bank.status)))
    ids1, st1 = history[0]
    assert ids1 == [0, 1, 2, 3, 6, 7] and st1[6] == UNSEEN
    for (a, _), (b, _) in itertools.pairwise(history):
        assert b[: len(a)] == a
    ids3, st3 = history[-1]
    assert sorted(ids3) == list(range(8)) and all(s != UNSEEN for s in st3.values())


def test_ghost_mode_needs_attributes():
    from ghostcl.config import config_from_dict
    with pytest.raises(ConfigError):
        config_from_dict({"mode": "ghost", "dataset": {"kind": "mnist"}})


def test_deterministic_given_seed(tiny):
    a = run_experiment(tiny("ghost-svm"))
    b = run_experiment(tiny("ghost-svm"))
    assert [r.acc_all for r in a.reports] == [r.acc_all for r in b.reports]
    c = run_experiment(tiny("ghost-svm", seed=2))
    assert len(c.reports) == 3


def test_joint_oracle_single_task(tiny):
    log = run_experiment(tiny("joint-oracle"))
    assert len(log.reports) == 1
    assert log.final == log.continual
    assert log.reports[0].acc_unseen is None


def test_metrics_log_aggregates(tiny):
    log = run_experiment(tiny("base"))
    assert log.continual == pytest.approx(np.mean([r.acc_all for r in log.reports]))
    assert log.final == log.reports[-1].acc_all
    for r in log.reports:
        assert 0 <= r.acc_all <= 1 and 0 <= r.acc_seen <= 1
        assert r.acc_unseen is None or 0 <= r.acc_unseen <= 1
    assert log.reports[-1].acc_unseen is None
    assert log.reports[0].acc_unseen == 0.0          # base mode has no proxies for future classes


def _extractor_after_task2(config):
    data = prepare_data(config)
    state = init_state(config)
    scenario = build_scenario(data.train.classes, config.scenario.sizes)
    for t in (1, 2):
        run_task(state, config, scenario, data, t)
    return np.concatenate([p.data.ravel() for p in state.extractor.parameters()])


def test_svm_regulariser_reaches_the_extractor(tiny):
    plain = _extractor_after_task2(tiny("ghost"))
    weak = _extractor_after_task2(tiny("ghost-svm"))
    strong = _extractor_after_task2(tiny("ghost-svm", losses={"lambda2": 10.0}))
    assert not np.array_equal(plain, weak)
    assert np.abs(plain - strong).max() > 100 * np.abs(plain - weak).max()
