import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ghostcl.config import config_from_dict  # noqa: E402


def tiny_raw(mode="base", **sections):
    """A seconds-scale synthetic run: 8 classes, 4+2+2 tasks."""
    raw = {
        "dataset": {"kind": "synthetic", "num_classes": 8, "attr_dim": 6, "input_dim": 12,
                    "train_per_class": 40, "test_per_class": 20, "noise_scale": 0.5},
        "scenario": {"split": "4+2+2"},
        "mode": mode,
        "losses": {"distill": "less-forget", "lambda1": 4.0},
        "optimizer": {"epochs": 3, "finetune_epochs": 2, "batch_size": 32, "lr": 0.05,
                      "memory_per_class": 5},
        "generator": {"epochs": 5, "lr": 1e-3, "hidden": [16, 16]},
        "svm": {"epochs": 50},
        "model": {"hidden": [16, 16], "out_dim": 4},
        "seed": 1,
    }
    for k, v in sections.items():
        raw[k] = {**raw.get(k, {}), **v} if isinstance(v, dict) else v
    return raw


@pytest.fixture
def tiny():
    def make(mode="base", **sections):
        return config_from_dict(tiny_raw(mode, **sections))
    return make


ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
