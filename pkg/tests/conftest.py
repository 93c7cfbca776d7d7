from __future__ import annotations

import numpy as np
import pytest

from ufo import task_gen
from ufo.arch_space import SearchSpace
from ufo.supernet import SupernetConfig
from ufo.trainer import init_supernet


def tiny_spec(seed: int = 0, **over) -> task_gen.TaskSuiteSpec:
    d = dict(
        names=("a", "b", "c"),
        identities=(6, 6, 6),
        samples_per_identity=(8, 8, 8),
        relatedness=((1.0, 0.8, 0.0), (0.8, 1.0, 0.0), (0.0, 0.0, 1.0)),
        image_size=8,
        splits=(0.5, 0.25, 0.25),
        seed=seed,
    )
    d.update(over)
    return task_gen.TaskSuiteSpec(**d)


def tiny_model(data: task_gen.TaskDatasets, seed: int = 0, all_shared: bool = False):
    space = SearchSpace(
        heads=(2, 4), mlp_ratios=(1, 2), num_layers=2, num_tasks=len(data),
        embed_dim=16, head_dim=4, tokens=5, forced_keep_layers=frozenset({0}), patch_dim=16,
    )
    cfg = SupernetConfig(space, image_size=8, patch_size=4, feature_dim=8,
                         num_classes=tuple(t.num_classes for t in data.tasks), all_shared=all_shared)
    return init_supernet(cfg, seed)


@pytest.fixture(scope="session")
def tiny_data() -> task_gen.TaskDatasets:
    return task_gen.generate(tiny_spec())


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


# acceptance verdicts, echoed once at the end of the run
VERDICTS: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance")
    for n, ok, detail in sorted(VERDICTS):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
