"""Shared fixtures.

The desk-scale fixture runs the full benchmark grid once per session; the
ordering, ablation, and budget tests all read from it so the expensive part
happens exactly once.
"""

import dataclasses
import time

import pytest
from hypothesis import HealthCheck, settings

from oclearn.experiment import ExperimentConfig, run_cell
from oclearn.metrics import aggregate_seeds

settings.register_profile(
    "suite",
    max_examples=50,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")

DESK_SEEDS = (0, 1, 2, 3, 4)

# Cells needed anywhere in the suite, keyed by per-class budget.
DESK_CELLS = {
    20: (
        "upper_bound",
        "finetune",
        "cluster_contrastive",
        "cluster_plain",
        "herding_contrastive",
        "herding_plain",
    ),
    10: ("cluster_contrastive", "herding_contrastive"),
    50: ("cluster_contrastive",),
}


@pytest.fixture(scope="session")
def desk_config():
    """The default benchmark stream configuration."""
    return ExperimentConfig()


@pytest.fixture(scope="session")
def desk_grid(desk_config):
    """Every (cell, budget) pair in DESK_CELLS over DESK_SEEDS.

    Returns a dict with per-run metrics, per-cell seed aggregates, and the
    wall-clock time the whole grid took.
    """
    runs = {}
    start = time.perf_counter()
    for budget, names in DESK_CELLS.items():
        cfg = dataclasses.replace(desk_config, memory_budget=budget)
        for name in names:
            runs[(name, budget)] = [run_cell(cfg, name, seed) for seed in DESK_SEEDS]
    elapsed = time.perf_counter() - start
    aggregates = {
        key: aggregate_seeds(cell_runs)[key[0]] for key, cell_runs in runs.items()
    }
    return {"runs": runs, "aggregates": aggregates, "elapsed": elapsed}
