"""Experiment orchestration: INI configs, method grids, result files.

A run is a grid of cells (method x seed) over one data source. Every cell
is deterministic given the config and its seed; the data geometry is fixed
by the data seed while each run seed draws its own class order, stream
order, model init and replay stream. Cell failures are isolated and
reported rather than aborting the grid.

Result directory layout::

    metrics.csv     method,seed,step,accuracy rows
    metrics.json    per-run curves plus per-method aggregates
    report.json     cell status table and the config fingerprint
    curves/         one plottable mean/std curve file per method
    checkpoints/    final model weights per cell

The memory budget is counted per class for the selection-based methods and
translated to a total capacity (budget x classes) for the fixed-capacity
ones, so a single budget knob compares like with like.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import AugmentPolicy
from .datasets import (
    StreamPartition,
    build_schedule,
    generate_blob_stream,
    ingest_feature_csv,
    ingest_idx_images,
)
from .learners import METHODS, ContinualClassifier
from .memory import PER_CLASS_POLICIES
from .metrics import (
    RunMetrics,
    aggregate_seeds,
    write_curve_files,
    write_metrics_csv,
    write_metrics_json,
)
from .net import save_checkpoint

__all__ = [
    "MethodSpec",
    "PRESETS",
    "ExperimentConfig",
    "ExperimentResult",
    "SweepResult",
    "load_config",
    "config_hash",
    "base_partition",
    "run_partition",
    "run_cell",
    "run_experiment",
    "run_budget_sweep",
    "format_sweep_table",
    "write_sweep_files",
]


@dataclass(frozen=True)
class MethodSpec:
    """Resolved method cell: learner family plus its ablation knobs."""

    method: str
    exemplar_policy: str = "cluster"
    balanced_batch: bool = True
    contrastive: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.method == "replay_distill" and self.exemplar_policy not in PER_CLASS_POLICIES:
            raise ValueError(
                f"exemplar_policy must be one of {sorted(PER_CLASS_POLICIES)}, "
                f"got {self.exemplar_policy!r}"
            )


# The contrastive cells pair fresh samples with exemplars and train on the
# augmented twin batch; the plain cells append a random number of
# exemplars and train on the raw batch.
PRESETS: dict[str, MethodSpec] = {
    "cluster_contrastive": MethodSpec("replay_distill", "cluster", True, True),
    "cluster_plain": MethodSpec("replay_distill", "cluster", False, False),
    "herding_contrastive": MethodSpec("replay_distill", "herding", True, True),
    "herding_plain": MethodSpec("replay_distill", "herding", False, False),
    "random_contrastive": MethodSpec("replay_distill", "random", True, True),
    "icarl_ncm": MethodSpec("icarl_ncm"),
    "er": MethodSpec("er"),
    "gdumb": MethodSpec("gdumb"),
    "finetune": MethodSpec("finetune"),
    "upper_bound": MethodSpec("upper_bound"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat, picklable snapshot of one experiment's settings."""

    # data
    data_kind: str = "blobs"
    n_classes: int = 10
    dim: int = 16
    min_count: int = 20
    max_count: int = 200
    spread: float = 1.0
    separation: float = 6.0
    modes_per_class: int = 2
    # Skewed mass makes the minor mode easy to lose under a tight budget,
    # which is what separates coverage-aware selection from mean-matching.
    mode_weights: tuple[float, ...] | None = (0.85, 0.15)
    test_fraction: float = 0.2
    data_seed: int = 7
    csv_path: str | None = None
    images_path: str | None = None
    labels_path: str | None = None
    # schedule
    initial_classes: int = 2
    step_size: int = 2
    # training
    batch_size: int = 32
    architecture: str = "mlp"
    hidden_dim: int = 64
    learning_rate: float = 0.1
    weight_decay: float = 1e-4
    temperature: float = 2.0
    beta: float = 0.5
    top_k: int = 1
    gdumb_passes: int = 1
    # memory
    memory_budget: int = 20
    # augment
    flip_probability: float = 0.5
    brightness_jitter: float = 0.4
    contrast_jitter: float = 0.4
    saturation_jitter: float = 0.4
    blur_probability: float = 0.5
    blur_sigma_min: float = 0.1
    blur_sigma_max: float = 2.0
    feature_noise_sigma: float = 0.1
    feature_scale_jitter: float = 0.0
    # run
    methods: tuple[str, ...] = ("cluster_contrastive", "finetune", "upper_bound")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    output: str | None = None
    custom_cells: tuple[tuple[str, MethodSpec], ...] = ()

    def augment_policy(self) -> AugmentPolicy:
        return AugmentPolicy(
            flip_probability=self.flip_probability,
            brightness_jitter=self.brightness_jitter,
            contrast_jitter=self.contrast_jitter,
            saturation_jitter=self.saturation_jitter,
            blur_probability=self.blur_probability,
            blur_sigma_range=(self.blur_sigma_min, self.blur_sigma_max),
            feature_noise_sigma=self.feature_noise_sigma,
            feature_scale_jitter=self.feature_scale_jitter,
        )

    def resolve_cell(self, name: str) -> MethodSpec:
        custom = dict(self.custom_cells)
        if name in custom:
            return custom[name]
        if name in PRESETS:
            return PRESETS[name]
        raise ValueError(
            f"unknown method cell {name!r}; presets: {', '.join(sorted(PRESETS))}"
            + (f"; custom cells: {', '.join(sorted(custom))}" if custom else "")
        )


# -- config parsing ------------------------------------------------------

_BOOL = {"true": True, "1": True, "yes": True, "on": True,
         "false": False, "0": False, "no": False, "off": False}

# section -> {key: (config field, parser)}
_SCHEMA: dict[str, dict[str, tuple[str, type]]] = {
    "data": {
        "kind": ("data_kind", str), "classes": ("n_classes", int), "dim": ("dim", int),
        "min_count": ("min_count", int), "max_count": ("max_count", int),
        "spread": ("spread", float), "separation": ("separation", float),
        "modes_per_class": ("modes_per_class", int),
        "mode_weights": ("mode_weights", None),
        "test_fraction": ("test_fraction", float), "seed": ("data_seed", int),
        "csv_path": ("csv_path", str), "images_path": ("images_path", str),
        "labels_path": ("labels_path", str),
    },
    "schedule": {
        "initial_classes": ("initial_classes", int), "step_size": ("step_size", int),
    },
    "training": {
        "batch_size": ("batch_size", int), "architecture": ("architecture", str),
        "hidden_dim": ("hidden_dim", int), "learning_rate": ("learning_rate", float),
        "weight_decay": ("weight_decay", float), "temperature": ("temperature", float),
        "beta": ("beta", float), "top_k": ("top_k", int),
        "gdumb_passes": ("gdumb_passes", int),
    },
    "memory": {"budget": ("memory_budget", int)},
    "augment": {
        "flip_probability": ("flip_probability", float),
        "brightness_jitter": ("brightness_jitter", float),
        "contrast_jitter": ("contrast_jitter", float),
        "saturation_jitter": ("saturation_jitter", float),
        "blur_probability": ("blur_probability", float),
        "blur_sigma_min": ("blur_sigma_min", float),
        "blur_sigma_max": ("blur_sigma_max", float),
        "feature_noise_sigma": ("feature_noise_sigma", float),
        "feature_scale_jitter": ("feature_scale_jitter", float),
    },
    "run": {"methods": ("methods", None), "seeds": ("seeds", None),
            "output": ("output", str)},
}

_CELL_KEYS = ("method", "exemplar_policy", "balanced_batch", "contrastive")


def _parse_bool(raw: str, where: str) -> bool:
    try:
        return _BOOL[raw.strip().lower()]
    except KeyError:
        raise ValueError(f"{where}: expected a boolean, got {raw!r}") from None


def _parse_list(raw: str, where: str) -> list[str]:
    items = [item.strip() for item in raw.split(",") if item.strip()]
    if not items:
        raise ValueError(f"{where}: expected a comma-separated list, got {raw!r}")
    return items


def load_config(path) -> ExperimentConfig:
    """Parse a strict INI experiment config; unknown keys are errors."""
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with path.open() as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ValueError(f"{path}: {exc}") from exc

    overrides: dict = {}
    cells: list[tuple[str, MethodSpec]] = []
    for section in parser.sections():
        if section.startswith("method."):
            name = section[len("method."):]
            if not name:
                raise ValueError(f"{path}: empty custom cell name in [{section}]")
            if name in PRESETS:
                raise ValueError(f"{path}: [{section}] shadows the preset {name!r}")
            raw = dict(parser.items(section))
            unknown = set(raw) - set(_CELL_KEYS)
            if unknown:
                raise ValueError(f"{path}: [{section}] has unknown keys {sorted(unknown)}")
            if "method" not in raw:
                raise ValueError(f"{path}: [{section}] needs a 'method' key")
            spec_kwargs: dict = {"method": raw["method"].strip()}
            if "exemplar_policy" in raw:
                spec_kwargs["exemplar_policy"] = raw["exemplar_policy"].strip()
            for key in ("balanced_batch", "contrastive"):
                if key in raw:
                    spec_kwargs[key] = _parse_bool(raw[key], f"{path}: [{section}] {key}")
            cells.append((name, MethodSpec(**spec_kwargs)))
            continue
        if section not in _SCHEMA:
            raise ValueError(f"{path}: unknown section [{section}]")
        schema = _SCHEMA[section]
        for key, raw_value in parser.items(section):
            if key not in schema:
                raise ValueError(f"{path}: [{section}] has no key {key!r}")
            field, caster = schema[key]
            where = f"{path}: [{section}] {key}"
            if field == "methods":
                overrides[field] = tuple(_parse_list(raw_value, where))
            elif field == "seeds":
                try:
                    overrides[field] = tuple(int(s) for s in _parse_list(raw_value, where))
                except ValueError:
                    raise ValueError(f"{where}: seeds must be integers, got {raw_value!r}") from None
            elif field == "mode_weights":
                try:
                    overrides[field] = tuple(float(w) for w in _parse_list(raw_value, where))
                except ValueError:
                    raise ValueError(f"{where}: weights must be numbers, got {raw_value!r}") from None
            else:
                try:
                    overrides[field] = caster(raw_value.strip())
                except ValueError:
                    raise ValueError(
                        f"{where}: cannot parse {raw_value!r} as {caster.__name__}"
                    ) from None
    if cells:
        overrides["custom_cells"] = tuple(cells)
    cfg = ExperimentConfig(**overrides)
    for name in cfg.methods:
        cfg.resolve_cell(name)
    return cfg


def config_hash(cfg: ExperimentConfig) -> str:
    """Twelve hex digits identifying the config's canonical JSON form."""
    doc = json.dumps(dataclasses.asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(doc.encode()).hexdigest()[:12]


# -- data ----------------------------------------------------------------

@lru_cache(maxsize=8)
def base_partition(cfg: ExperimentConfig) -> StreamPartition:
    """Single-task partition fixing the data and its train/test split.

    Cached per process; per-run schedules come from :func:`run_partition`.
    """
    if cfg.data_kind == "blobs":
        counts_rng = np.random.default_rng(cfg.data_seed)
        if cfg.min_count > cfg.max_count:
            raise ValueError(
                f"min_count {cfg.min_count} exceeds max_count {cfg.max_count}"
            )
        counts = [int(c) for c in
                  counts_rng.integers(cfg.min_count, cfg.max_count + 1, size=cfg.n_classes)]
        return generate_blob_stream(
            cfg.n_classes, cfg.dim, counts, cfg.spread, cfg.data_seed,
            modes_per_class=cfg.modes_per_class, mode_weights=cfg.mode_weights,
            separation=cfg.separation, test_fraction=cfg.test_fraction,
        )
    if cfg.data_kind == "csv":
        if cfg.csv_path is None:
            raise ValueError("data kind 'csv' needs csv_path")
        return ingest_feature_csv(cfg.csv_path, test_fraction=cfg.test_fraction,
                                  seed=cfg.data_seed)
    if cfg.data_kind == "idx":
        if cfg.images_path is None or cfg.labels_path is None:
            raise ValueError("data kind 'idx' needs images_path and labels_path")
        return ingest_idx_images(cfg.images_path, cfg.labels_path,
                                 test_fraction=cfg.test_fraction, seed=cfg.data_seed)
    raise ValueError(f"unknown data kind {cfg.data_kind!r}")


def run_partition(cfg: ExperimentConfig, run_seed: int) -> StreamPartition:
    """Fixed data re-dealt under this run seed's class and stream order."""
    base = base_partition(cfg)
    class_ids = sorted(base.test_sets)
    schedule = build_schedule(class_ids, cfg.initial_classes, cfg.step_size, seed=run_seed)
    return base.reschedule(schedule, order_seed=run_seed)


# -- cells ---------------------------------------------------------------

def _cell_classifier(cfg: ExperimentConfig, spec: MethodSpec, seed: int) -> ContinualClassifier:
    # Per-class quota for selection methods; equivalent total capacity for
    # the fixed-capacity ones.
    budget = cfg.memory_budget
    if spec.method in ("er", "gdumb"):
        budget = cfg.memory_budget * len(base_partition(cfg).test_sets)
    return ContinualClassifier(
        method=spec.method,
        exemplar_policy=spec.exemplar_policy,
        balanced_batch=spec.balanced_batch,
        contrastive=spec.contrastive,
        memory_size=budget,
        batch_size=cfg.batch_size,
        architecture=cfg.architecture,
        hidden_dim=cfg.hidden_dim,
        learning_rate=cfg.learning_rate,
        weight_decay=cfg.weight_decay,
        temperature=cfg.temperature,
        beta=cfg.beta,
        augment=cfg.augment_policy(),
        top_k=cfg.top_k,
        gdumb_passes=cfg.gdumb_passes,
        seed=seed,
    )


def run_cell(cfg: ExperimentConfig, name: str, seed: int,
             checkpoint_dir=None) -> RunMetrics:
    """Fit one method cell on one seed; optionally save its final weights."""
    spec = cfg.resolve_cell(name)
    clf = _cell_classifier(cfg, spec, seed)
    clf.fit(run_partition(cfg, seed))
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(clf.model_, checkpoint_dir / f"{name}.seed{seed}")
    return RunMetrics.from_steps(name, seed, cfg.top_k, clf.per_step_accuracy_)


def _cell_worker(cfg: ExperimentConfig, name: str, seed: int,
                 checkpoint_dir) -> tuple[str, int, RunMetrics | None, str | None]:
    try:
        return name, seed, run_cell(cfg, name, seed, checkpoint_dir), None
    except Exception:
        return name, seed, None, traceback.format_exc()


@dataclass(frozen=True)
class ExperimentResult:
    config_fingerprint: str
    runs: tuple[RunMetrics, ...]
    failures: tuple[tuple[str, int, str], ...]  # (cell, seed, traceback)

    @property
    def ok(self) -> bool:
        return not self.failures


def _execute_cells(cfg: ExperimentConfig, cells: Sequence[tuple[str, int]],
                   checkpoint_dir, jobs: int):
    if jobs <= 1:
        return [_cell_worker(cfg, name, seed, checkpoint_dir) for name, seed in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_cell_worker, cfg, name, seed, checkpoint_dir)
                   for name, seed in cells]
        return [f.result() for f in futures]


def run_experiment(cfg: ExperimentConfig, out_dir=None, *, jobs: int = 1) -> ExperimentResult:
    """Run the full method x seed grid and write the result files.

    Cells run independently; a failing cell is recorded in the report and
    excluded from the metric files without stopping its neighbours.
    """
    cells = [(name, seed) for name in cfg.methods for seed in cfg.seeds]
    if len(set(cells)) != len(cells):
        raise ValueError("duplicate cells: check the method and seed lists")
    out_path = Path(out_dir) if out_dir is not None else None
    checkpoint_dir = out_path / "checkpoints" if out_path is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    outcomes = _execute_cells(cfg, cells, checkpoint_dir, jobs)
    runs = tuple(m for _, _, m, _ in outcomes if m is not None)
    failures = tuple((name, seed, err) for name, seed, _, err in outcomes if err is not None)
    result = ExperimentResult(config_fingerprint=config_hash(cfg), runs=runs,
                              failures=failures)

    if out_path is not None:
        if runs:
            write_metrics_csv(out_path / "metrics.csv", runs)
            write_metrics_json(out_path / "metrics.json", runs)
            write_curve_files(out_path / "curves", runs)
        report = {
            "config_fingerprint": result.config_fingerprint,
            "config": dataclasses.asdict(cfg),
            "cells": [
                {
                    "cell": name, "seed": seed,
                    "status": "failed" if err is not None else "ok",
                    "average_accuracy": None if m is None else m.average_accuracy,
                    "final_accuracy": None if m is None else m.final_accuracy,
                    "error": err,
                }
                for name, seed, m, err in outcomes
            ],
        }
        (out_path / "report.json").write_text(
            json.dumps(report, indent=2, sort_keys=True, default=list) + "\n"
        )
    return result


# -- budget sweep --------------------------------------------------------

@dataclass(frozen=True)
class SweepResult:
    budgets: tuple[int, ...]
    # table[method][budget] -> {"average_mean": .., "average_std": ..,
    #                           "final_mean": .., "final_std": ..}
    table: dict
    failures: tuple[tuple[int, str, int, str], ...]  # (budget, cell, seed, traceback)

    @property
    def ok(self) -> bool:
        return not self.failures


def run_budget_sweep(cfg: ExperimentConfig, budgets: Sequence[int], *,
                     jobs: int = 1) -> SweepResult:
    """Rerun the method grid at several per-class memory budgets."""
    budgets = tuple(int(b) for b in budgets)
    if len(set(budgets)) != len(budgets) or not budgets:
        raise ValueError("budgets must be a non-empty list of distinct integers")
    table: dict = {name: {} for name in cfg.methods}
    failures: list[tuple[int, str, int, str]] = []
    for budget in budgets:
        sub = dataclasses.replace(cfg, memory_budget=budget)
        cells = [(name, seed) for name in cfg.methods for seed in cfg.seeds]
        outcomes = _execute_cells(sub, cells, None, jobs)
        runs = [m for _, _, m, _ in outcomes if m is not None]
        failures.extend((budget, name, seed, err)
                        for name, seed, _, err in outcomes if err is not None)
        for method, agg in aggregate_seeds(runs).items():
            table[method][budget] = {
                "average_mean": agg.average_mean, "average_std": agg.average_std,
                "final_mean": agg.final_mean, "final_std": agg.final_std,
            }
    return SweepResult(budgets=budgets, table=table, failures=tuple(failures))


def format_sweep_table(result: SweepResult) -> str:
    """Plain-text method x budget table of average/final accuracy."""
    header = ["method".ljust(24)] + [f"q={b}".rjust(17) for b in result.budgets]
    lines = ["".join(header)]
    for method in sorted(result.table):
        row = [method.ljust(24)]
        for b in result.budgets:
            cell = result.table[method].get(b)
            row.append("--".rjust(17) if cell is None else
                       f"{cell['average_mean']:.3f}/{cell['final_mean']:.3f}".rjust(17))
        lines.append("".join(row))
    return "\n".join(lines)


def write_sweep_files(result: SweepResult, out_dir) -> None:
    """Persist a sweep as JSON plus a flat CSV."""
    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    doc = {
        "budgets": list(result.budgets),
        "table": {m: {str(b): v for b, v in cols.items()}
                  for m, cols in result.table.items()},
        "failures": [
            {"budget": b, "cell": c, "seed": s, "error": e}
            for b, c, s, e in result.failures
        ],
    }
    (out_path / "sweep.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    rows = ["method,budget,average_mean,average_std,final_mean,final_std"]
    for method in sorted(result.table):
        for b in result.budgets:
            cell = result.table[method].get(b)
            if cell is not None:
                rows.append(f"{method},{b},{cell['average_mean']!r},{cell['average_std']!r},"
                            f"{cell['final_mean']!r},{cell['final_std']!r}")
    (out_path / "sweep.csv").write_text("\n".join(rows) + "\n")
