"""Stream evaluation: per-step accuracy, run summaries, and file output.

The protocol measures micro-averaged top-k accuracy over the test sets of
all classes seen so far, once after every phase. A run condenses to its
per-step curve plus two scalars: the average over steps and the final
step. Multi-seed aggregation reports mean and population standard
deviation (ddof 0) per method.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .datasets import Sample, payload_matrix

__all__ = [
    "RunMetrics",
    "SeedAggregate",
    "top_k_hits",
    "evaluate_step",
    "class_accuracies",
    "aggregate_seeds",
    "write_metrics_csv",
    "read_metrics_csv",
    "write_metrics_json",
    "write_curve_files",
]


def top_k_hits(scores: np.ndarray, target_columns: np.ndarray, k: int) -> np.ndarray:
    """Boolean hit per row: does the target column rank among the top k?

    Ranking sorts scores descending with ties resolved toward the lower
    column index, so a tied target at the cut never benefits from chance.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError(f"scores must be 2-D, got shape {scores.shape}")
    if not 1 <= k <= scores.shape[1]:
        raise ValueError(f"k must be in [1, {scores.shape[1]}], got {k}")
    target_columns = np.asarray(target_columns, dtype=np.intp)
    if target_columns.shape != (scores.shape[0],):
        raise ValueError("one target column per row required")
    ranked = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return (ranked == target_columns[:, None]).any(axis=1)


def evaluate_step(
    scorer: Callable[[np.ndarray], np.ndarray],
    test_sets: Mapping[int, Sequence[Sample]],
    seen_classes: Sequence[int],
    *,
    top_k: int = 1,
) -> float:
    """Micro top-k accuracy over the pooled test sets of ``seen_classes``.

    ``scorer`` maps a payload matrix to one score column per seen class,
    in ``seen_classes`` order.
    """
    if not seen_classes:
        raise ValueError("seen_classes is empty")
    column = {int(c): i for i, c in enumerate(seen_classes)}
    if len(column) != len(seen_classes):
        raise ValueError("seen_classes contains duplicates")
    pooled: list[Sample] = []
    targets: list[int] = []
    for c in seen_classes:
        for s in test_sets.get(int(c), ()):
            pooled.append(s)
            targets.append(column[int(c)])
    if not pooled:
        raise ValueError("no test samples available for the seen classes")
    scores = np.asarray(scorer(payload_matrix(pooled)), dtype=np.float64)
    if scores.shape != (len(pooled), len(seen_classes)):
        raise ValueError(
            f"scorer returned shape {scores.shape}, "
            f"expected {(len(pooled), len(seen_classes))}"
        )
    hits = top_k_hits(scores, np.array(targets, dtype=np.intp), top_k)
    return float(hits.mean())


def class_accuracies(
    scorer: Callable[[np.ndarray], np.ndarray],
    test_sets: Mapping[int, Sequence[Sample]],
    seen_classes: Sequence[int],
    *,
    top_k: int = 1,
) -> dict[int, float]:
    """Per-class top-k accuracy, for diagnosing which classes were forgotten."""
    out: dict[int, float] = {}
    for c in seen_classes:
        if test_sets.get(int(c)):
            out[int(c)] = evaluate_step(
                scorer, {int(c): test_sets[int(c)]}, seen_classes, top_k=top_k
            )
    return out


@dataclass(frozen=True)
class RunMetrics:
    """One method, one seed: the accuracy curve and its two summary scalars."""

    method: str
    seed: int
    top_k: int
    step_accuracy: tuple[float, ...]
    average_accuracy: float
    final_accuracy: float

    @classmethod
    def from_steps(cls, method: str, seed: int, top_k: int,
                   step_accuracy: Sequence[float]) -> "RunMetrics":
        curve = tuple(float(a) for a in step_accuracy)
        if not curve:
            raise ValueError("a run needs at least one evaluation step")
        if not all(0.0 <= a <= 1.0 for a in curve):
            raise ValueError("accuracies must lie in [0, 1]")
        return cls(method=method, seed=int(seed), top_k=int(top_k),
                   step_accuracy=curve,
                   average_accuracy=float(np.mean(curve)),
                   final_accuracy=curve[-1])


@dataclass(frozen=True)
class SeedAggregate:
    """Mean and population std of a method's runs across seeds."""

    method: str
    seeds: tuple[int, ...]
    curve_mean: tuple[float, ...]
    curve_std: tuple[float, ...]
    average_mean: float
    average_std: float
    final_mean: float
    final_std: float


def aggregate_seeds(runs: Sequence[RunMetrics]) -> dict[str, SeedAggregate]:
    """Group runs by method; curves within a method must agree in length."""
    by_method: dict[str, list[RunMetrics]] = {}
    for r in runs:
        by_method.setdefault(r.method, []).append(r)
    out: dict[str, SeedAggregate] = {}
    for method, group in by_method.items():
        lengths = {len(r.step_accuracy) for r in group}
        if len(lengths) != 1:
            raise ValueError(f"method {method!r} has runs of differing lengths {sorted(lengths)}")
        seeds = tuple(r.seed for r in group)
        if len(set(seeds)) != len(seeds):
            raise ValueError(f"method {method!r} has duplicate seeds")
        curves = np.array([r.step_accuracy for r in group])
        averages = np.array([r.average_accuracy for r in group])
        finals = np.array([r.final_accuracy for r in group])
        out[method] = SeedAggregate(
            method=method,
            seeds=seeds,
            curve_mean=tuple(curves.mean(axis=0)),
            curve_std=tuple(curves.std(axis=0, ddof=0)),
            average_mean=float(averages.mean()),
            average_std=float(averages.std(ddof=0)),
            final_mean=float(finals.mean()),
            final_std=float(finals.std(ddof=0)),
        )
    return out


# -- file output --------------------------------------------------------

_CSV_HEADER = ("method", "seed", "step", "accuracy")


def write_metrics_csv(path, runs: Sequence[RunMetrics]) -> None:
    """One row per evaluation point: ``method,seed,step,accuracy``."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_HEADER)
        for r in runs:
            for step, acc in enumerate(r.step_accuracy):
                writer.writerow([r.method, r.seed, step, repr(acc)])


def read_metrics_csv(path) -> dict[tuple[str, int], list[float]]:
    """Inverse of :func:`write_metrics_csv`, keyed by (method, seed)."""
    path = Path(path)
    out: dict[tuple[str, int], list[float]] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != _CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(_CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            method, seed_s, step_s, acc_s = row
            try:
                seed, step, acc = int(seed_s), int(step_s), float(acc_s)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed row {row!r}") from None
            curve = out.setdefault((method, seed), [])
            if step != len(curve):
                raise ValueError(
                    f"{path}:{lineno}: step {step} out of order for ({method}, {seed})"
                )
            curve.append(acc)
    return out


def write_metrics_json(path, runs: Sequence[RunMetrics]) -> None:
    """Full structured dump: per-run curves plus per-method aggregates."""
    aggregates = aggregate_seeds(runs)
    doc = {
        "runs": [
            {
                "method": r.method,
                "seed": r.seed,
                "top_k": r.top_k,
                "step_accuracy": list(r.step_accuracy),
                "average_accuracy": r.average_accuracy,
                "final_accuracy": r.final_accuracy,
            }
            for r in runs
        ],
        "aggregates": {
            m: {
                "seeds": list(a.seeds),
                "curve_mean": list(a.curve_mean),
                "curve_std": list(a.curve_std),
                "average_mean": a.average_mean,
                "average_std": a.average_std,
                "final_mean": a.final_mean,
                "final_std": a.final_std,
            }
            for m, a in sorted(aggregates.items())
        },
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _curve_filename(method: str) -> str:
    slug = re.sub(r"[^A-Za-z0-9]+", "_", method).strip("_")
    return f"curve_{slug}.dat"


def write_curve_files(directory, runs: Sequence[RunMetrics]) -> list[Path]:
    """One whitespace-separated curve file per method for plotting.

    Columns: step index, mean accuracy, population std across seeds.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for method, agg in sorted(aggregate_seeds(runs).items()):
        path = directory / _curve_filename(method)
        lines = [f"# {method}: step mean std (seeds: {', '.join(map(str, agg.seeds))})"]
        for step, (m, s) in enumerate(zip(agg.curve_mean, agg.curve_std)):
            lines.append(f"{step} {m:.6f} {s:.6f}")
        path.write_text("\n".join(lines) + "\n")
        written.append(path)
    return written
