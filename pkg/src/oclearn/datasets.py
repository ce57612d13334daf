"""Samples, task schedules and stream partitions for class-incremental runs.

An experiment consumes an ordered stream of labelled samples, split into an
initial task followed by incremental steps that each introduce previously
unseen classes. Every training sample is delivered exactly once during its
task's learning phase; held-out test samples are set aside per class before
streaming. This module provides the immutable containers for that protocol
plus three sources of data:

* synthetic Gaussian-blob streams with controllable class imbalance and
  optional intra-class sub-clusters,
* feature CSV files (``label,f1,...,fd`` rows),
* raw IDX image files (the common big-endian magic/dimension header format).

Raster payloads are ``(H, W, C)`` float arrays scaled to ``[0, 1]``; vector
payloads are 1-D float arrays. No compressed image decoding is performed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from ._validation import as_generator, check_fraction, check_positive_int

__all__ = [
    "Sample",
    "TaskSchedule",
    "StreamPartition",
    "build_schedule",
    "generate_blob_stream",
    "ingest_feature_csv",
    "export_feature_csv",
    "ingest_idx_images",
    "payload_matrix",
]


@dataclass(frozen=True)
class Sample:
    """One labelled observation.

    Args:
        payload: 1-D feature vector or ``(H, W, C)`` raster with values
            in ``[0, 1]``.
        label: integer class id.
        arrival_index: position of the sample in the experiment stream;
            non-negative, unique among training samples.
    """

    payload: np.ndarray
    label: int
    arrival_index: int

    def __post_init__(self):
        payload = np.asarray(self.payload, dtype=np.float64)
        if payload.ndim not in (1, 3):
            raise ValueError(
                f"payload must be a 1-D vector or (H, W, C) raster, got shape {payload.shape}"
            )
        object.__setattr__(self, "payload", payload)
        object.__setattr__(self, "label", int(self.label))
        object.__setattr__(self, "arrival_index", int(self.arrival_index))
        if self.arrival_index < 0:
            raise ValueError("arrival_index must be non-negative")


@dataclass(frozen=True)
class TaskSchedule:
    """Class arrival order: an initial task plus incremental steps.

    ``steps[k]`` holds the classes introduced at incremental step ``k + 1``;
    phase 0 is the initial task. All class lists are disjoint.
    """

    initial_classes: tuple[int, ...]
    steps: tuple[tuple[int, ...], ...]
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "initial_classes", tuple(int(c) for c in self.initial_classes))
        object.__setattr__(self, "steps", tuple(tuple(int(c) for c in s) for s in self.steps))
        if not self.initial_classes:
            raise ValueError("schedule needs a non-empty initial task")
        if any(not s for s in self.steps):
            raise ValueError("schedule contains an empty incremental step")
        seen: set[int] = set()
        for group in (self.initial_classes, *self.steps):
            for c in group:
                if c in seen:
                    raise ValueError(f"class {c} appears twice in the schedule")
                seen.add(c)

    @property
    def num_phases(self) -> int:
        """Initial task plus incremental steps."""
        return 1 + len(self.steps)

    @property
    def all_classes(self) -> tuple[int, ...]:
        out: list[int] = list(self.initial_classes)
        for s in self.steps:
            out.extend(s)
        return tuple(out)

    def phase_classes(self, phase: int) -> tuple[int, ...]:
        """Classes introduced at ``phase`` (0 is the initial task)."""
        if not 0 <= phase < self.num_phases:
            raise ValueError(f"phase {phase} out of range [0, {self.num_phases})")
        return self.initial_classes if phase == 0 else self.steps[phase - 1]

    def classes_through(self, phase: int) -> tuple[int, ...]:
        """All classes seen once ``phase`` has completed, in arrival order."""
        out: list[int] = []
        for p in range(phase + 1):
            out.extend(self.phase_classes(p))
        return tuple(out)


def build_schedule(class_ids: Sequence[int], initial_count: int, step_size: int, seed: int) -> TaskSchedule:
    """Shuffle ``class_ids`` with ``seed`` and chunk them into a schedule.

    The first ``initial_count`` classes form the initial task; the rest are
    chunked into steps of ``step_size``, with any remainder forming a smaller
    final step. Requires enough classes for at least one full incremental
    step.
    """
    ids = [int(c) for c in class_ids]
    if len(set(ids)) != len(ids):
        raise ValueError("class_ids contains duplicates")
    check_positive_int(initial_count, "initial_count")
    check_positive_int(step_size, "step_size")
    if initial_count + step_size > len(ids):
        raise ValueError(
            f"schedule needs at least initial_count + step_size = "
            f"{initial_count + step_size} classes, got {len(ids)}"
        )
    rng = as_generator(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    initial = tuple(order[:initial_count])
    rest = order[initial_count:]
    steps = tuple(tuple(rest[i:i + step_size]) for i in range(0, len(rest), step_size))
    return TaskSchedule(initial_classes=initial, steps=steps, seed=int(seed))


@dataclass(frozen=True, eq=False)
class StreamPartition:
    """Per-task training streams plus held-out per-class test sets.

    ``task_streams[k]`` is the ordered sample sequence for phase ``k`` of
    ``schedule``. Train and test sets are disjoint; within a phase the
    classes of that phase are interleaved in seeded shuffled order and
    arrival indices run sequentially across the whole experiment.
    """

    schedule: TaskSchedule
    task_streams: tuple[tuple[Sample, ...], ...]
    test_sets: Mapping[int, tuple[Sample, ...]]

    def __post_init__(self):
        if len(self.task_streams) != self.schedule.num_phases:
            raise ValueError(
                f"got {len(self.task_streams)} task streams for "
                f"{self.schedule.num_phases} schedule phases"
            )
        for phase, stream in enumerate(self.task_streams):
            allowed = set(self.schedule.phase_classes(phase))
            for s in stream:
                if s.label not in allowed:
                    raise ValueError(
                        f"sample with label {s.label} appears in phase {phase} "
                        f"restricted to classes {sorted(allowed)}"
                    )

    @property
    def num_phases(self) -> int:
        return self.schedule.num_phases

    def task_stream(self, phase: int) -> tuple[Sample, ...]:
        """Single-pass training sequence for ``phase``."""
        if not 0 <= phase < self.num_phases:
            raise ValueError(f"phase {phase} out of range [0, {self.num_phases})")
        return self.task_streams[phase]

    def train_through(self, phase: int) -> list[Sample]:
        """All training samples of phases ``0..phase`` in stream order."""
        out: list[Sample] = []
        for p in range(phase + 1):
            out.extend(self.task_streams[p])
        return out

    @property
    def train_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for stream in self.task_streams:
            for s in stream:
                counts[s.label] = counts.get(s.label, 0) + 1
        return counts

    @property
    def num_samples(self) -> int:
        """Total training plus test samples."""
        return sum(len(t) for t in self.task_streams) + sum(
            len(v) for v in self.test_sets.values()
        )

    @classmethod
    def from_class_pools(
        cls,
        train_by_class: Mapping[int, Sequence[Sample]],
        test_by_class: Mapping[int, Sequence[Sample]],
        schedule: TaskSchedule,
        order_seed: int,
    ) -> "StreamPartition":
        """Arrange per-class pools under ``schedule``.

        Each phase's pool union is shuffled with a seed derived from
        ``order_seed`` and the phase index; arrival indices are rewritten to
        run sequentially over the concatenated stream.
        """
        available = set(train_by_class)
        wanted = set(schedule.all_classes)
        if wanted != available:
            raise ValueError(
                f"schedule classes {sorted(wanted)} do not match "
                f"data classes {sorted(available)}"
            )
        streams: list[tuple[Sample, ...]] = []
        cursor = 0
        for phase in range(schedule.num_phases):
            pool: list[Sample] = []
            for c in schedule.phase_classes(phase):
                pool.extend(train_by_class[c])
            rng = np.random.default_rng([int(order_seed) & 0xFFFFFFFF, phase])
            order = rng.permutation(len(pool))
            renumbered = []
            for idx in order:
                src = pool[idx]
                renumbered.append(Sample(src.payload, src.label, cursor))
                cursor += 1
            streams.append(tuple(renumbered))
        tests = {int(c): tuple(test_by_class.get(c, ())) for c in schedule.all_classes}
        return cls(schedule=schedule, task_streams=tuple(streams), test_sets=tests)

    def reschedule(self, schedule: TaskSchedule, order_seed: int) -> "StreamPartition":
        """Re-arrange the same train/test data under a different schedule."""
        train_by_class: dict[int, list[Sample]] = {}
        for stream in self.task_streams:
            for s in stream:
                train_by_class.setdefault(s.label, []).append(s)
        return StreamPartition.from_class_pools(
            train_by_class, self.test_sets, schedule, order_seed
        )


def _single_task_schedule(class_ids: Iterable[int], seed: int) -> TaskSchedule:
    return TaskSchedule(initial_classes=tuple(class_ids), steps=(), seed=int(seed))


def _split_class_pool(
    samples: list[Sample], test_fraction: float, rng: np.random.Generator
) -> tuple[list[Sample], list[Sample]]:
    # Shuffled split; a class keeps at least one training sample, and at
    # least one test sample whenever it has two or more samples and the
    # fraction is positive.
    n = len(samples)
    order = rng.permutation(n)
    shuffled = [samples[i] for i in order]
    if n < 2 or test_fraction == 0.0:
        return shuffled, []
    n_test = int(round(test_fraction * n))
    n_test = min(max(n_test, 1), n - 1)
    return shuffled[n_test:], shuffled[:n_test]


def _pools_to_partition(
    by_class: dict[int, list[Sample]],
    test_fraction: float,
    split_rng: np.random.Generator,
    schedule: TaskSchedule | None,
    order_seed: int,
) -> StreamPartition:
    train_by_class: dict[int, list[Sample]] = {}
    test_by_class: dict[int, list[Sample]] = {}
    for c in sorted(by_class):
        train, test = _split_class_pool(by_class[c], test_fraction, split_rng)
        train_by_class[c] = train
        test_by_class[c] = test
    if schedule is None:
        schedule = _single_task_schedule(sorted(by_class), order_seed)
    return StreamPartition.from_class_pools(train_by_class, test_by_class, schedule, order_seed)


def _separated_centers(
    count: int, dim: int, separation: float, rng: np.random.Generator
) -> np.ndarray:
    """Draw ``count`` points with pairwise distance >= ``separation``."""
    if dim == 1:
        line = separation * (np.arange(count, dtype=np.float64) - (count - 1) / 2.0)
        return line[rng.permutation(count)].reshape(count, 1)
    centers: list[np.ndarray] = []
    radius = max(separation, 1e-12)
    attempts = 0
    while len(centers) < count:
        direction = rng.normal(size=dim)
        norm = np.linalg.norm(direction)
        if norm == 0.0:
            continue
        candidate = radius * direction / norm
        if all(np.linalg.norm(candidate - c) >= separation for c in centers):
            centers.append(candidate)
            attempts = 0
            continue
        attempts += 1
        if attempts > 200:  # sphere too crowded, enlarge and keep going
            radius *= 1.5
            attempts = 0
    return np.stack(centers)


def _apportion(total: int, weights: np.ndarray) -> np.ndarray:
    """Split ``total`` into integer parts proportional to ``weights``.

    Largest-remainder rounding; remainder ties go to the lower index.
    """
    share = weights / weights.sum() * total
    parts = np.floor(share).astype(np.intp)
    leftover = total - int(parts.sum())
    order = np.argsort(-(share - parts), kind="stable")
    parts[order[:leftover]] += 1
    return parts


def generate_blob_stream(
    n_classes: int,
    dim: int,
    per_class_counts: Sequence[int],
    spread: float,
    seed: int,
    *,
    modes_per_class: int = 1,
    mode_weights: Sequence[float] | None = None,
    separation: float = 4.0,
    test_fraction: float = 0.2,
    schedule: TaskSchedule | None = None,
) -> StreamPartition:
    """Synthesize an isotropic Gaussian-blob stream.

    Args:
        n_classes: number of classes.
        dim: payload dimensionality.
        per_class_counts: total samples (train plus test) per class; every
            count must be at least 2 so both splits are non-empty.
        spread: per-mode standard deviation (0 collapses each mode to its
            mean).
        seed: governs mode placement, sampling, the split and stream order.
        modes_per_class: sub-cluster means per class, for intra-class
            variation.
        mode_weights: relative sample mass per mode (uniform when omitted);
            skewed weights make some modes rare within their class.
        separation: minimum pairwise distance between any two mode means.
        test_fraction: held-out fraction per class.
        schedule: optional arrival schedule; defaults to one task holding
            all classes.

    Returns:
        A StreamPartition honouring ``per_class_counts`` exactly.
    """
    check_positive_int(n_classes, "n_classes")
    check_positive_int(dim, "dim")
    check_positive_int(modes_per_class, "modes_per_class")
    check_fraction(test_fraction, "test_fraction", closed_right=False)
    if spread < 0:
        raise ValueError(f"spread must be non-negative, got {spread}")
    if separation <= 0:
        raise ValueError(f"separation must be positive, got {separation}")
    counts = [int(c) for c in per_class_counts]
    if len(counts) != n_classes:
        raise ValueError(
            f"per_class_counts has {len(counts)} entries for {n_classes} classes"
        )
    if any(c < 2 for c in counts):
        raise ValueError("every class needs at least 2 samples (1 train, 1 test)")
    if mode_weights is None:
        weights = np.ones(modes_per_class)
    else:
        weights = np.asarray(mode_weights, dtype=np.float64)
        if weights.shape != (modes_per_class,):
            raise ValueError(
                f"mode_weights needs {modes_per_class} entries, got shape {weights.shape}"
            )
        if not np.all(np.isfinite(weights)) or np.any(weights <= 0):
            raise ValueError("mode_weights must be finite and positive")

    rng = as_generator(seed)
    centers = _separated_centers(n_classes * modes_per_class, dim, separation, rng)
    by_class: dict[int, list[Sample]] = {}
    for c in range(n_classes):
        mode_means = centers[c * modes_per_class:(c + 1) * modes_per_class]
        mode_of = np.repeat(np.arange(modes_per_class), _apportion(counts[c], weights))
        pool: list[Sample] = []
        for i in range(counts[c]):
            mean = mode_means[mode_of[i]]
            payload = mean + rng.normal(0.0, spread, size=dim)
            pool.append(Sample(payload, c, i))
        by_class[c] = pool
    return _pools_to_partition(by_class, test_fraction, rng, schedule, int(seed))


def payload_matrix(samples: Sequence[Sample]) -> np.ndarray:
    """Stack sample payloads into a float64 matrix, flattening rasters."""
    if not samples:
        raise ValueError("cannot build a payload matrix from zero samples")
    rows = [s.payload.reshape(-1) for s in samples]
    width = rows[0].shape[0]
    if any(r.shape[0] != width for r in rows):
        raise ValueError("samples have inconsistent payload sizes")
    return np.stack(rows).astype(np.float64, copy=False)


def ingest_feature_csv(
    path,
    *,
    test_fraction: float = 0.2,
    seed: int = 0,
    schedule: TaskSchedule | None = None,
) -> StreamPartition:
    """Read ``label,f1,...,fd`` rows into a stream partition.

    Rows must share one feature width and parse as numbers; violations
    raise ValueError naming the offending line.
    """
    check_fraction(test_fraction, "test_fraction", closed_right=False)
    text = Path(path).read_text()
    by_class: dict[int, list[Sample]] = {}
    width: int | None = None
    row = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) < 2:
            raise ValueError(f"{path}: line {lineno}: expected label and features")
        try:
            label = int(fields[0])
            values = [float(f) for f in fields[1:]]
        except ValueError as exc:
            raise ValueError(f"{path}: line {lineno}: {exc}") from None
        if width is None:
            width = len(values)
        elif len(values) != width:
            raise ValueError(
                f"{path}: line {lineno}: got {len(values)} features, expected {width}"
            )
        by_class.setdefault(label, []).append(Sample(np.array(values), label, row))
        row += 1
    if not by_class:
        raise ValueError(f"{path}: no data rows")
    rng = as_generator(seed)
    return _pools_to_partition(by_class, test_fraction, rng, schedule, int(seed))


def export_feature_csv(samples: Iterable[Sample], path) -> None:
    """Write vector samples as ``label,f1,...,fd`` rows (floats round-trip)."""
    lines = []
    for s in samples:
        if s.payload.ndim != 1:
            raise ValueError("only 1-D feature payloads can be exported to CSV")
        lines.append(",".join([str(s.label)] + [repr(float(v)) for v in s.payload]))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


_IDX_UBYTE = 0x08


def _read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    if raw[0] != 0 or raw[1] != 0:
        raise ValueError(f"{path}: bad IDX magic {raw[:4].hex()}")
    dtype_code, ndim = raw[2], raw[3]
    if dtype_code != _IDX_UBYTE:
        raise ValueError(f"{path}: unsupported IDX element type 0x{dtype_code:02x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ValueError(f"{path}: truncated IDX dimension header")
    dims = [int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    expected = header + int(np.prod(dims, dtype=np.int64))
    if len(raw) != expected:
        raise ValueError(
            f"{path}: payload has {len(raw) - header} bytes, expected {expected - header}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def ingest_idx_images(
    images_path,
    labels_path,
    *,
    test_fraction: float = 0.2,
    seed: int = 0,
    schedule: TaskSchedule | None = None,
) -> StreamPartition:
    """Read an IDX image file plus its IDX label file.

    Pixels are scaled to ``[0, 1]`` and shaped ``(H, W, 1)``. The image file
    must be rank 3 (count, rows, cols) and the label file rank 1 with a
    matching count.
    """
    check_fraction(test_fraction, "test_fraction", closed_right=False)
    images = _read_idx(images_path)
    labels = _read_idx(labels_path)
    if images.ndim != 3:
        raise ValueError(f"{images_path}: expected rank-3 image data, got rank {images.ndim}")
    if labels.ndim != 1:
        raise ValueError(f"{labels_path}: expected rank-1 label data, got rank {labels.ndim}")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"image count {images.shape[0]} does not match label count {labels.shape[0]}"
        )
    if images.shape[0] == 0:
        raise ValueError(f"{images_path}: no images")
    by_class: dict[int, list[Sample]] = {}
    for i in range(images.shape[0]):
        payload = images[i].astype(np.float64)[..., np.newaxis] / 255.0
        label = int(labels[i])
        by_class.setdefault(label, []).append(Sample(payload, label, i))
    rng = as_generator(seed)
    return _pools_to_partition(by_class, test_fraction, rng, schedule, int(seed))
