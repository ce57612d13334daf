"""Exemplar stores and selection policies for replay-based learning.

Five ways to decide which samples survive in the replay buffer:

* ``cluster``: group a class's features into sub-clusters and keep the
  points nearest each cluster mean, so every sub-population of the class
  stays represented,
* ``herding``: greedily pick points whose running feature mean tracks the
  class mean,
* ``random``: uniform draw without replacement (ablation control),
* ``reservoir``: classic streaming reservoir over a global capacity,
* ``greedy_balanced``: store while under capacity, otherwise admit only
  classes below the current maximum class count, evicting from a largest
  class.

The first three work per class on a fixed budget of ``q`` exemplars per
class and run when a task finishes; the last two consume the stream one
sample at a time against a total capacity.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from ._validation import as_generator, check_feature_matrix, check_positive_int, l2_normalize_rows
from .cluster import ClusterAssignment, cluster_class
from .datasets import Sample

__all__ = [
    "ExemplarMemory",
    "select_cluster_exemplars",
    "select_herding_exemplars",
    "select_random_exemplars",
    "reservoir_update",
    "greedy_balanced_update",
    "draw_replay",
    "cluster_unit_features",
    "PER_CLASS_POLICIES",
    "CAPACITY_POLICIES",
]

PER_CLASS_POLICIES = frozenset({"cluster", "herding", "random"})
CAPACITY_POLICIES = frozenset({"reservoir", "greedy_balanced"})


def cluster_unit_features(features) -> ClusterAssignment:
    """Cluster rows after scaling them to unit norm.

    The default kernel bandwidth expects embedding-scale inputs; unit rows
    keep pairwise distances inside ``[0, 2]`` regardless of feature scale.
    """
    return cluster_class(l2_normalize_rows(check_feature_matrix(features, name="features")))


def _cluster_quotas(sizes: Sequence[int], q: int) -> list[int]:
    """Split a budget of ``q`` picks across clusters of the given sizes.

    Start from an even ``floor(q / n)`` share; clusters too small for their
    share contribute everything they have and the share is recomputed over
    the remaining clusters and budget until stable. Whatever is left is
    handed out one pick at a time in decreasing cluster-size order.
    """
    n = len(sizes)
    take = [0] * n
    active = list(range(n))
    budget = q
    while active and budget > 0:
        share = budget // len(active)
        if share == 0:
            break
        small = [i for i in active if sizes[i] < share]
        if small:
            for i in small:
                take[i] = sizes[i]
                budget -= sizes[i]
            active = [i for i in active if i not in small]
            continue
        for i in active:
            take[i] = share
        budget -= share * len(active)
        break
    order = sorted(range(n), key=lambda i: (-sizes[i], i))
    while budget > 0:
        progressed = False
        for i in order:
            if budget == 0:
                break
            if take[i] < sizes[i]:
                take[i] += 1
                budget -= 1
                progressed = True
        if not progressed:
            break
    return take


def select_cluster_exemplars(
    class_data: Sequence[Sample],
    features,
    q: int,
    *,
    clusterer: Callable[[np.ndarray], ClusterAssignment] | None = None,
) -> list[Sample]:
    """Keep the points nearest each sub-cluster mean, spread over a budget.

    ``features`` holds one row per sample in ``class_data``. The class is
    clustered (with ``cluster_class`` unless a custom callable is given),
    the budget is split across clusters, and within each cluster the picks
    are the points closest to that cluster's fixed mean, nearest first.
    Returns at most ``min(q, len(class_data))`` samples.
    """
    F = check_feature_matrix(features, name="features")
    if len(class_data) != F.shape[0]:
        raise ValueError(
            f"got {len(class_data)} samples but {F.shape[0]} feature rows"
        )
    check_positive_int(q, "q")
    assignment = (clusterer or cluster_class)(F)
    if sum(assignment.sizes) != F.shape[0]:
        raise ValueError("cluster assignment does not cover the feature rows")
    quotas = _cluster_quotas(assignment.sizes, q)
    picked: list[Sample] = []
    for members, quota in zip(assignment.clusters, quotas):
        if quota == 0:
            continue
        mean = F[members].mean(axis=0)
        dist = np.linalg.norm(F[members] - mean, axis=1)
        # the mean stays fixed, so greedy pick-and-remove reduces to a sort
        order = np.argsort(dist, kind="stable")[:quota]
        picked.extend(class_data[int(members[i])] for i in order)
    return picked


def select_herding_exemplars(class_data: Sequence[Sample], features, q: int) -> list[Sample]:
    """Greedy mean-matching selection.

    The ``k``-th pick minimises the distance between the class feature mean
    and the running mean of the picks so far plus the candidate. Ties break
    toward the lower index. Returns ``min(q, len(class_data))`` samples in
    pick order.
    """
    F = check_feature_matrix(features, name="features")
    if len(class_data) != F.shape[0]:
        raise ValueError(
            f"got {len(class_data)} samples but {F.shape[0]} feature rows"
        )
    check_positive_int(q, "q")
    mean = F.mean(axis=0)
    remaining = list(range(F.shape[0]))
    running = np.zeros_like(mean)
    picked: list[int] = []
    while remaining and len(picked) < q:
        k = len(picked) + 1
        candidates = (running + F[remaining]) / k
        dist = np.linalg.norm(mean - candidates, axis=1)
        best = int(np.argmin(dist))  # first minimum, i.e. lowest index
        idx = remaining.pop(best)
        running += F[idx]
        picked.append(idx)
    return [class_data[i] for i in picked]


def select_random_exemplars(class_data: Sequence[Sample], q: int, rng) -> list[Sample]:
    """Uniform draw of ``min(q, len(class_data))`` samples without replacement."""
    check_positive_int(q, "q")
    gen = as_generator(rng)
    count = min(q, len(class_data))
    chosen = gen.choice(len(class_data), size=count, replace=False)
    return [class_data[int(i)] for i in chosen]


def reservoir_update(memory: "ExemplarMemory", sample: Sample, rng) -> "ExemplarMemory":
    """Classic reservoir step over the global stream.

    Below capacity the sample is appended; afterwards it replaces a uniform
    slot with probability ``capacity / stream_counter``, leaving every
    stream position equally likely to be retained.
    """
    if memory.policy != "reservoir":
        raise ValueError(f"reservoir_update needs a reservoir memory, got {memory.policy!r}")
    gen = as_generator(rng)
    memory._stream_counter += 1
    slots = memory._slots
    if len(slots) < memory.budget:
        slots.append(sample)
        return memory
    j = int(gen.integers(0, memory._stream_counter))
    if j < memory.budget:
        slots[j] = sample
    return memory


def greedy_balanced_update(memory: "ExemplarMemory", sample: Sample) -> "ExemplarMemory":
    """Capacity-bound storage that keeps class counts as even as possible.

    Under capacity everything is stored. At capacity the sample is admitted
    only if its class count is below the current maximum, evicting a random
    sample from one of the largest classes; otherwise it is dropped.
    """
    if memory.policy != "greedy_balanced":
        raise ValueError(
            f"greedy_balanced_update needs a greedy_balanced memory, got {memory.policy!r}"
        )
    memory._stream_counter += 1
    slots = memory._slots
    if len(slots) < memory.budget:
        slots.append(sample)
        return memory
    counts: dict[int, int] = {}
    for s in slots:
        counts[s.label] = counts.get(s.label, 0) + 1
    top = max(counts.values())
    if counts.get(sample.label, 0) >= top:
        return memory
    rng = memory._rng
    largest = sorted(c for c, n in counts.items() if n == top)
    victim_class = largest[int(rng.integers(0, len(largest)))]
    victims = [i for i, s in enumerate(slots) if s.label == victim_class]
    slots.pop(victims[int(rng.integers(0, len(victims)))])
    slots.append(sample)
    return memory


def draw_replay(memory: "ExemplarMemory", count: int, rng) -> list[Sample]:
    """Draw ``count`` stored exemplars uniformly with replacement."""
    check_positive_int(count, "count")
    stored = memory.samples
    if not stored:
        raise ValueError("cannot draw replay samples from an empty memory")
    gen = as_generator(rng)
    idx = gen.integers(0, len(stored), size=count)
    return [stored[int(i)] for i in idx]


class ExemplarMemory:
    """Replay buffer with a pluggable retention policy.

    ``budget`` is exemplars per class for the per-class policies
    (``cluster``, ``herding``, ``random``) and total capacity for the
    streaming policies (``reservoir``, ``greedy_balanced``). Per-class
    policies refresh a class via :meth:`store_class` when its task ends;
    streaming policies consume samples one at a time via :meth:`observe`.
    """

    def __init__(self, policy: str = "cluster", budget: int = 20, *, seed: int = 0,
                 clusterer: Callable[[np.ndarray], ClusterAssignment] | None = None):
        if policy not in PER_CLASS_POLICIES | CAPACITY_POLICIES:
            raise ValueError(f"unknown policy {policy!r}")
        check_positive_int(budget, "budget")
        self.policy = policy
        self.budget = int(budget)
        self.clusterer = clusterer if clusterer is not None else cluster_unit_features
        self._rng = as_generator(seed)
        self._per_class: dict[int, list[Sample]] = {}
        self._slots: list[Sample] = []
        self._stream_counter = 0

    # -- state views ----------------------------------------------------

    @property
    def stream_counter(self) -> int:
        return self._stream_counter

    @property
    def samples(self) -> list[Sample]:
        """All stored exemplars in a stable order."""
        if self.policy in CAPACITY_POLICIES:
            return list(self._slots)
        out: list[Sample] = []
        for label in self._per_class:
            out.extend(self._per_class[label])
        return out

    @property
    def per_class(self) -> dict[int, list[Sample]]:
        if self.policy in CAPACITY_POLICIES:
            grouped: dict[int, list[Sample]] = {}
            for s in self._slots:
                grouped.setdefault(s.label, []).append(s)
            return grouped
        return {label: list(stored) for label, stored in self._per_class.items()}

    @property
    def class_counts(self) -> dict[int, int]:
        return {label: len(stored) for label, stored in self.per_class.items()}

    def __len__(self) -> int:
        if self.policy in CAPACITY_POLICIES:
            return len(self._slots)
        return sum(len(v) for v in self._per_class.values())

    # -- updates --------------------------------------------------------

    def store_class(self, label: int, class_data: Sequence[Sample], features) -> None:
        """Select and store exemplars for one class (per-class policies)."""
        if self.policy not in PER_CLASS_POLICIES:
            raise ValueError(f"store_class does not apply to policy {self.policy!r}")
        if not class_data:
            raise ValueError(f"no samples supplied for class {label}")
        if any(s.label != label for s in class_data):
            raise ValueError(f"class_data contains labels other than {label}")
        if self.policy == "cluster":
            picked = select_cluster_exemplars(
                class_data, features, self.budget, clusterer=self.clusterer
            )
        elif self.policy == "herding":
            picked = select_herding_exemplars(class_data, features, self.budget)
        else:
            picked = select_random_exemplars(class_data, self.budget, self._rng)
        self._per_class[int(label)] = picked

    def observe(self, sample: Sample) -> None:
        """Feed one stream sample through a streaming policy."""
        if self.policy == "reservoir":
            reservoir_update(self, sample, self._rng)
        elif self.policy == "greedy_balanced":
            greedy_balanced_update(self, sample)
        else:
            raise ValueError(f"observe does not apply to policy {self.policy!r}")

    def draw(self, count: int, rng) -> list[Sample]:
        return draw_replay(self, count, rng)

    # -- serialization --------------------------------------------------

    def to_payload_dict(self) -> dict[str, list]:
        """JSON-ready mapping of class id to stored payload lists."""
        return {
            str(label): [s.payload.tolist() for s in stored]
            for label, stored in sorted(self.per_class.items())
        }

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_payload_dict(), sort_keys=True))

    @staticmethod
    def load_payloads(path) -> dict[int, list[np.ndarray]]:
        """Read a saved exemplar document back as arrays per class."""
        doc = json.loads(Path(path).read_text())
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: expected a class-to-payloads object")
        return {
            int(label): [np.asarray(p, dtype=np.float64) for p in payloads]
            for label, payloads in doc.items()
        }
