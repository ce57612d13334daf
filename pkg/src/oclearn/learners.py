"""Online class-incremental training loops and the estimator wrapping them.

Every method consumes each task's stream in a single pass, spending each
fresh sample on exactly one gradient update (stored exemplars are exempt
and may be replayed freely). A single softmax head covers all classes seen
so far and grows when a step introduces new ones.

Method family:

* ``replay_distill``: the replay/distillation learner. Fresh samples are
  buffered and paired with replayed exemplars, a frozen pre-step teacher
  scores the original batch, the student trains on an exemplar-augmented
  twin of that batch with a convex blend of distillation and
  cross-entropy. Exemplar policy, balanced pairing and the augmented twin
  are independently switchable for ablations.
* ``icarl_ncm``: herding exemplars, distillation with teacher and student
  on the identical batch, nearest-class-mean inference.
* ``er``: reservoir memory, mixed fresh/replay batches, plain
  cross-entropy.
* ``gdumb``: the stream only feeds a greedy class-balanced memory; a fresh
  model is trained from the memory at evaluation time.
* ``finetune``: plain cross-entropy on fresh data only (forgetting floor).
* ``upper_bound``: one shuffled pass over the union of all data seen so
  far at every step (replay ceiling).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from ._validation import check_feature_matrix, check_positive_int
from .augment import AugmentPolicy, make_contrastive_batch
from .datasets import Sample, StreamPartition, payload_matrix
from .memory import CAPACITY_POLICIES, PER_CLASS_POLICIES, ExemplarMemory
from .net import GrowableNet, LossConfig, train_batch
from . import metrics as _metrics

__all__ = [
    "StepContext",
    "TrainSettings",
    "RunAudit",
    "compose_balanced_batch",
    "run_initial_task",
    "run_distillation_step",
    "run_finetune_step",
    "run_upper_bound_step",
    "run_experience_replay_step",
    "run_gdumb_step",
    "train_memory_model",
    "ncm_scores",
    "predict_ncm",
    "ContinualClassifier",
]

METHODS = ("replay_distill", "icarl_ncm", "er", "gdumb", "finetune", "upper_bound")


@dataclass
class RunAudit:
    """Book-keeping proving the single-pass training constraint.

    ``consumed`` counts, per arrival index, how many gradient updates a
    fresh stream sample participated in; replayed exemplars are never
    tallied. ``loss_trace`` optionally collects per-batch losses.
    """

    consumed: Counter = field(default_factory=Counter)
    loss_trace: list[tuple[int, int, float]] | None = None
    phase: int = 0
    _batch_index: int = 0

    def start_phase(self, phase: int) -> None:
        self.phase = phase
        self._batch_index = 0

    def batch_trained(self, fresh: Sequence[Sample], loss: float) -> None:
        for s in fresh:
            self.consumed[s.arrival_index] += 1
        if self.loss_trace is not None:
            self.loss_trace.append((self.phase, self._batch_index, float(loss)))
        self._batch_index += 1


@dataclass
class TrainSettings:
    """Everything a step function needs besides the model and the stream."""

    batch_size: int
    loss: LossConfig
    augment: AugmentPolicy
    balanced_batch: bool
    contrastive: bool
    head_map: dict[int, int]
    replay_rng: np.random.Generator
    augment_rng: np.random.Generator
    shuffle_rng: np.random.Generator
    audit: RunAudit


@dataclass
class StepContext:
    """One incremental step: index, head split and frozen teacher."""

    step_index: int
    n_old: int
    n_new: int
    teacher: GrowableNet | None
    memory: ExemplarMemory | None

    def __post_init__(self):
        if self.step_index < 1:
            raise ValueError("incremental steps start at index 1")
        if self.n_old < 1 or self.n_new < 1:
            raise ValueError("an incremental step needs old and new classes")
        if self.teacher is not None and self.teacher.head_count != self.n_old:
            raise ValueError(
                f"teacher head width {self.teacher.head_count} does not match n_old {self.n_old}"
            )


def _buffers(stream: Sequence[Sample], size: int) -> Iterator[list[Sample]]:
    """Yield consecutive chunks; the trailing chunk may be smaller."""
    buf: list[Sample] = []
    for s in stream:
        buf.append(s)
        if len(buf) == size:
            yield buf
            buf = []
    if buf:
        yield buf


def _head_labels(samples: Sequence[Sample], head_map: dict[int, int]) -> np.ndarray:
    try:
        return np.array([head_map[s.label] for s in samples], dtype=np.intp)
    except KeyError as exc:
        raise ValueError(f"sample label {exc.args[0]} has no head assigned yet") from None


def compose_balanced_batch(
    new_buffer: Sequence[Sample],
    memory: ExemplarMemory,
    batch_size: int,
    rng,
) -> tuple[list[Sample], list[bool]]:
    """Pair each fresh sample with one replayed exemplar.

    Returns the interleaved batch ``[new_0, ex_0, new_1, ex_1, ...]`` and a
    mask flagging the exemplar positions. A trailing buffer shorter than
    ``batch_size / 2`` draws a matching smaller number of exemplars. With
    an empty memory the fresh buffer passes through with an all-False
    mask.
    """
    check_positive_int(batch_size, "batch_size")
    if batch_size % 2 != 0:
        raise ValueError(f"balanced batches need an even batch_size, got {batch_size}")
    if not new_buffer:
        raise ValueError("new_buffer is empty")
    if len(new_buffer) > batch_size // 2:
        raise ValueError(
            f"new_buffer holds {len(new_buffer)} samples, at most {batch_size // 2} allowed"
        )
    if len(memory) == 0:
        return list(new_buffer), [False] * len(new_buffer)
    replays = memory.draw(len(new_buffer), rng)
    batch: list[Sample] = []
    mask: list[bool] = []
    for fresh, replay in zip(new_buffer, replays):
        batch.extend((fresh, replay))
        mask.extend((False, True))
    return batch, mask


def run_initial_task(
    model: GrowableNet,
    stream: Sequence[Sample],
    settings: TrainSettings,
    observe_memory: ExemplarMemory | None = None,
) -> GrowableNet:
    """Single pure cross-entropy pass over the initial task.

    ``observe_memory`` lets streaming policies (reservoir) watch the pass;
    per-class exemplar selection happens after the pass, outside this
    function.
    """
    if not stream:
        raise ValueError("initial task stream is empty")
    for buffer in _buffers(stream, settings.batch_size):
        X = payload_matrix(buffer)
        y = _head_labels(buffer, settings.head_map)
        loss = train_batch(model, X, y, settings.loss)
        settings.audit.batch_trained(buffer, loss)
        if observe_memory is not None:
            for s in buffer:
                observe_memory.observe(s)
    return model


def run_distillation_step(
    model: GrowableNet,
    stream: Sequence[Sample],
    ctx: StepContext,
    settings: TrainSettings,
) -> GrowableNet:
    """One incremental step of the replay/distillation family.

    Fresh samples are buffered ``batch_size / 2`` at a time. Balanced mode
    pairs them one-to-one with replayed exemplars; otherwise a uniformly
    random number of exemplars (0 to ``batch_size / 2``) is appended. The
    teacher scores the unaugmented batch; the student trains on its
    contrastive twin (identical batch when ``contrastive`` is off) with
    the blended distillation/cross-entropy loss.
    """
    if not stream:
        raise ValueError(f"incremental step {ctx.step_index} received an empty stream")
    if ctx.memory is None:
        raise ValueError("the distillation family needs an exemplar memory")
    half = settings.batch_size // 2
    for buffer in _buffers(stream, half):
        if settings.balanced_batch:
            batch, mask = compose_balanced_batch(
                buffer, ctx.memory, settings.batch_size, settings.replay_rng
            )
        else:
            want = int(settings.replay_rng.integers(0, half + 1))
            replays = ctx.memory.draw(want, settings.replay_rng) if want and len(ctx.memory) else []
            batch = list(buffer) + replays
            mask = [False] * len(buffer) + [True] * len(replays)
        twin = (
            make_contrastive_batch(batch, mask, settings.augment, settings.augment_rng)
            if settings.contrastive
            else batch
        )
        teacher_logits = None
        if ctx.teacher is not None:
            teacher_logits = ctx.teacher.forward(payload_matrix(batch))
        X = payload_matrix(twin)
        y = _head_labels(twin, settings.head_map)
        loss = train_batch(model, X, y, settings.loss, teacher_logits, ctx.n_old)
        settings.audit.batch_trained(buffer, loss)
    return model


def run_finetune_step(
    model: GrowableNet,
    stream: Sequence[Sample],
    ctx: StepContext,
    settings: TrainSettings,
) -> GrowableNet:
    """Pure cross-entropy on fresh data only."""
    if not stream:
        raise ValueError(f"incremental step {ctx.step_index} received an empty stream")
    for buffer in _buffers(stream, settings.batch_size):
        X = payload_matrix(buffer)
        y = _head_labels(buffer, settings.head_map)
        loss = train_batch(model, X, y, settings.loss)
        settings.audit.batch_trained(buffer, loss)
    return model


def run_upper_bound_step(
    model: GrowableNet,
    seen_samples: Sequence[Sample],
    ctx: StepContext,
    settings: TrainSettings,
) -> GrowableNet:
    """One shuffled cross-entropy pass over everything seen so far."""
    if not seen_samples:
        raise ValueError("upper bound received no samples")
    order = settings.shuffle_rng.permutation(len(seen_samples))
    shuffled = [seen_samples[int(i)] for i in order]
    for buffer in _buffers(shuffled, settings.batch_size):
        X = payload_matrix(buffer)
        y = _head_labels(buffer, settings.head_map)
        loss = train_batch(model, X, y, settings.loss)
        settings.audit.batch_trained(buffer, loss)
    return model


def run_experience_replay_step(
    model: GrowableNet,
    stream: Sequence[Sample],
    ctx: StepContext,
    settings: TrainSettings,
) -> GrowableNet:
    """Mixed fresh/replay cross-entropy with per-sample reservoir updates."""
    if not stream:
        raise ValueError(f"incremental step {ctx.step_index} received an empty stream")
    if ctx.memory is None:
        raise ValueError("experience replay needs a reservoir memory")
    half = settings.batch_size // 2
    for buffer in _buffers(stream, half):
        replays = ctx.memory.draw(len(buffer), settings.replay_rng) if len(ctx.memory) else []
        batch = list(buffer) + replays
        X = payload_matrix(batch)
        y = _head_labels(batch, settings.head_map)
        loss = train_batch(model, X, y, settings.loss)
        settings.audit.batch_trained(buffer, loss)
        for s in buffer:
            ctx.memory.observe(s)
    return model


def run_gdumb_step(memory: ExemplarMemory, stream: Sequence[Sample]) -> ExemplarMemory:
    """Feed the stream into the greedy balanced memory; no model training."""
    if not stream:
        raise ValueError("received an empty stream")
    for s in stream:
        memory.observe(s)
    return memory


def train_memory_model(
    memory: ExemplarMemory,
    head_map: dict[int, int],
    input_dim: int,
    hidden_dim: int | None,
    loss_cfg: LossConfig,
    batch_size: int,
    passes: int,
    rng: np.random.Generator,
) -> GrowableNet:
    """Train a fresh model from scratch on the memory contents."""
    check_positive_int(passes, "passes")
    samples = memory.samples
    if not samples:
        raise ValueError("cannot train from an empty memory")
    init_seed = int(rng.integers(0, 2 ** 32))
    net = GrowableNet.create(input_dim, len(head_map), hidden_dim, seed=init_seed)
    for _ in range(passes):
        order = rng.permutation(len(samples))
        shuffled = [samples[int(i)] for i in order]
        for buffer in _buffers(shuffled, batch_size):
            X = payload_matrix(buffer)
            y = _head_labels(buffer, head_map)
            train_batch(net, X, y, loss_cfg)
    return net


def ncm_scores(
    model: GrowableNet,
    memory: ExemplarMemory,
    class_order: Sequence[int],
    X,
) -> np.ndarray:
    """Negative squared distances to per-class exemplar feature means."""
    per_class = memory.per_class
    means = []
    for c in class_order:
        stored = per_class.get(c)
        if not stored:
            raise ValueError(f"memory holds no exemplars for class {c}")
        means.append(model.features(payload_matrix(stored)).mean(axis=0))
    M = np.stack(means)
    F = model.features(check_feature_matrix(X, n_features=model.input_dim))
    d2 = ((F[:, None, :] - M[None, :, :]) ** 2).sum(axis=2)
    return -d2


def predict_ncm(model: GrowableNet, memory: ExemplarMemory, X) -> np.ndarray:
    """Nearest-class-mean labels over the classes stored in ``memory``."""
    class_order = sorted(memory.per_class)
    if not class_order:
        raise ValueError("memory is empty")
    scores = ncm_scores(model, memory, class_order, X)
    return np.array(class_order, dtype=np.intp)[np.argmax(scores, axis=1)]


class ContinualClassifier(BaseEstimator, ClassifierMixin):
    """Online class-incremental classifier over a task stream.

    Fitting consumes a :class:`~oclearn.datasets.StreamPartition` phase by
    phase, evaluating on the test sets of all seen classes after each
    phase. See the module docstring for the method family.

    Parameters
    ----------
    method : str, default="replay_distill"
        One of ``replay_distill``, ``icarl_ncm``, ``er``, ``gdumb``,
        ``finetune``, ``upper_bound``.
    exemplar_policy : str, default="cluster"
        Selection policy for ``replay_distill``: ``cluster``, ``herding``
        or ``random``. Other methods fix their own policy.
    balanced_batch : bool, default=True
        Pair fresh samples one-to-one with exemplars; when off, a random
        number of exemplars is appended instead (``replay_distill`` only).
    contrastive : bool, default=True
        Train the student on an exemplar-augmented twin batch
        (``replay_distill`` only).
    memory_size : int, default=20
        Exemplars per class (per-class policies) or total capacity
        (``er``/``gdumb``).
    batch_size : int, default=32
    architecture : str, default="mlp"
        ``mlp`` (one ReLU hidden layer) or ``linear``.
    hidden_dim : int, default=64
    learning_rate, weight_decay, temperature, beta : float
        Optimiser and loss settings; see :class:`~oclearn.net.LossConfig`.
    augment : AugmentPolicy or None
        Exemplar augmentation; None selects the default policy.
    top_k : int, default=1
        Prediction counts as correct when the true class scores among the
        top ``k``.
    gdumb_passes : int, default=1
        Passes over the memory when training the ``gdumb`` eval model.
    upper_bound_reset : bool, default=False
        Re-initialise the upper-bound model before each step's pass.
    record_trace : bool, default=False
        Collect per-batch losses into ``loss_trace_``.
    seed : int, default=0

    Attributes
    ----------
    classes_ : ndarray
        Class ids in head order.
    model_ : GrowableNet
        Final model (for ``gdumb``, the last memory-trained model).
    memory_ : ExemplarMemory or None
    per_step_accuracy_ : list of float
        Accuracy over all seen classes after each phase.
    metrics_ : RunMetrics
    step_records_ : list of dict
        Per-phase audit records including teacher checksums.
    consumed_ : Counter
        Gradient updates per fresh-sample arrival index.
    """

    def __init__(self, method="replay_distill", exemplar_policy="cluster",
                 balanced_batch=True, contrastive=True, memory_size=20,
                 batch_size=32, architecture="mlp", hidden_dim=64,
                 learning_rate=0.1, weight_decay=1e-4, temperature=2.0,
                 beta=0.5, augment=None, top_k=1, gdumb_passes=1,
                 upper_bound_reset=False, record_trace=False, seed=0):
        self.method = method
        self.exemplar_policy = exemplar_policy
        self.balanced_batch = balanced_batch
        self.contrastive = contrastive
        self.memory_size = memory_size
        self.batch_size = batch_size
        self.architecture = architecture
        self.hidden_dim = hidden_dim
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.temperature = temperature
        self.beta = beta
        self.augment = augment
        self.top_k = top_k
        self.gdumb_passes = gdumb_passes
        self.upper_bound_reset = upper_bound_reset
        self.record_trace = record_trace
        self.seed = seed

    # -- configuration --------------------------------------------------

    def _resolved_policy(self) -> str | None:
        return {
            "replay_distill": self.exemplar_policy,
            "icarl_ncm": "herding",
            "er": "reservoir",
            "gdumb": "greedy_balanced",
            "finetune": None,
            "upper_bound": None,
        }[self.method]

    def _validate_params(self) -> LossConfig:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.method == "replay_distill" and self.exemplar_policy not in PER_CLASS_POLICIES:
            raise ValueError(
                f"exemplar_policy must be one of {sorted(PER_CLASS_POLICIES)}, "
                f"got {self.exemplar_policy!r}"
            )
        check_positive_int(self.batch_size, "batch_size")
        pairing = self.method in ("er", "icarl_ncm") or (
            self.method == "replay_distill" and self.balanced_batch
        )
        if pairing and self.batch_size % 2 != 0:
            raise ValueError(f"paired batches need an even batch_size, got {self.batch_size}")
        check_positive_int(self.memory_size, "memory_size")
        check_positive_int(self.top_k, "top_k")
        check_positive_int(self.gdumb_passes, "gdumb_passes")
        if self.architecture not in ("mlp", "linear"):
            raise ValueError(f"architecture must be 'mlp' or 'linear', got {self.architecture!r}")
        if self.augment is not None and not isinstance(self.augment, AugmentPolicy):
            raise ValueError("augment must be an AugmentPolicy or None")
        return LossConfig(temperature=self.temperature, beta=self.beta,
                          learning_rate=self.learning_rate, weight_decay=self.weight_decay)

    def _method_tag(self) -> str:
        if self.method != "replay_distill":
            return self.method
        regime = "balanced" if self.balanced_batch else "random_pair"
        twin = "+contrastive" if self.contrastive else ""
        return f"replay_distill[{self.exemplar_policy},{regime}{twin}]"

    # -- fitting --------------------------------------------------------

    def fit(self, partition: StreamPartition, y=None) -> "ContinualClassifier":
        if not isinstance(partition, StreamPartition):
            raise ValueError("fit expects a StreamPartition")
        loss_cfg = self._validate_params()
        schedule = partition.schedule
        initial_stream = partition.task_stream(0)
        if not initial_stream:
            raise ValueError("initial task stream is empty")
        input_dim = int(initial_stream[0].payload.size)
        hidden = self.hidden_dim if self.architecture == "mlp" else None

        root = np.random.SeedSequence(self.seed)
        init_ss, replay_ss, augment_ss, memory_ss, shuffle_ss, scratch_ss = root.spawn(6)
        phase_rngs = [np.random.default_rng(s) for s in scratch_ss.spawn(schedule.num_phases)]

        policy = self._resolved_policy()
        memory = None
        if policy is not None:
            memory = ExemplarMemory(policy, self.memory_size,
                                    seed=np.random.default_rng(memory_ss))
        audit = RunAudit(loss_trace=[] if self.record_trace else None)
        settings = TrainSettings(
            batch_size=self.batch_size,
            loss=loss_cfg,
            augment=self.augment if self.augment is not None else AugmentPolicy(),
            balanced_batch=bool(self.balanced_batch),
            contrastive=bool(self.contrastive),
            head_map={},
            replay_rng=np.random.default_rng(replay_ss),
            augment_rng=np.random.default_rng(augment_ss),
            shuffle_rng=np.random.default_rng(shuffle_ss),
            audit=audit,
        )

        classes: list[int] = []
        model = GrowableNet.create(input_dim, len(schedule.initial_classes), hidden,
                                   seed=np.random.default_rng(init_ss))
        distill_family = self.method in ("replay_distill", "icarl_ncm")
        per_step: list[float] = []
        records: list[dict] = []
        eval_model = None

        for phase in range(schedule.num_phases):
            new_classes = schedule.phase_classes(phase)
            stream = partition.task_stream(phase)
            audit.start_phase(phase)
            record: dict = {"phase": phase, "new_classes": tuple(new_classes)}

            teacher = None
            if phase == 0:
                for c in new_classes:
                    settings.head_map[c] = len(classes)
                    classes.append(c)
                if self.method == "gdumb":
                    run_gdumb_step(memory, stream)
                else:
                    run_initial_task(model, stream, settings,
                                     observe_memory=memory if self.method == "er" else None)
            else:
                n_old = len(classes)
                if distill_family:
                    teacher = model.copy()
                    record["teacher_checksum_before"] = teacher.checksum()
                for c in new_classes:
                    settings.head_map[c] = len(classes)
                    classes.append(c)
                ctx = StepContext(step_index=phase, n_old=n_old,
                                  n_new=len(new_classes), teacher=teacher, memory=memory)
                if self.method == "gdumb":
                    run_gdumb_step(memory, stream)
                elif self.method == "upper_bound":
                    if self.upper_bound_reset:
                        model = GrowableNet.create(input_dim, len(classes), hidden,
                                                   seed=phase_rngs[phase])
                    else:
                        model = model.grow_head(len(new_classes))
                    run_upper_bound_step(model, partition.train_through(phase), ctx, settings)
                else:
                    model = model.grow_head(len(new_classes))
                    if self.method == "finetune":
                        run_finetune_step(model, stream, ctx, settings)
                    elif self.method == "er":
                        run_experience_replay_step(model, stream, ctx, settings)
                    else:
                        run_distillation_step(model, stream, ctx, settings)
                if teacher is not None:
                    record["teacher_checksum_after"] = teacher.checksum()

            if distill_family:
                self._store_step_exemplars(model, memory, stream, new_classes)

            if self.method == "gdumb":
                eval_model = train_memory_model(
                    memory, settings.head_map, input_dim, hidden, loss_cfg,
                    self.batch_size, self.gdumb_passes, phase_rngs[phase],
                )
                scorer = eval_model.forward
            elif self.method == "icarl_ncm":
                scorer = lambda X, m=model, mem=memory, cls=tuple(classes): ncm_scores(m, mem, cls, X)
            else:
                scorer = model.forward
            accuracy = _metrics.evaluate_step(
                scorer, partition.test_sets, classes, top_k=self.top_k
            )
            per_step.append(accuracy)
            record["accuracy"] = accuracy
            record["classes_seen"] = len(classes)
            records.append(record)

        self.classes_ = np.array(classes, dtype=np.intp)
        self.model_ = eval_model if self.method == "gdumb" else model
        self.memory_ = memory
        self.per_step_accuracy_ = per_step
        self.metrics_ = _metrics.RunMetrics.from_steps(
            self._method_tag(), int(self.seed), int(self.top_k), per_step
        )
        self.step_records_ = records
        self.consumed_ = audit.consumed
        self.loss_trace_ = audit.loss_trace
        self._head_map = dict(settings.head_map)
        return self

    def _store_step_exemplars(self, model, memory, stream, new_classes) -> None:
        for c in new_classes:
            class_samples = [s for s in stream if s.label == c]
            if not class_samples:
                raise ValueError(f"no stream samples for newly introduced class {c}")
            features = model.features(payload_matrix(class_samples))
            memory.store_class(c, class_samples, features)

    # -- inference ------------------------------------------------------

    def predict_scores(self, X) -> np.ndarray:
        """Per-class scores in ``classes_`` order (logits, or negative
        squared mean distances for ``icarl_ncm``)."""
        if not hasattr(self, "model_"):
            raise ValueError("this classifier is not fitted yet")
        if self.method == "icarl_ncm":
            return ncm_scores(self.model_, self.memory_, list(self.classes_), X)
        return self.model_.forward(X)

    def predict(self, X) -> np.ndarray:
        scores = self.predict_scores(X)
        return self.classes_[np.argmax(scores, axis=1)]
