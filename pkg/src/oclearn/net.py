"""From-scratch classifier with a growable softmax head.

Parameters live in plain float64 arrays and gradients are derived by hand;
the test-suite checks them against central finite differences. Two shapes
are supported: a bare linear map and one ReLU hidden layer. The output
head can grow to admit new classes while existing rows stay bit-for-bit
identical; new rows start at zero.

Losses
------
* ``cross_entropy_loss``: softmax cross-entropy over the full head.
* ``distillation_loss``: cross-entropy between temperature-softened
  softmaxes restricted to the first ``n_old`` logits of teacher and
  student, ``-sum_i softmax(t/T)_i * log softmax(s/T)_i``. The gradient
  flows only through those first ``n_old`` student logits and is not
  rescaled by ``T^2``.
* ``cross_distillation_loss``: ``beta * distill + (1 - beta) * ce``.

All losses are averaged over the batch. Optimisation is plain SGD with
decoupled-by-name weight decay: ``w <- w - lr * (g + wd * w)``, with decay
skipped for biases.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import check_feature_matrix, check_positive_int

__all__ = [
    "LossConfig",
    "GrowableNet",
    "distillation_loss",
    "cross_entropy_loss",
    "cross_distillation_loss",
    "sgd_step",
    "train_batch",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class LossConfig:
    """Hyper-parameters of the combined training loss and optimiser."""

    temperature: float = 2.0
    beta: float = 0.5
    learning_rate: float = 0.1
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.temperature <= 1.0:
            raise ValueError(f"temperature must exceed 1, got {self.temperature}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.learning_rate <= 0.0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0.0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")


def _as_logit_matrix(logits, name: str) -> np.ndarray:
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be a logit row or matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softened_probs(logits, n_old: int, temperature: float) -> np.ndarray:
    """Softmax of ``logits[:, :n_old] / temperature``, rows summing to 1."""
    z = _as_logit_matrix(logits, "logits")
    check_positive_int(n_old, "n_old")
    if n_old > z.shape[1]:
        raise ValueError(f"n_old = {n_old} exceeds logit width {z.shape[1]}")
    return np.exp(_log_softmax(z[:, :n_old] / float(temperature)))


def distillation_loss(student_logits, teacher_logits, n_old: int, temperature: float = 2.0) -> float:
    """Soft cross-entropy between teacher and student over the old classes."""
    student = _as_logit_matrix(student_logits, "student_logits")
    teacher = _as_logit_matrix(teacher_logits, "teacher_logits")
    check_positive_int(n_old, "n_old")
    if teacher.shape[0] != student.shape[0]:
        raise ValueError("student and teacher batch sizes differ")
    if n_old > teacher.shape[1] or n_old > student.shape[1]:
        raise ValueError(
            f"n_old = {n_old} exceeds logit widths "
            f"{teacher.shape[1]} (teacher) / {student.shape[1]} (student)"
        )
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    t = float(temperature)
    p_teacher = softened_probs(teacher, n_old, t)
    log_p_student = _log_softmax(student[:, :n_old] / t)
    return float(-(p_teacher * log_p_student).sum(axis=1).mean())


def cross_entropy_loss(logits, labels) -> float:
    """Mean softmax cross-entropy over the full head."""
    z = _as_logit_matrix(logits, "logits")
    y = np.asarray(labels, dtype=np.intp).reshape(-1)
    if y.shape[0] != z.shape[0]:
        raise ValueError(f"got {y.shape[0]} labels for {z.shape[0]} logit rows")
    if y.size and (y.min() < 0 or y.max() >= z.shape[1]):
        raise ValueError(f"labels must lie in [0, {z.shape[1]}), got range "
                         f"[{y.min()}, {y.max()}]")
    log_p = _log_softmax(z)
    return float(-log_p[np.arange(z.shape[0]), y].mean())


def cross_distillation_loss(student_logits, teacher_logits, labels, n_old: int,
                            cfg: LossConfig) -> float:
    """Convex combination ``beta * distill + (1 - beta) * ce``."""
    ld = distillation_loss(student_logits, teacher_logits, n_old, cfg.temperature)
    lc = cross_entropy_loss(student_logits, labels)
    return cfg.beta * ld + (1.0 - cfg.beta) * lc


def _loss_and_logit_grad(
    logits: np.ndarray,
    labels: np.ndarray,
    cfg: LossConfig,
    teacher_logits: np.ndarray | None,
    n_old: int,
) -> tuple[float, np.ndarray]:
    """Batch-mean loss and its gradient w.r.t. the student logits.

    With a teacher this is the combined loss; without one it is plain
    cross-entropy.
    """
    batch = logits.shape[0]
    grad = np.zeros_like(logits)
    log_p = _log_softmax(logits)
    p = np.exp(log_p)
    ce_rows = -log_p[np.arange(batch), labels]
    ce_grad = p.copy()
    ce_grad[np.arange(batch), labels] -= 1.0
    if teacher_logits is None:
        grad += ce_grad / batch
        return float(ce_rows.mean()), grad

    t = cfg.temperature
    p_teacher = softened_probs(teacher_logits, n_old, t)
    log_p_student = _log_softmax(logits[:, :n_old] / t)
    distill_rows = -(p_teacher * log_p_student).sum(axis=1)
    distill_grad = (np.exp(log_p_student) - p_teacher) / t
    grad[:, :n_old] += cfg.beta * distill_grad / batch
    grad += (1.0 - cfg.beta) * ce_grad / batch
    loss = cfg.beta * float(distill_rows.mean()) + (1.0 - cfg.beta) * float(ce_rows.mean())
    return loss, grad


class GrowableNet:
    """Linear or one-hidden-layer classifier over flat float64 parameters."""

    def __init__(self, params: dict[str, np.ndarray], input_dim: int,
                 hidden_dim: int | None, head_count: int, version: int = 0):
        self.params = params
        self.input_dim = int(input_dim)
        self.hidden_dim = None if hidden_dim is None else int(hidden_dim)
        self.head_count = int(head_count)
        self.version = int(version)

    @classmethod
    def create(cls, input_dim: int, head_count: int, hidden_dim: int | None = 64,
               seed: int = 0) -> "GrowableNet":
        """Fresh network; hidden weights get a seeded scaled-normal init and
        the head starts at zero."""
        check_positive_int(input_dim, "input_dim")
        check_positive_int(head_count, "head_count")
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        if hidden_dim is None:
            params["head_w"] = np.zeros((head_count, input_dim))
            params["head_b"] = np.zeros(head_count)
        else:
            check_positive_int(hidden_dim, "hidden_dim")
            params["hidden_w"] = rng.normal(0.0, np.sqrt(2.0 / input_dim),
                                            size=(hidden_dim, input_dim))
            params["hidden_b"] = np.zeros(hidden_dim)
            params["head_w"] = np.zeros((head_count, hidden_dim))
            params["head_b"] = np.zeros(head_count)
        return cls(params, input_dim, hidden_dim, head_count, version=0)

    # -- inference ------------------------------------------------------

    def _check_input(self, X) -> np.ndarray:
        return check_feature_matrix(X, n_features=self.input_dim, name="X")

    def features(self, X) -> np.ndarray:
        """Penultimate representation: hidden ReLU activations, or the
        input itself for the linear shape."""
        X = self._check_input(X)
        if self.hidden_dim is None:
            return X
        pre = X @ self.params["hidden_w"].T + self.params["hidden_b"]
        return np.maximum(pre, 0.0)

    def forward(self, X) -> np.ndarray:
        return self.features(X) @ self.params["head_w"].T + self.params["head_b"]

    def _forward_cached(self, X) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        X = self._check_input(X)
        cache: dict[str, np.ndarray] = {"X": X}
        if self.hidden_dim is None:
            h = X
        else:
            pre = X @ self.params["hidden_w"].T + self.params["hidden_b"]
            h = np.maximum(pre, 0.0)
            cache["pre"] = pre
        cache["h"] = h
        return h @ self.params["head_w"].T + self.params["head_b"], cache

    def _backward(self, cache: dict[str, np.ndarray], dlogits: np.ndarray) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {
            "head_w": dlogits.T @ cache["h"],
            "head_b": dlogits.sum(axis=0),
        }
        if self.hidden_dim is not None:
            dh = dlogits @ self.params["head_w"]
            dpre = dh * (cache["pre"] > 0.0)
            grads["hidden_w"] = dpre.T @ cache["X"]
            grads["hidden_b"] = dpre.sum(axis=0)
        return grads

    # -- structure ------------------------------------------------------

    def grow_head(self, new_classes: int) -> "GrowableNet":
        """Return a copy with ``new_classes`` extra zero-initialised output
        rows; existing rows are preserved exactly."""
        check_positive_int(new_classes, "new_classes")
        params = {k: v.copy() for k, v in self.params.items()}
        old_w, old_b = params["head_w"], params["head_b"]
        params["head_w"] = np.vstack([old_w, np.zeros((new_classes, old_w.shape[1]))])
        params["head_b"] = np.concatenate([old_b, np.zeros(new_classes)])
        return GrowableNet(params, self.input_dim, self.hidden_dim,
                           self.head_count + new_classes, version=self.version + 1)

    def copy(self) -> "GrowableNet":
        return GrowableNet({k: v.copy() for k, v in self.params.items()},
                           self.input_dim, self.hidden_dim, self.head_count,
                           version=self.version)

    def checksum(self) -> str:
        """Digest of all parameter bytes in a fixed order."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].tobytes())
        return h.hexdigest()


def sgd_step(net: GrowableNet, grads: dict[str, np.ndarray], cfg: LossConfig) -> GrowableNet:
    """In-place ``w <- w - lr * (g + wd * w)``; biases skip the decay."""
    for name, param in net.params.items():
        if name not in grads:
            raise ValueError(f"missing gradient for parameter {name!r}")
        g = grads[name]
        if g.shape != param.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {param.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if name.endswith("_b"):
            param -= cfg.learning_rate * g
        else:
            param -= cfg.learning_rate * (g + cfg.weight_decay * param)
    return net


def train_batch(net: GrowableNet, X, labels, cfg: LossConfig,
                teacher_logits=None, n_old: int | None = None) -> float:
    """One SGD step on a batch; combined loss when a teacher is given."""
    y = np.asarray(labels, dtype=np.intp).reshape(-1)
    logits, cache = net._forward_cached(X)
    if y.shape[0] != logits.shape[0]:
        raise ValueError(f"got {y.shape[0]} labels for {logits.shape[0]} rows")
    if y.size and (y.min() < 0 or y.max() >= net.head_count):
        raise ValueError(f"labels outside [0, {net.head_count})")
    teacher = None
    if teacher_logits is not None:
        teacher = _as_logit_matrix(teacher_logits, "teacher_logits")
        if n_old is None:
            n_old = teacher.shape[1]
        if n_old < 1 or n_old > net.head_count:
            raise ValueError(f"n_old = {n_old} invalid for head width {net.head_count}")
    loss, dlogits = _loss_and_logit_grad(logits, y, cfg, teacher, n_old or 0)
    grads = net._backward(cache, dlogits)
    sgd_step(net, grads, cfg)
    return loss


# -- checkpoints -------------------------------------------------------

_CHECKPOINT_PARAM_ORDER = ("hidden_w", "hidden_b", "head_w", "head_b")


def save_checkpoint(net: GrowableNet, basepath) -> tuple[Path, Path]:
    """Write ``<base>.bin`` (shape-prefixed little-endian float64 arrays)
    plus ``<base>.json`` describing the architecture."""
    base = Path(basepath)
    names = [n for n in _CHECKPOINT_PARAM_ORDER if n in net.params]
    blob = bytearray()
    for name in names:
        arr = np.ascontiguousarray(net.params[name], dtype="<f8")
        blob += np.array([arr.ndim], dtype="<u4").tobytes()
        blob += np.asarray(arr.shape, dtype="<u4").tobytes()
        blob += arr.tobytes()
    bin_path = base.parent / (base.name + ".bin")
    json_path = base.parent / (base.name + ".json")
    bin_path.write_bytes(bytes(blob))
    meta = {
        "format": "oclearn-net-v1",
        "input_dim": net.input_dim,
        "hidden_dim": net.hidden_dim,
        "head_count": net.head_count,
        "version": net.version,
        "params": names,
    }
    json_path.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return bin_path, json_path


def load_checkpoint(basepath) -> GrowableNet:
    """Bit-exact inverse of :func:`save_checkpoint`."""
    base = Path(basepath)
    meta = json.loads((base.parent / (base.name + ".json")).read_text())
    if meta.get("format") != "oclearn-net-v1":
        raise ValueError(f"{base}: unrecognised checkpoint format {meta.get('format')!r}")
    raw = (base.parent / (base.name + ".bin")).read_bytes()
    params: dict[str, np.ndarray] = {}
    offset = 0
    for name in meta["params"]:
        if offset + 4 > len(raw):
            raise ValueError(f"{base}: truncated checkpoint at parameter {name!r}")
        ndim = int(np.frombuffer(raw, dtype="<u4", count=1, offset=offset)[0])
        offset += 4
        shape = tuple(
            int(v) for v in np.frombuffer(raw, dtype="<u4", count=ndim, offset=offset)
        )
        offset += 4 * ndim
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        params[name] = data.reshape(shape).copy()
    if offset != len(raw):
        raise ValueError(f"{base}: {len(raw) - offset} trailing bytes in checkpoint")
    hidden = meta["hidden_dim"]
    return GrowableNet(params, meta["input_dim"], hidden, meta["head_count"],
                       version=meta["version"])
