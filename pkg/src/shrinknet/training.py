"""Supervised training, knowledge distillation and masked fine-tuning."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from . import ops
from .netlib.model import Model
from .optim import OptimizerState, optimizer_step
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 32
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2 (batch norm), got {self.batch_size}")
        if self.patience < 0:
            raise ValueError(f"patience must be >= 0, got {self.patience}")
        OptimizerState(kind=self.optimizer, lr=self.lr)

    def make_optimizer(self) -> OptimizerState:
        return OptimizerState(kind=self.optimizer, lr=self.lr, momentum=self.momentum)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class KDConfig(TrainConfig):
    """Training settings plus the distillation temperature and KD weight.

    ``lam`` is serialised as ``"lambda"``.
    """

    optimizer: str = "sgd_momentum"
    lr: float = 0.05
    tau: float = 4.0
    lam: float = 0.9

    def __post_init__(self):
        super().__post_init__()
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if not 0 <= self.lam <= 1:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "KDConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = "no_epochs"

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    @property
    def best_val_acc(self) -> Optional[float]:
        return max(self.val_acc) if self.val_acc else None

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "train_loss": list(self.train_loss),
            "val_acc": list(self.val_acc),
            "best_epoch": self.best_epoch,
            "stop_reason": self.stop_reason,
        }


# ----------------------------------------------------------------------- losses


def softened_probs(logits, tau: float) -> np.ndarray:
    """softmax(logits / tau) along the last axis."""
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kd_loss(student_logits: Tensor, teacher_logits, labels, tau: float = 4.0, lam: float = 0.9) -> Tensor:
    """(1 - lam) * CE(student, labels) + tau^2 * lam * mean KL(p_teacher || p_student).

    Both distributions are softened by ``tau``; teacher logits are constants.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    if not 0 <= lam <= 1:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if t.shape != student_logits.shape:
        raise ops.ShapeError(f"kd_loss: teacher logits {t.shape} vs student logits {student_logits.shape}")
    dtype = student_logits.dtype
    ce = ops.cross_entropy_with_softmax(student_logits, labels)
    p_teacher = Tensor(ops._softmax_np(t.astype(dtype) / dtype.type(tau)))
    p_student = ops.softmax(ops.mul(student_logits, Tensor(np.asarray(1.0 / tau, dtype=dtype))))
    kl = ops.kl_divergence(p_teacher, p_student)
    return ops.add(
        ops.mul(ce, Tensor(np.asarray(1.0 - lam, dtype=dtype))),
        ops.mul(kl, Tensor(np.asarray(tau * tau * lam, dtype=dtype))),
    )


# -------------------------------------------------------------------- helpers


def predict_logits(model: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    mode = model.mode
    model.eval()
    try:
        with no_grad():
            return np.concatenate([model.forward(x[i : i + batch_size]).data for i in range(0, len(x), batch_size)])
    finally:
        model.mode = mode


def accuracy(model: Model, data) -> float:
    x, y = data
    return float((predict_logits(model, x).argmax(axis=1) == y).mean())


def _validate_data(model: Model, data, what: str):
    if data is None:
        return None
    x, y = data
    x = np.asarray(x, dtype=model.dtype)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ValueError(f"{what} dataset is empty")
    if len(x) != len(y):
        raise ValueError(f"{what}: {len(x)} inputs but {len(y)} labels")
    if y.min() < 0 or y.max() >= model.spec.num_classes:
        raise ValueError(f"{what}: labels outside [0, {model.spec.num_classes})")
    return x, y


def _snapshot(model: Model):
    return {n: p.data.copy() for n, p in model.params.items()}, {n: b.copy() for n, b in model.buffers.items()}


def _restore(model: Model, snap) -> None:
    params, buffers = snap
    for n, arr in params.items():
        model.params[n].data[...] = arr
    for n, arr in buffers.items():
        model.buffers[n][...] = arr


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if len(idx) >= 2:
            yield idx


LossFn = Callable[[Tensor, np.ndarray, np.ndarray], Tensor]


def fit(
    model: Model,
    train_data,
    val_data,
    cfg: TrainConfig,
    loss_fn: Optional[LossFn] = None,
    masked: bool = False,
) -> TrainReport:
    """Mini-batch training with early stopping on validation accuracy.

    ``loss_fn(logits, labels, batch_indices)`` defaults to cross-entropy.
    With ``masked=True`` the model's prune masks constrain every update.
    Without validation data every epoch runs and the final weights are kept.
    """
    train_data = _validate_data(model, train_data, "train")
    val_data = _validate_data(model, val_data, "validation")
    if loss_fn is None:
        loss_fn = lambda logits, y, idx: ops.cross_entropy_with_softmax(logits, y)  # noqa: E731
    x, y = train_data
    rng = np.random.default_rng(cfg.seed)
    model.rng = np.random.default_rng([cfg.seed, 1])
    state = cfg.make_optimizer()
    masks = model.masks if masked else None
    report = TrainReport()
    best_acc, best_snap, wait = -math.inf, None, 0
    for epoch in range(cfg.epochs):
        model.train()
        losses = []
        for idx in _batches(len(x), cfg.batch_size, rng):
            model.zero_grad()
            loss = loss_fn(model.forward(x[idx]), y[idx], idx)
            backward(loss)
            optimizer_step(state, model.params, masks)
            losses.append(loss.item())
        if not all(map(math.isfinite, losses)):
            raise FloatingPointError(f"non-finite training loss in epoch {epoch}")
        report.train_loss.append(float(np.mean(losses)))
        model.eval()
        if val_data is None:
            report.stop_reason = "max_epochs"
            report.best_epoch = epoch
            continue
        acc = accuracy(model, val_data)
        report.val_acc.append(acc)
        log.info("epoch %d: train loss %.4f, val acc %.4f", epoch + 1, report.train_loss[-1], acc)
        if acc > best_acc:
            best_acc, best_snap, wait = acc, _snapshot(model), 0
            report.best_epoch = epoch
        else:
            wait += 1
            if wait > cfg.patience:
                report.stop_reason = "early_stopping"
                break
        report.stop_reason = "max_epochs"
    if best_snap is not None:
        _restore(model, best_snap)
    model.zero_grad()
    model.eval()
    return report


def train_plain(model: Model, train_data, val_data, cfg: TrainConfig):
    """Cross-entropy training; returns the (in-place) trained model and its report."""
    return model, fit(model, train_data, val_data, cfg)


def distill(teacher: Model, student: Model, train_data, val_data, cfg: KDConfig):
    """Train ``student`` against the frozen ``teacher`` with :func:`kd_loss`."""
    if teacher.spec.num_classes != student.spec.num_classes:
        raise ValueError(
            f"teacher has {teacher.spec.num_classes} classes, student has {student.spec.num_classes}"
        )
    teacher.eval()
    x = np.asarray(train_data[0], dtype=student.dtype)

    def loss_fn(logits, y, idx):
        with no_grad():
            t_logits = teacher.forward(x[idx]).data
        return kd_loss(logits, t_logits, y, cfg.tau, cfg.lam)

    return student, fit(student, train_data, val_data, cfg, loss_fn)


def fine_tuner(train_data, cfg: TrainConfig):
    """Callback for :func:`shrinknet.pruning.prune_iterative`: masked training for N epochs."""
    counter = [0]

    def run(model: Model, epochs: int):
        base = {f.name: getattr(cfg, f.name) for f in fields(TrainConfig)}
        sub = TrainConfig(**{**base, "epochs": epochs, "seed": cfg.seed + 1000 * (counter[0] + 1)})
        counter[0] += 1
        report = fit(model, train_data, None, sub, masked=True)
        return report.train_loss[-1], accuracy(model, train_data)

    return run
