"""Teacher pre-training, student fine-tuning, optimizers and precision emulation."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Dataset
from .model import ClassifierModel, ModelConfig, clone_for_student
from .objective import LossReport, ObjectiveConfig, total_loss
from .perturb import PerturbSpec
from .tensor import ContractViolation, NumericOverflowError, ParamVector

log = logging.getLogger(__name__)

PRECISIONS = ("f64", "f32", "emulated-bf16")
TRACE_COLUMNS = ("step", "L_KD", "L_NR", "L_Reg", "L_Total", "grad_pre", "grad_post", "wall_ms")


class TrainingAborted(RuntimeError):
    """The objective went non-finite; carries the step index and last report."""

    def __init__(self, step: int, report: LossReport | None, reason: str = "non-finite loss"):
        super().__init__(f"training aborted at step {step}: {reason}")
        self.step = step
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    precision: str = "f64"
    budget_steps: int | None = None
    head_init: str = "random"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ContractViolation("epochs must be >= 0")
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ContractViolation("learning_rate must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractViolation(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.precision not in PRECISIONS:
            raise ContractViolation(f"precision must be one of {PRECISIONS}")
        if self.budget_steps is not None and self.budget_steps < 1:
            raise ContractViolation("budget_steps must be >= 1")


def round_bf16(x) -> np.ndarray:
    """Round to 8 significant bits (bfloat16 mantissa), ties to even."""
    x = np.asarray(x, dtype=np.float64)
    mant, expo = np.frexp(x)
    return np.ldexp(np.rint(np.ldexp(mant, 8)), expo - 8)


def apply_precision(x, mode: str) -> np.ndarray:
    if mode == "f64":
        return x
    if mode == "f32":
        return np.asarray(x, dtype=np.float64).astype(np.float32).astype(np.float64)
    if mode == "emulated-bf16":
        return round_bf16(x)
    raise ContractViolation(f"unknown precision mode {mode!r}")


def precision_cast(mode: str) -> Callable[[np.ndarray], np.ndarray] | None:
    if mode == "f64":
        return None
    apply_precision(0.0, mode)
    return lambda x: apply_precision(x, mode)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return theta - self.lr * grad


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(cfg.learning_rate)
    return Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)


@dataclass
class TrainTrace:
    reports: list[LossReport] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    epoch_scores: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.reports)

    def epoch_means(self, steps_per_epoch: int, key: str = "L_Total") -> list[float]:
        values = [getattr(r, key) for r in self.reports]
        return [
            float(np.mean(values[i:i + steps_per_epoch]))
            for i in range(0, len(values), steps_per_epoch)
        ]

    def rows(self):
        for i, (r, ms) in enumerate(zip(self.reports, self.wall_ms)):
            yield (i, r.L_KD, r.L_NR, r.L_Reg, r.L_Total,
                   r.grad_norm_pre_clip, r.grad_norm_post_clip, ms)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_COLUMNS)
            for row in self.rows():
                writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def as_arrays(data, model: ClassifierModel) -> tuple[np.ndarray, np.ndarray]:
    """Encode a Dataset with ``model``'s embedding, or pass (features, labels) through."""
    if isinstance(data, Dataset):
        return model.encode_batch(data.texts), data.labels
    features, labels = data
    return np.asarray(features, dtype=np.float64), np.asarray(labels, dtype=np.int64)


def batches(n: int, batch_size: int, epochs: int, seed):
    """Yield index arrays, reshuffling every epoch with a generator seeded by ``seed``."""
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def _run(model: ClassifierModel, teacher: ClassifierModel, features, labels,
         obj_cfg: ObjectiveConfig, spec: PerturbSpec, cfg: TrainConfig,
         on_epoch: Callable[[int], object] | None = None) -> TrainTrace:
    trace = TrainTrace()
    opt = make_optimizer(cfg)
    cast = precision_cast(cfg.precision)
    per_epoch = steps_per_epoch(len(labels), cfg.batch_size)
    limit = cfg.budget_steps
    names = model.trainable_names
    theta = model.trainable().flatten()
    report = None
    for step, idx in enumerate(batches(len(labels), cfg.batch_size, cfg.epochs, [cfg.seed, 1])):
        if limit is not None and step >= limit:
            break
        t0 = time.perf_counter()
        try:
            _, report, grad = total_loss(
                model, teacher, (features[idx], labels[idx]), spec, obj_cfg,
                seed=[spec.seed, step], cast=cast,
            )
        except NumericOverflowError as exc:
            raise TrainingAborted(step, report, str(exc)) from exc
        if not np.isfinite(report.L_Total):
            raise TrainingAborted(step, report)
        theta = opt.step(theta, grad.flatten())
        model.assign(ParamVector({n: model.params[n] for n in names}).unflatten(theta))
        trace.reports.append(report)
        trace.wall_ms.append((time.perf_counter() - t0) * 1e3)
        if on_epoch is not None and (step + 1) % per_epoch == 0:
            trace.epoch_scores.append(on_epoch((step + 1) // per_epoch))
    return trace


def pretrain_teacher(data, model_cfg: ModelConfig, train_cfg: TrainConfig) -> ClassifierModel:
    """Plain cross-entropy training of backbone and head; returns a fully frozen teacher."""
    teacher = ClassifierModel.initialize(model_cfg, role="teacher")
    features, labels = as_arrays(data, teacher)
    if len(labels) == 0:
        raise ContractViolation("teacher pre-training needs data")
    if len(np.unique(labels)) < 2:
        raise ContractViolation(
            f"teacher pre-training needs at least 2 classes, labels are all {labels[0]}"
        )
    plain = ObjectiveConfig(tau=1.0, alpha=1.0, lam=0.0, kd_weight=0.0, clip_norm=None)
    _run(teacher, teacher, features, labels, plain, PerturbSpec(epsilon=0.0, method="none"),
         train_cfg)
    teacher.freeze_all()
    return teacher


def finetune_student(teacher: ClassifierModel, data, obj_cfg: ObjectiveConfig,
                     perturb_spec: PerturbSpec, train_cfg: TrainConfig,
                     eval_fn: Callable[[ClassifierModel], object] | None = None,
                     student: ClassifierModel | None = None):
    """Minimise the weighted objective over the student head.

    ``eval_fn`` (if given) is called on the student after every epoch and its
    results are collected in ``trace.epoch_scores``.
    """
    if teacher.trainable_names:
        raise ContractViolation("teacher must be frozen before fine-tuning a student")
    if student is None:
        student = clone_for_student(teacher, train_cfg.head_init, seed=train_cfg.seed)
    features, labels = as_arrays(data, teacher)
    on_epoch = (lambda _epoch: eval_fn(student)) if eval_fn is not None else None
    trace = _run(student, teacher, features, labels, obj_cfg, perturb_spec, train_cfg, on_epoch)
    log.debug("fine-tuned %d steps", len(trace))
    return student, trace


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
