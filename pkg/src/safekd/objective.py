"""Loss algebra: tempered softmax, distillation KL, noise-robust cross-entropy,
gradient-norm penalty, their weighted total, and global-norm clipping."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Mapping

import numpy as np
from scipy.special import xlogy

from . import tensor as T
from .model import ClassifierModel
from .perturb import PerturbSpec, make_delta
from .tensor import ContractViolation, ParamVector

LOG_FLOOR = 1e-12
_LOG_FLOOR_LN = math.log(LOG_FLOOR)


class _Counter:
    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        self.count += int(n)

    def reset(self) -> None:
        self.count = 0


#: Number of label probabilities clamped to ``LOG_FLOOR`` since the last reset.
log_guard_hits = _Counter()


@dataclass(frozen=True)
class ObjectiveConfig:
    tau: float = 2.0
    alpha: float = 0.5
    lam: float = 0.01
    kd_weight: float = 1.0
    consistency_weight: float = 0.0
    clip_norm: float | None = 5.0
    symmetric_temperature: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ContractViolation("tau must be > 0")
        if not 0 <= self.alpha <= 1:
            raise ContractViolation("alpha must lie in [0, 1]")
        if self.lam < 0:
            raise ContractViolation("lambda must be >= 0")
        if self.kd_weight < 0:
            raise ContractViolation("kd_weight must be >= 0")
        if self.consistency_weight < 0:
            raise ContractViolation("consistency_weight must be >= 0")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ContractViolation("clip_norm must be > 0 or None")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


@dataclass
class LossReport:
    L_KD: float
    L_NR: float
    L_Reg: float
    L_Total: float
    grad_norm_pre_clip: float
    grad_norm_post_clip: float


def softmax(z, tau: float = 1.0) -> np.ndarray:
    if not tau > 0:
        raise ContractViolation("tau must be > 0")
    z = np.asarray(z, dtype=np.float64) / tau
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def kl_div(p, q) -> float | np.ndarray:
    """KL(p || q) along the last axis, with 0 * ln(0 / q) taken as 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ContractViolation(f"kl_div: shapes {p.shape} and {q.shape} differ")
    out = np.sum(xlogy(p, p) - xlogy(p, q), axis=-1)
    return float(out) if out.ndim == 0 else out


def kd_loss(teacher_logits, student_logits, tau: float, symmetric: bool = False) -> float:
    """Batch mean of KL(softmax(z_teacher / tau) || softmax(z_student)).

    With ``symmetric`` the student is tempered too and the result is scaled by
    tau squared.
    """
    zt = np.asarray(teacher_logits, dtype=np.float64)
    zs = np.asarray(student_logits, dtype=np.float64)
    if zt.shape != zs.shape or zt.ndim != 2:
        raise ContractViolation(f"kd_loss: shapes {zt.shape} and {zs.shape} do not match")
    target = softmax(zt, tau)
    if symmetric:
        return float(np.mean(kl_div(target, softmax(zs, tau)))) * tau**2
    return float(np.mean(kl_div(target, softmax(zs))))


def nr_loss(clean_probs, perturbed_probs, labels, alpha: float) -> float:
    """Batch mean of -[alpha ln p_clean[y] + (1 - alpha) ln p_perturbed[y]]."""
    pc = np.asarray(clean_probs, dtype=np.float64)
    pp = np.asarray(perturbed_probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    rows = np.arange(len(y))
    if pc.shape != pp.shape or pc.shape[0] != len(y):
        raise ContractViolation("nr_loss: probability and label shapes disagree")
    if np.any(y < 0) or np.any(y >= pc.shape[1]):
        raise ContractViolation("nr_loss: label out of range")
    picked = np.stack([pc[rows, y], pp[rows, y]])
    log_guard_hits.add(np.count_nonzero(picked < LOG_FLOOR))
    lc, lp = np.log(np.maximum(picked, LOG_FLOOR))
    return float(np.mean(-(alpha * lc + (1 - alpha) * lp)))


def clip_gradients(grad: ParamVector, c: float) -> ParamVector:
    """Rescale ``grad`` so its global l2 norm is at most ``c``."""
    if not c > 0:
        raise ContractViolation("clip norm must be > 0")
    norm = grad.norm()
    if norm <= c:
        return grad
    return grad.unflatten(grad.flatten() * (c / norm))


def grad_norm_reg(loss_fn_nr: T.LossFn, theta: ParamVector, lam: float,
                  grad: ParamVector | None = None) -> tuple[float, ParamVector]:
    """Value ``lam * |g|^2`` of the gradient-norm penalty and its gradient ``2 lam H g``.

    ``g`` is the autodiff gradient of ``loss_fn_nr`` at ``theta`` (pass it as
    ``grad`` when already known).
    """
    if lam < 0:
        raise ContractViolation("lambda must be >= 0")
    if lam == 0:
        return 0.0, theta.unflatten(np.zeros(theta.total_len))
    if grad is None:
        _, grad = T.value_and_grad(loss_fn_nr, theta)
    g = grad.flatten()
    hg = T.hvp(loss_fn_nr, theta, grad).flatten()
    return lam * float(g @ g), theta.unflatten(2.0 * lam * hg)


# Tracked building blocks.  ``params`` maps trainable names to tracked tensors.

def _log_label_probs(z, labels):
    lp = T.pick(T.log_softmax(z), labels)
    log_guard_hits.add(np.count_nonzero(lp.data < _LOG_FLOOR_LN))
    return T.clamp_min(lp, _LOG_FLOOR_LN)


def nr_objective(model: ClassifierModel, features, labels, delta, cfg: ObjectiveConfig,
                 cast: Callable | None = None) -> T.LossFn:
    """Closure ``params -> L_NR`` with the perturbation held fixed."""
    alpha, w_cons = cfg.alpha, cfg.consistency_weight

    def loss(params: Mapping[str, T.Tensor]) -> T.Tensor:
        z = model.forward(features, params=params, cast=cast)
        terms = None
        if alpha > 0:
            terms = T.scale(_log_label_probs(z, labels), alpha)
        if alpha < 1 or w_cons > 0:
            zp = model.forward(features, delta, params=params, cast=cast)
        if alpha < 1:
            pert = T.scale(_log_label_probs(zp, labels), 1 - alpha)
            terms = pert if terms is None else T.add(terms, pert)
        out = T.neg(T.mean(terms))
        if w_cons > 0:
            # symmetric KL = sum (p - q)(ln p - ln q)
            lc, lpert = T.log_softmax(z), T.log_softmax(zp)
            diff = T.mul(T.sub(T.exp(lc), T.exp(lpert)), T.sub(lc, lpert))
            sym = T.scale(T.sum_(diff), 1.0 / diff.shape[0])
            out = T.add(out, T.scale(sym, w_cons))
        return out

    return loss


def kd_objective(model: ClassifierModel, features, teacher_logits, cfg: ObjectiveConfig,
                 cast: Callable | None = None) -> T.LossFn:
    """Closure ``params -> L_KD`` against fixed teacher logits."""
    tau = cfg.tau
    target = softmax(teacher_logits, tau)
    batch = target.shape[0]
    neg_entropy = float(np.sum(xlogy(target, target))) / batch

    def loss(params: Mapping[str, T.Tensor]) -> T.Tensor:
        z = model.forward(features, params=params, cast=cast)
        if cfg.symmetric_temperature:
            logq = T.log_softmax(T.scale(z, 1.0 / tau))
        else:
            logq = T.log_softmax(z)
        cross = T.scale(T.sum_(T.mul(logq, target)), -1.0 / batch)
        out = T.add(cross, neg_entropy)
        if cfg.symmetric_temperature:
            out = T.scale(out, tau**2)
        return out

    return loss


def total_loss(model: ClassifierModel, teacher: ClassifierModel, batch,
               spec: PerturbSpec, cfg: ObjectiveConfig, seed=None,
               cast: Callable | None = None) -> tuple[float, LossReport, ParamVector]:
    """Weighted objective ``w_KD * L_KD + L_NR + L_Reg`` for one batch.

    Returns the scalar value, the per-component report and the clipped
    gradient with respect to ``model``'s trainable parameters.  The
    perturbation is built first and then held fixed.
    """
    features, labels = batch
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if teacher.config.num_classes != model.config.num_classes:
        raise ContractViolation("teacher and student disagree on num_classes")
    if teacher.config.embed_dim != model.config.embed_dim:
        raise ContractViolation("teacher and student disagree on embed_dim")

    delta = make_delta(model, features, labels, spec, seed=seed, cast=cast)
    theta = model.trainable()
    nr_fn = nr_objective(model, features, labels, delta, cfg, cast)

    tape = T.Tape()
    params = {k: tape.watch(v, k) for k, v in theta.segments.items()}
    nr = nr_fn(params)
    teacher_logits = teacher.logits(features)
    w = cfg.kd_weight
    if w > 0:
        kd = kd_objective(model, features, teacher_logits, cfg, cast)(params)
        l_kd = kd.item()
        root = T.add(T.scale(kd, w), nr)
    else:
        # same arithmetic as the tracked branch, just not on the tape
        consts = {k: T.Tensor(v) for k, v in theta.segments.items()}
        l_kd = kd_objective(model, features, teacher_logits, cfg, cast)(consts).item()
        root = nr
    leaf_grads = T.backward(tape, root)
    grad = ParamVector({k: leaf_grads[t.node] for k, t in params.items()})

    l_reg = 0.0
    if cfg.lam > 0:
        nr_grads = T.backward(tape, nr)
        g = ParamVector({k: nr_grads[t.node] for k, t in params.items()})
        l_reg, reg_grad = grad_norm_reg(nr_fn, theta, cfg.lam, grad=g)
        grad = grad.unflatten(grad.flatten() + reg_grad.flatten())

    if cast is not None:
        grad = grad.unflatten(cast(grad.flatten()))
    pre = grad.norm()
    if cfg.clip_norm is not None:
        grad = clip_gradients(grad, cfg.clip_norm)
    l_nr = nr.item()
    l_total = w * l_kd + l_nr + l_reg
    report = LossReport(l_kd, l_nr, l_reg, l_total, pre, grad.norm())
    return l_total, report, grad


def objective_value(model: ClassifierModel, teacher: ClassifierModel, batch, delta,
                    cfg: ObjectiveConfig, theta: ParamVector | None = None) -> float:
    """Full objective at ``theta`` for a fixed perturbation, gradient penalty included."""
    features, labels = batch
    if theta is None:
        theta = model.trainable()
    nr_fn = nr_objective(model, features, labels, delta, cfg)
    l_nr, g = T.value_and_grad(nr_fn, theta)
    teacher_logits = teacher.logits(features)
    consts = {k: T.Tensor(v) for k, v in theta.segments.items()}
    l_kd = kd_objective(model, features, teacher_logits, cfg)(consts).item()
    gf = g.flatten()
    return cfg.kd_weight * l_kd + l_nr + cfg.lam * float(gf @ gf)
