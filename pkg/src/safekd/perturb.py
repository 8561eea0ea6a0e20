"""Feature-space perturbations confined to an l2 or l-infinity ball."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import ContractViolation

METHODS = ("none", "random", "sign-step", "projected-ascent")
_GRAD_FLOOR = 1e-12


def _parse_p(p) -> float:
    if isinstance(p, str):
        p = p.strip().lower()
        if p in ("inf", "infinity", "linf"):
            return math.inf
        p = float(p)
    p = float(p)
    if p not in (2.0, math.inf):
        raise ContractViolation(f"p must be 2 or inf, got {p}")
    return p


@dataclass(frozen=True)
class PerturbSpec:
    p: float = math.inf
    epsilon: float = 0.3
    method: str = "projected-ascent"
    steps: int = 5
    step_size: float | None = None  # None means epsilon / 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "p", _parse_p(self.p))
        if self.epsilon < 0:
            raise ContractViolation("epsilon must be >= 0")
        if self.method not in METHODS:
            raise ContractViolation(f"method must be one of {METHODS}, got {self.method!r}")
        if self.steps < 1:
            raise ContractViolation("steps must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ContractViolation("step_size must be > 0")

    @property
    def effective_step_size(self) -> float:
        return self.epsilon / 4 if self.step_size is None else self.step_size

    def to_dict(self) -> dict:
        return {
            "p": "inf" if math.isinf(self.p) else 2,
            "epsilon": self.epsilon,
            "method": self.method,
            "steps": self.steps,
            "step_size": self.step_size,
            "seed": self.seed,
        }


def _row_norms(delta: np.ndarray) -> np.ndarray:
    if delta.ndim == 1:
        return np.array(np.linalg.norm(delta))
    return np.linalg.norm(delta, axis=-1, keepdims=True)


def ball_norm(delta: np.ndarray, p: float) -> np.ndarray:
    """Per-sample norm used by the ball constraint (rows for 2-D input)."""
    delta = np.asarray(delta)
    if math.isinf(p):
        return np.abs(delta).max(axis=-1)
    return np.linalg.norm(delta, axis=-1)


def project(delta, p, epsilon: float) -> np.ndarray:
    """Project each sample of ``delta`` onto ``{d : |d|_p <= epsilon}``.

    Samples already inside the ball come back untouched.
    """
    if epsilon < 0:
        raise ContractViolation("epsilon must be >= 0")
    p = _parse_p(p)
    delta = np.asarray(delta, dtype=np.float64)
    if math.isinf(p):
        if np.all(np.abs(delta) <= epsilon):
            return delta
        return np.clip(delta, -epsilon, epsilon)
    norms = _row_norms(delta)
    if np.all(norms <= epsilon):
        return delta
    factor = np.where(norms > epsilon, epsilon / np.where(norms > 0, norms, 1.0), 1.0)
    return delta * factor


def random_delta(shape, spec: PerturbSpec, seed=None) -> np.ndarray:
    """Uniform sample from the ball, per sample along the last axis."""
    shape = tuple(shape)
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    eps = spec.epsilon
    if eps == 0:
        return np.zeros(shape)
    if math.isinf(spec.p):
        return rng.uniform(-eps, eps, size=shape)
    dim = shape[-1]
    direction = rng.standard_normal(shape)
    direction /= np.maximum(_row_norms(direction), _GRAD_FLOOR)
    radius = eps * rng.uniform(size=shape[:-1] + (1,)) ** (1.0 / dim)
    return project(direction * radius, 2, eps)


def input_gradient(model, features, labels, delta, cast=None) -> np.ndarray:
    """Gradient of the summed cross-entropy with respect to ``delta``."""
    tape = T.Tape()
    d = tape.watch(delta, "delta")
    z = model.forward(features, d, cast=cast)
    ce = T.neg(T.sum_(T.pick(T.log_softmax(z), labels)))
    return T.backward(tape, ce)[d.node]


def _ascent_direction(grad: np.ndarray, p: float) -> np.ndarray:
    if math.isinf(p):
        return np.sign(grad)
    norms = _row_norms(grad)
    safe = np.where(norms < _GRAD_FLOOR, 1.0, norms)
    return np.where(norms < _GRAD_FLOOR, 0.0, grad / safe)


def ascend(model, features, labels, spec: PerturbSpec, seed=None, delta0=None,
           cast: Callable | None = None, iterates: list | None = None) -> np.ndarray:
    """Inner maximisation of the perturbed-branch cross-entropy.

    ``sign-step`` takes one signed step of size epsilon from zero;
    ``projected-ascent`` starts at ``delta0`` (a random ball sample by default)
    and takes ``spec.steps`` projected steps.  Every iterate is appended to
    ``iterates`` when a list is given.
    """
    features = np.asarray(features, dtype=np.float64)
    eps = spec.epsilon
    if spec.method == "sign-step":
        if eps == 0:
            return np.zeros_like(features)
        g = input_gradient(model, features, labels, np.zeros_like(features), cast)
        delta = project(eps * np.sign(g), spec.p, eps)
        if iterates is not None:
            iterates.append(delta)
        return delta
    if spec.method != "projected-ascent":
        raise ContractViolation(f"ascend needs sign-step or projected-ascent, got {spec.method!r}")
    if delta0 is None:
        delta = random_delta(features.shape, spec, seed)
    else:
        delta = project(np.array(delta0, dtype=np.float64), spec.p, eps)
    if iterates is not None:
        iterates.append(delta)
    if eps == 0:
        return delta
    step = spec.effective_step_size
    for _ in range(spec.steps):
        g = input_gradient(model, features, labels, delta, cast)
        delta = project(delta + step * _ascent_direction(g, spec.p), spec.p, eps)
        if iterates is not None:
            iterates.append(delta)
    return delta


def make_delta(model, features, labels, spec: PerturbSpec, seed=None, cast=None) -> np.ndarray:
    """Dispatch on ``spec.method``; ``none`` yields zeros."""
    features = np.asarray(features, dtype=np.float64)
    if spec.method == "none" or spec.epsilon == 0:
        return np.zeros_like(features)
    if spec.method == "random":
        return random_delta(features.shape, spec, seed)
    return ascend(model, features, labels, spec, seed=seed, cast=cast)
