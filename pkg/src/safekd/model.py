"""Hashed-token classifiers: frozen embedding, two-layer relu backbone, linear head."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from . import tensor as T
from .tensor import ContractViolation, ParamVector

CHECKPOINT_FORMAT = "safekd-checkpoint"
CHECKPOINT_VERSION = 1

PARAM_NAMES = (
    "embedding",
    "backbone.w1",
    "backbone.b1",
    "backbone.w2",
    "backbone.b2",
    "head.w",
    "head.b",
)
HEAD = ("head.w", "head.b")
BACKBONE = ("backbone.w1", "backbone.b1", "backbone.w2", "backbone.b2")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


class EmptyInputError(ValueError):
    """Text had no tokens after normalization."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    embed_dim: int = 32
    backbone_hidden: int = 32
    num_classes: int = 3
    seed: int = 0
    embed_scale: float = 2.0  # std of the embedding rows

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "backbone_hidden"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be >= 1")
        if not self.embed_scale > 0:
            raise ContractViolation("embed_scale must be > 0")
        if self.num_classes < 2:
            raise ContractViolation("num_classes must be >= 2")


def fnv1a64(token: str) -> int:
    h = _FNV_OFFSET
    for byte in token.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class ClassifierModel:
    """A teacher or student classifier.

    Parameters live in ``params`` as float64 arrays.  Frozen arrays are made
    read-only so that accidental in-place updates fail loudly.
    """

    def __init__(self, config: ModelConfig, params: Mapping[str, np.ndarray],
                 frozen: Iterable[str] = (), role: str = "teacher"):
        if role not in ("teacher", "student"):
            raise ContractViolation(f"unknown role {role!r}")
        missing = set(PARAM_NAMES) - set(params)
        if missing:
            raise ContractViolation(f"missing parameters: {sorted(missing)}")
        self.config = config
        self.role = role
        self.params: dict[str, np.ndarray] = {}
        self.frozen: set[str] = set()
        for name in PARAM_NAMES:
            self.params[name] = np.array(params[name], dtype=np.float64)
        for name in frozen:
            self.freeze(name)

    @classmethod
    def initialize(cls, config: ModelConfig, role: str = "teacher") -> "ClassifierModel":
        rng = np.random.default_rng(config.seed)
        d, h, c = config.embed_dim, config.backbone_hidden, config.num_classes
        params = {
            "embedding": rng.standard_normal((config.vocab_size, d)) * config.embed_scale,
            "backbone.w1": rng.standard_normal((d, h)) * np.sqrt(2.0 / d),
            "backbone.b1": np.full(h, 0.1),
            "backbone.w2": rng.standard_normal((h, d)) * np.sqrt(2.0 / h),
            "backbone.b2": np.full(d, 0.1),
            "head.w": rng.standard_normal((d, c)) / np.sqrt(d),
            "head.b": np.zeros(c),
        }
        return cls(config, params, frozen=("embedding",), role=role)

    def freeze(self, name: str) -> None:
        self.params[name].flags.writeable = False
        self.frozen.add(name)

    def freeze_all(self) -> None:
        for name in PARAM_NAMES:
            self.freeze(name)

    @property
    def trainable_names(self) -> list[str]:
        return [n for n in PARAM_NAMES if n not in self.frozen]

    def trainable(self) -> ParamVector:
        return ParamVector({n: self.params[n].copy() for n in self.trainable_names})

    def assign(self, theta: ParamVector) -> None:
        """Overwrite trainable parameters in place."""
        for name, value in theta.segments.items():
            if name in self.frozen:
                raise ContractViolation(f"parameter {name!r} is frozen")
            if value.shape != self.params[name].shape:
                raise ContractViolation(
                    f"{name}: shape {value.shape} != {self.params[name].shape}"
                )
            self.params[name] = np.array(value, dtype=np.float64)

    def copy(self) -> "ClassifierModel":
        return ClassifierModel(self.config, self.params, self.frozen, self.role)

    def encode(self, text: str) -> np.ndarray:
        return encode(text, self)

    def encode_batch(self, texts: Iterable[str]) -> np.ndarray:
        return np.stack([encode(t, self) for t in texts])

    def forward(self, feature, delta=None, params: Mapping | None = None,
                cast: Callable[[np.ndarray], np.ndarray] | None = None):
        return forward(self, feature, delta, params=params, cast=cast)

    def logits(self, feature, delta=None) -> np.ndarray:
        return forward(self, feature, delta).data

    def lipschitz_bound(self) -> float:
        """Product of layer spectral norms; bounds |f(x+d) - f(x)| / |d| in l2."""
        norms = [np.linalg.norm(self.params[k], 2) for k in ("backbone.w1", "backbone.w2", "head.w")]
        return float(np.prod(norms))


def encode(text: str, model: ClassifierModel) -> np.ndarray:
    """Mean of the embedding rows of the hashed lowercase tokens of ``text``."""
    tokens = tokenize(text)
    if not tokens:
        raise EmptyInputError("text has no tokens after normalization")
    emb = model.params["embedding"]
    rows = [fnv1a64(tok) % model.config.vocab_size for tok in tokens]
    return emb[rows].mean(axis=0)


def forward(model: ClassifierModel, feature, delta=None, params: Mapping | None = None,
            cast: Callable[[np.ndarray], np.ndarray] | None = None):
    """Logits ``head(backbone(feature + delta))``.

    ``params`` overrides any named parameter (e.g. with tracked tensors);
    ``cast`` rounds every activation when emulating reduced precision.
    """
    p = dict(model.params)
    if params:
        p.update(params)
    x = feature if isinstance(feature, T.Tensor) else np.asarray(feature, dtype=np.float64)
    d = model.config.embed_dim
    if x.shape[-1:] != (d,) or len(x.shape) != 2:
        raise ContractViolation(f"feature shape {x.shape} != (batch, {d})")
    if delta is not None:
        if delta.shape != x.shape:
            raise ContractViolation(f"delta shape {delta.shape} != feature shape {x.shape}")
        x = T.add(x, delta)

    def act(t):
        return T.cast(t, cast) if cast is not None else t

    h1 = act(T.relu(T.add(T.matmul(x, p["backbone.w1"]), p["backbone.b1"])))
    h2 = act(T.relu(T.add(T.matmul(h1, p["backbone.w2"]), p["backbone.b2"])))
    return act(T.add(T.matmul(h2, p["head.w"]), p["head.b"]))


def clone_for_student(teacher: ClassifierModel, head_init: str = "random",
                      seed: int | None = None) -> ClassifierModel:
    """Student sharing the teacher's frozen embedding and backbone.

    ``head_init`` is one of ``copy-teacher``, ``zeros`` or ``random``.
    """
    params = {k: v.copy() for k, v in teacher.params.items()}
    d, c = teacher.config.embed_dim, teacher.config.num_classes
    if head_init == "copy-teacher":
        pass
    elif head_init == "zeros":
        params["head.w"] = np.zeros((d, c))
        params["head.b"] = np.zeros(c)
    elif head_init == "random":
        rng = np.random.default_rng(teacher.config.seed if seed is None else seed)
        params["head.w"] = rng.standard_normal((d, c)) / np.sqrt(d)
        params["head.b"] = np.zeros(c)
    else:
        raise ContractViolation(f"unknown head_init {head_init!r}")
    return ClassifierModel(teacher.config, params, frozen=("embedding",) + BACKBONE,
                           role="student")


def checkpoint_document(model: ClassifierModel) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "role": model.role,
        "config": asdict(model.config),
        "params": {
            name: {
                "shape": list(model.params[name].shape),
                "frozen": name in model.frozen,
                "data": model.params[name].ravel().tolist(),
            }
            for name in PARAM_NAMES
        },
    }


def dumps_checkpoint(model: ClassifierModel) -> str:
    return json.dumps(checkpoint_document(model), separators=(",", ":")) + "\n"


def save_checkpoint(model: ClassifierModel, path) -> None:
    Path(path).write_text(dumps_checkpoint(model), encoding="utf-8")


def loads_checkpoint(text: str) -> ClassifierModel:
    doc = json.loads(text)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a safekd checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    config = ModelConfig(**doc["config"])
    params, frozen = {}, []
    for name, entry in doc["params"].items():
        params[name] = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if entry["frozen"]:
            frozen.append(name)
    return ClassifierModel(config, params, frozen=frozen, role=doc["role"])


def load_checkpoint(path) -> ClassifierModel:
    return loads_checkpoint(Path(path).read_text(encoding="utf-8"))
