"""Run configuration: TOML sections, validation, hashing and seed derivation."""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import SplitSpec, VocabSpec
from .model import ModelConfig
from .objective import ObjectiveConfig
from .perturb import PerturbSpec
from .tensor import ContractViolation
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists field-level messages."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


_NONE = object()

# section -> key -> default (_REQUIRED marks mandatory keys)
_REQUIRED = object()

SCHEMA: dict[str, dict[str, object]] = {
    "run": {"run_id": "run", "output_dir": "runs/run"},
    "data": {
        "path": "",
        "test_path": "",
        "n": 1000,
        "noise_rate": 0.0,
        "student_noise_rate": 0.3,
        "shift": 0.0,
        "signature_size": 3,
        "signature_tokens": 6,
        "filler_size": 40,
        "filler_tokens": 2,
        "train": 0.6,
        "val": 0.2,
        "test": 0.2,
        "seed": 0,
        "split_seed": 0,
    },
    "model": {
        "vocab_size": 512,
        "embed_dim": 32,
        "backbone_hidden": 32,
        "num_classes": 3,
        "embed_scale": 2.0,
        "seed": 0,
    },
    "teacher": {
        "epochs": 50,
        "batch_size": 32,
        "optimizer": "adam",
        "learning_rate": _REQUIRED,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "precision": "f64",
        "budget_steps": _NONE,
        "seed": 0,
    },
    "train": {
        "epochs": 20,
        "batch_size": 32,
        "optimizer": "adam",
        "learning_rate": _REQUIRED,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "precision": "f64",
        "budget_steps": _NONE,
        "head_init": "random",
        "seed": 0,
    },
    "objective": {
        "tau": 2.0,
        "alpha": 0.5,
        "lambda": 0.01,
        "kd_weight": 1.0,
        "consistency_weight": 0.0,
        "clip_norm": 5.0,
        "symmetric_temperature": False,
    },
    "perturb": {
        "p": "inf",
        "epsilon": 0.3,
        "method": "projected-ascent",
        "steps": 5,
        "step_size": _NONE,
        "seed": 0,
    },
    "eval": {
        "p": "inf",
        "epsilon": 0.3,
        "method": "projected-ascent",
        "steps": 5,
        "step_size": _NONE,
        "seed": 0,
        "draws": 8,
    },
}

SEED_KEYS = (
    ("data", "seed"), ("data", "split_seed"), ("model", "seed"), ("teacher", "seed"),
    ("train", "seed"), ("perturb", "seed"), ("eval", "seed"),
)

#: sweep axis name -> (section, key)
AXES = {
    "kd_weight": ("objective", "kd_weight"),
    "alpha": ("objective", "alpha"),
    "epsilon": ("perturb", "epsilon"),
    "lambda": ("objective", "lambda"),
    "tau": ("objective", "tau"),
    "budget_steps": ("train", "budget_steps"),
    "precision": ("train", "precision"),
}

_OPTIONAL_NONE = {("teacher", "budget_steps"), ("train", "budget_steps"),
                  ("perturb", "step_size"), ("eval", "step_size"), ("objective", "clip_norm")}


def _typecheck(section: str, key: str, value, default, problems: list[str]):
    where = f"{section}.{key}"
    if value is None or (isinstance(value, str) and value.lower() == "none"
                         and (section, key) in _OPTIONAL_NONE):
        if (section, key) in _OPTIONAL_NONE:
            return None
        problems.append(f"{where}: value is required")
        return value
    probe = default if default not in (_NONE, _REQUIRED) else None
    if probe is None:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            problems.append(f"{where}: expected a number, got {value!r}")
        return value
    if isinstance(probe, bool):
        if not isinstance(value, bool):
            problems.append(f"{where}: expected true/false, got {value!r}")
    elif isinstance(probe, int):
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{where}: expected an integer, got {value!r}")
    elif isinstance(probe, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{where}: expected a number, got {value!r}")
        else:
            value = float(value)
    elif isinstance(probe, str):
        if section in ("perturb", "eval") and key == "p" and value in (2, 2.0):
            return 2
        if not isinstance(value, str):
            problems.append(f"{where}: expected a string, got {value!r}")
    return value


def resolve(raw: dict) -> dict:
    """Fill defaults, reject unknown sections/keys and type errors."""
    problems: list[str] = []
    out: dict[str, dict] = {}
    for section in raw:
        if section not in SCHEMA:
            problems.append(f"unknown section [{section}]")
    for section, keys in SCHEMA.items():
        given = raw.get(section, {})
        if not isinstance(given, dict):
            problems.append(f"[{section}] must be a table")
            continue
        for key in given:
            if key not in keys:
                problems.append(f"{section}.{key}: unknown key")
        resolved = {}
        for key, default in keys.items():
            if key in given:
                resolved[key] = _typecheck(section, key, given[key], default, problems)
            elif default is _REQUIRED:
                problems.append(f"{section}.{key}: missing required key")
            else:
                resolved[key] = None if default is _NONE else default
        out[section] = resolved
    if problems:
        raise ConfigError(problems)
    try:
        build(out)
    except ContractViolation as exc:
        raise ConfigError([str(exc)]) from exc
    return out


def load(path) -> tuple[dict, str]:
    """Parse and resolve a TOML file; returns (resolved config, verbatim text)."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"{path}: {exc}"]) from exc
    return resolve(raw), text


def config_hash(cfg: dict) -> str:
    """Hash of everything that affects results (run id and output dir excluded)."""
    body = {k: v for k, v in cfg.items() if k != "run"}
    blob = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class Built:
    model: ModelConfig
    teacher: TrainConfig
    train: TrainConfig
    objective: ObjectiveConfig
    perturb: PerturbSpec
    eval_spec: PerturbSpec
    draws: int
    vocab: VocabSpec
    split: SplitSpec
    data: dict = field(default_factory=dict)


def _perturb_spec(sec: dict) -> PerturbSpec:
    return PerturbSpec(p=sec["p"], epsilon=float(sec["epsilon"]), method=sec["method"],
                       steps=sec["steps"], step_size=sec["step_size"], seed=sec["seed"])


def build(cfg: dict) -> Built:
    """Typed component configs; raises ContractViolation on invalid values."""
    d, t, s, o = cfg["data"], cfg["teacher"], cfg["train"], cfg["objective"]
    teacher = TrainConfig(**t)
    train = TrainConfig(**s)
    objective = ObjectiveConfig(
        tau=o["tau"], alpha=o["alpha"], lam=o["lambda"], kd_weight=o["kd_weight"],
        consistency_weight=o["consistency_weight"], clip_norm=o["clip_norm"],
        symmetric_temperature=o["symmetric_temperature"],
    )
    ev = dict(cfg["eval"])
    draws = ev.pop("draws")
    if draws < 1:
        raise ContractViolation("eval.draws must be >= 1")
    for key in ("noise_rate", "student_noise_rate", "shift"):
        if not 0 <= d[key] <= 1:
            raise ContractViolation(f"data.{key} must lie in [0, 1]")
    return Built(
        model=ModelConfig(**cfg["model"]),
        teacher=teacher,
        train=train,
        objective=objective,
        perturb=_perturb_spec(cfg["perturb"]),
        eval_spec=_perturb_spec(ev),
        draws=draws,
        vocab=VocabSpec(d["signature_size"], d["signature_tokens"], d["filler_size"],
                        d["filler_tokens"], d["shift"]),
        split=SplitSpec(d["train"], d["val"], d["test"], d["split_seed"]),
        data=d,
    )


def derive_seed(base: int, repeat: int) -> int:
    return int(np.random.SeedSequence([int(base), int(repeat)]).generate_state(1)[0])


def with_repeat(cfg: dict, repeat: int) -> dict:
    out = copy.deepcopy(cfg)
    for section, key in SEED_KEYS:
        out[section][key] = derive_seed(cfg[section][key], repeat)
    return out


def with_axis(cfg: dict, axis: str, value) -> dict:
    if axis not in AXES:
        raise ConfigError([f"unknown sweep axis {axis!r}; choose from {sorted(AXES)}"])
    section, key = AXES[axis]
    out = copy.deepcopy(cfg)
    out[section][key] = value
    return resolve(out)


def load_eval(path) -> tuple[PerturbSpec, int, str]:
    """Eval-config file: an [eval] table plus optional ``teacher_checkpoint``."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"{path}: {exc}"]) from exc
    problems = [f"unknown key {k!r}" for k in raw if k not in ("eval", "teacher_checkpoint")]
    sec = raw.get("eval", {})
    resolved = {}
    for key, default in SCHEMA["eval"].items():
        if key in sec:
            resolved[key] = _typecheck("eval", key, sec[key], default, problems)
        else:
            resolved[key] = None if default is _NONE else default
    problems += [f"eval.{k}: unknown key" for k in sec if k not in SCHEMA["eval"]]
    if problems:
        raise ConfigError(problems)
    draws = resolved.pop("draws")
    try:
        spec = _perturb_spec(resolved)
    except ContractViolation as exc:
        raise ConfigError([str(exc)]) from exc
    return spec, draws, raw.get("teacher_checkpoint", "")


def dump_toml(cfg: dict) -> str:
    """Serialise a resolved config back to TOML (``None`` values are omitted)."""
    lines = []
    for section, keys in cfg.items():
        lines.append(f"[{section}]")
        for key, value in keys.items():
            if value is None:
                continue
            lines.append(f"{key} = {json.dumps(value)}")
        lines.append("")
    return "\n".join(lines)


__all__ = [
    "ConfigError", "SCHEMA", "AXES", "resolve", "load", "build", "Built", "config_hash",
    "derive_seed", "with_repeat", "with_axis", "load_eval", "dump_toml", "replace",
]
