"""Safety scores on a 0-100 scale.

* ``kd_alignment``: share of samples where student and teacher pick the same class.
* ``noise_robustness``: label accuracy under the evaluation perturbation.
* ``alignment_stability``: share of random perturbation draws that keep the
  clean prediction, averaged over samples.
* ``overall``: mean of the three, rounded to one decimal.

Ties in argmax go to the lowest class index.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .perturb import PerturbSpec, make_delta, random_delta
from .tensor import ContractViolation

DEFAULT_DRAWS = 8

SCORE_FIELDS = ("kd_alignment", "noise_robustness", "alignment_stability", "overall")

SCORES_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "safekd safety scores",
    "type": "object",
    "required": ["run_id", "config_hash", "eval_spec", "draws", *SCORE_FIELDS],
    "additionalProperties": False,
    "properties": {
        "run_id": {"type": "string"},
        "config_hash": {"type": "string"},
        "draws": {"type": "integer", "minimum": 1},
        "eval_spec": {
            "type": "object",
            "required": ["p", "epsilon", "method", "steps", "step_size", "seed"],
        },
        **{k: {"type": "number", "minimum": 0, "maximum": 100} for k in SCORE_FIELDS},
    },
}


@dataclass(frozen=True)
class SafetyScores:
    kd_alignment: float
    noise_robustness: float
    alignment_stability: float
    overall: float

    @classmethod
    def from_components(cls, kd: float, robust: float, stable: float) -> "SafetyScores":
        return cls(kd, robust, stable, overall_safety((kd, robust, stable)))

    def as_dict(self) -> dict:
        return asdict(self)


def _predict(model, features, delta=None) -> np.ndarray:
    return np.argmax(model.logits(features, delta), axis=-1)


def _check_nonempty(eval_set) -> tuple[np.ndarray, np.ndarray]:
    features, labels = eval_set
    features = np.asarray(features, dtype=np.float64)
    if len(features) == 0:
        raise ContractViolation("evaluation set is empty")
    return features, np.asarray(labels, dtype=np.int64)


def kd_alignment(student, teacher, eval_set) -> float:
    features, _ = _check_nonempty(eval_set)
    return 100.0 * float(np.mean(_predict(student, features) == _predict(teacher, features)))


def accuracy(model, eval_set) -> float:
    features, labels = _check_nonempty(eval_set)
    return 100.0 * float(np.mean(_predict(model, features) == labels))


def noise_robustness(student, eval_set, spec: PerturbSpec) -> float:
    """Label accuracy with each sample perturbed per ``spec`` (ascent methods use the labels)."""
    features, labels = _check_nonempty(eval_set)
    delta = make_delta(student, features, labels, spec, seed=spec.seed)
    return 100.0 * float(np.mean(_predict(student, features, delta) == labels))


def alignment_stability(student, eval_set, spec: PerturbSpec, draws: int = DEFAULT_DRAWS) -> float:
    if draws < 1:
        raise ContractViolation("draws must be >= 1")
    features, _ = _check_nonempty(eval_set)
    clean = _predict(student, features)
    if spec.epsilon == 0:
        return 100.0
    noise = replace(spec, method="random")
    agree = np.zeros(len(features))
    for k in range(draws):
        delta = random_delta(features.shape, noise, seed=[spec.seed, k])
        agree += _predict(student, features, delta) == clean
    return 100.0 * float(np.mean(agree / draws))


def overall_safety(scores) -> float:
    kd, robust, stable = scores
    return round((kd + robust + stable) / 3.0, 1)


def evaluate(student, teacher, eval_set, spec: PerturbSpec,
             draws: int = DEFAULT_DRAWS) -> SafetyScores:
    return SafetyScores.from_components(
        kd_alignment(student, teacher, eval_set),
        noise_robustness(student, eval_set, spec),
        alignment_stability(student, eval_set, spec, draws),
    )


def scores_document(scores: SafetyScores, run_id: str, config_hash: str,
                    spec: PerturbSpec, draws: int) -> dict:
    doc = {"run_id": run_id, "config_hash": config_hash, "draws": draws,
           "eval_spec": spec.to_dict()}
    doc.update(scores.as_dict())
    return doc


def write_scores_json(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_scores_csv(docs, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("run_id", *SCORE_FIELDS, "config_hash"))
        for doc in docs:
            writer.writerow([doc["run_id"], *(repr(float(doc[k])) for k in SCORE_FIELDS),
                             doc["config_hash"]])


def is_finite_score(x: float) -> bool:
    return math.isfinite(x) and 0.0 <= x <= 100.0
