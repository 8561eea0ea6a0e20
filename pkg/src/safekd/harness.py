"""Experiment orchestration: one run end to end, and grid sweeps over one axis."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import config as C
from . import metrics
from .data import Dataset, flip_labels, generate_synthetic, load_jsonl, save_jsonl, split
from .model import ClassifierModel, save_checkpoint
from .tensor import checked
from .trainer import TrainTrace, finetune_student, pretrain_teacher

log = logging.getLogger(__name__)

WORKERS_ENV = "SAFEKD_WORKERS"
SWEEP_COLUMNS = ("axis", "value", "repeat", "seed", *metrics.SCORE_FIELDS,
                 "wall_s", "status", "config_hash")


@dataclass
class RunResult:
    teacher: ClassifierModel
    student: ClassifierModel
    trace: TrainTrace
    scores: metrics.SafetyScores
    eval_set: tuple
    config_hash: str
    test_data: Dataset | None = None


def load_datasets(cfg: dict) -> tuple[Dataset, Dataset, Dataset]:
    """Train/val/test datasets per the ``[data]`` section."""
    b = C.build(cfg)
    d = b.data
    num_classes = b.model.num_classes
    if d["path"]:
        full = load_jsonl(d["path"])
        if full.num_classes is None:
            full.num_classes = num_classes
    else:
        full = generate_synthetic(d["n"], num_classes, replace(b.vocab, shift=0.0),
                                  d["noise_rate"], d["seed"])
    if full.num_classes != num_classes:
        raise C.ConfigError([f"data has {full.num_classes} classes, model.num_classes is "
                             f"{num_classes}"])
    train, val, test = split(full, b.split)
    if d["test_path"]:
        test = load_jsonl(d["test_path"], num_classes)
    elif d["shift"] > 0:
        test = generate_synthetic(max(len(test), num_classes), num_classes, b.vocab, 0.0,
                                  C.derive_seed(d["seed"], 7919))
    return train, val, test


_TEACHERS: dict[str, ClassifierModel] = {}


def _teacher_key(cfg: dict) -> str:
    return C.config_hash({"data": cfg["data"], "model": cfg["model"],
                          "teacher": cfg["teacher"], "run": {}})


def get_teacher(cfg: dict, train: Dataset) -> ClassifierModel:
    """Pre-train (or reuse an in-process cached) teacher for this data/model config."""
    key = _teacher_key(cfg)
    if key not in _TEACHERS:
        b = C.build(cfg)
        _TEACHERS[key] = pretrain_teacher(train, b.model, b.teacher)
    return _TEACHERS[key].copy()


def run_experiment(cfg: dict, check: bool = True) -> RunResult:
    """Pre-train the teacher, fine-tune the student on noisy labels, score on test."""
    b = C.build(cfg)
    with checked(check):
        train, _, test = load_datasets(cfg)
        teacher = get_teacher(cfg, train)
        features = teacher.encode_batch(train.texts)
        labels = flip_labels(train.labels, b.model.num_classes,
                             b.data["student_noise_rate"], C.derive_seed(b.data["seed"], 1))
        eval_set = (teacher.encode_batch(test.texts), test.labels)
        student, trace = finetune_student(teacher, (features, labels), b.objective,
                                          b.perturb, b.train)
        scores = metrics.evaluate(student, teacher, eval_set, b.eval_spec, b.draws)
    return RunResult(teacher, student, trace, scores, eval_set, C.config_hash(cfg), test)


def write_run_artifacts(cfg: dict, result: RunResult, out_dir, config_text: str | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    b = C.build(cfg)
    save_checkpoint(result.teacher, out / "teacher.ckpt.json")
    save_checkpoint(result.student, out / "student.ckpt.json")
    result.trace.to_csv(out / "trace.csv")
    if result.test_data is not None:
        save_jsonl(result.test_data, out / "test.jsonl")
    doc = metrics.scores_document(result.scores, cfg["run"]["run_id"], result.config_hash,
                                  b.eval_spec, b.draws)
    metrics.write_scores_json(doc, out / "scores.json")
    metrics.write_scores_csv([doc], out / "scores.csv")
    if config_text is not None:
        (out / "config.toml").write_text(config_text, encoding="utf-8")
    resolved = {"config_hash": result.config_hash, "config": cfg}
    (out / "config.resolved.json").write_text(json.dumps(resolved, indent=2, sort_keys=True)
                                              + "\n", encoding="utf-8")
    return doc


def _sweep_point(args):
    cfg, axis, value, repeat = args
    t0 = time.perf_counter()
    row = {"axis": axis, "value": value, "repeat": repeat, "seed": cfg["train"]["seed"],
           "config_hash": C.config_hash(cfg)}
    try:
        result = run_experiment(cfg, check=False)
    except Exception as exc:  # a failed point must not sink the sweep
        log.warning("sweep point %s=%r repeat %d failed: %s", axis, value, repeat, exc)
        row.update({k: float("nan") for k in metrics.SCORE_FIELDS}, status="failed")
    else:
        row.update(result.scores.as_dict(), status="ok")
    row["wall_s"] = time.perf_counter() - t0
    return row


def sweep(base: dict, axis: str, values, repeats: int = 1, workers: int | None = None):
    """Run every (value, repeat) point; returns rows in grid order plus mean rows."""
    if len(values) < 2:
        raise C.ConfigError(["a sweep needs at least 2 grid points"])
    numeric = [v for v in values if isinstance(v, (int, float))]
    if len(numeric) == len(values) and any(a >= b for a, b in zip(values, values[1:])):
        raise C.ConfigError(["numeric sweep values must be strictly increasing"])
    if repeats < 1:
        raise C.ConfigError(["repeats must be >= 1"])
    jobs = []
    for value in values:
        point = C.with_axis(base, axis, value)
        for r in range(repeats):
            jobs.append((C.with_repeat(point, r), axis, value, r))
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]
    out = []
    for i, value in enumerate(values):
        point_rows = rows[i * repeats:(i + 1) * repeats]
        out.extend(point_rows)
        out.append(mean_row(point_rows))
    return out


def mean_row(point_rows: list[dict]) -> dict:
    first = point_rows[0]
    ok = [r for r in point_rows if r["status"] == "ok"]
    row = {"axis": first["axis"], "value": first["value"], "repeat": "mean", "seed": "",
           "config_hash": "", "wall_s": float(np.mean([r["wall_s"] for r in point_rows]))}
    for k in metrics.SCORE_FIELDS:
        row[k] = float(np.mean([r[k] for r in ok])) if ok else float("nan")
    row["status"] = "ok" if len(ok) == len(point_rows) else "partial"
    return row


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def write_sweep_csv(rows, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in SWEEP_COLUMNS])


def read_sweep_csv(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for k in (*metrics.SCORE_FIELDS, "wall_s"):
            row[k] = float(row[k])
    return rows


def clear_teacher_cache() -> None:
    _TEACHERS.clear()
