"""Command-line entry point: ``safekd train | eval | sweep``.

Exit codes: 0 ok, 1 some sweep points failed, 2 invalid configuration or
input, 3 numeric abort during training.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as C
from . import harness, metrics
from .data import DatasetError, load_jsonl
from .model import load_checkpoint
from .tensor import ContractViolation, NumericOverflowError
from .trainer import TrainingAborted

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("safekd")


def _config_error(exc: C.ConfigError) -> int:
    for problem in exc.problems:
        print(f"config error: {problem}", file=sys.stderr)
    return EXIT_CONFIG


def parse_values(text: str) -> list:
    """Comma-separated grid; numbers become int/float, anything else stays a string."""
    out = []
    for item in (s.strip() for s in text.split(",")):
        if not item:
            continue
        for cast in (int, float):
            try:
                out.append(cast(item))
                break
            except ValueError:
                continue
        else:
            out.append(item)
    return out


def cmd_train(args) -> int:
    try:
        cfg, text = C.load(args.config)
    except C.ConfigError as exc:
        return _config_error(exc)
    out_dir = Path(args.out or cfg["run"]["output_dir"])
    try:
        result = harness.run_experiment(cfg, check=True)
    except C.ConfigError as exc:
        return _config_error(exc)
    except (DatasetError, ContractViolation) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"numeric abort at step {exc.step}: {exc}", file=sys.stderr)
        if exc.report is not None:
            print(f"last report: {exc.report}", file=sys.stderr)
        return EXIT_NUMERIC
    doc = harness.write_run_artifacts(cfg, result, out_dir, text)
    print(f"{cfg['run']['run_id']}: " + " ".join(f"{k}={doc[k]:.2f}" for k in metrics.SCORE_FIELDS))
    print(f"artifacts in {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        spec, draws, teacher_path = C.load_eval(args.eval_config)
    except C.ConfigError as exc:
        return _config_error(exc)
    teacher_path = args.teacher or teacher_path
    try:
        student = load_checkpoint(args.checkpoint)
        teacher = load_checkpoint(teacher_path) if teacher_path else student
        data = load_jsonl(args.data)
    except (DatasetError, ContractViolation, OSError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    num_classes = student.config.num_classes
    if data.num_classes is not None and data.num_classes != num_classes:
        print(f"class-count mismatch: checkpoint has {num_classes} classes, "
              f"data has {data.num_classes}", file=sys.stderr)
        return EXIT_CONFIG
    if teacher.config.num_classes != num_classes:
        print("class-count mismatch between checkpoint and reference", file=sys.stderr)
        return EXIT_CONFIG
    if len(data) == 0:
        print("input error: evaluation set is empty", file=sys.stderr)
        return EXIT_CONFIG
    eval_set = (student.encode_batch(data.texts), data.labels)
    try:
        scores = metrics.evaluate(student, teacher, eval_set, spec, draws)
    except NumericOverflowError as exc:
        print(f"numeric abort during evaluation: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    doc = metrics.scores_document(scores, Path(args.checkpoint).stem, "", spec, draws)
    if args.out:
        metrics.write_scores_json(doc, args.out)
    else:
        import json
        print(json.dumps(doc, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    try:
        base, _ = C.load(args.config)
        values = parse_values(args.values)
        rows = harness.sweep(base, args.axis, values, args.repeats, args.workers)
    except C.ConfigError as exc:
        return _config_error(exc)
    harness.write_sweep_csv(rows, args.out)
    failed = [r for r in rows if r["status"] == "failed"]
    for row in rows:
        if row["repeat"] == "mean":
            print(f"{args.axis}={row['value']}: " +
                  " ".join(f"{k}={row[k]:.2f}" for k in metrics.SCORE_FIELDS))
    if failed:
        print(f"{len(failed)} sweep point(s) failed; see {args.out}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safekd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="pre-train a teacher, fine-tune a student, score it")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (default: run.output_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a JSONL dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--eval-config", required=True)
    p.add_argument("--teacher", help="reference checkpoint for kd_alignment "
                                     "(default: teacher_checkpoint from the eval config, "
                                     "else the checkpoint itself)")
    p.add_argument("--out", help="write scores JSON here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid over one axis with repeats, written to CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=sorted(C.AXES))
    p.add_argument("--values", required=True, help="comma-separated grid, e.g. 0,0.5,1")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=None,
                   help=f"process pool size (default: ${harness.WORKERS_ENV} or 1)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
