"""Train one teacher/student pair on the tiny config and print its scores.

    python3 demos/quickstart.py
"""

from pathlib import Path

from safekd import config as C
from safekd import harness
from safekd.metrics import SCORE_FIELDS

ROOT = Path(__file__).resolve().parent.parent

cfg, text = C.load(ROOT / "configs" / "tiny.toml")
result = harness.run_experiment(cfg)
for name in SCORE_FIELDS:
    print(f"{name:>20}: {getattr(result.scores, name):6.2f}")

out = ROOT / "runs" / "quickstart"
harness.write_run_artifacts(cfg, result, out, text)
print(f"checkpoints, scores and test split written to {out}")
