"""Fine-tuning budget sweep plus an f64 vs emulated-bf16 comparison.

    python3 demos/budget_precision.py [repeats]
"""

import sys
from pathlib import Path

from safekd import config as C
from safekd import harness
from safekd.metrics import SCORE_FIELDS

ROOT = Path(__file__).resolve().parent.parent

repeats = int(sys.argv[1]) if len(sys.argv) > 1 else 2
base, _ = C.load(ROOT / "configs" / "budget.toml")
rows = harness.sweep(base, "budget_steps", [100, 300, 1000], repeats)
out = ROOT / "runs" / "budget.csv"
out.parent.mkdir(parents=True, exist_ok=True)
harness.write_sweep_csv(rows, out)
for r in rows:
    if r["repeat"] == "mean":
        print(f"steps={r['value']:<5} kd_alignment={r['kd_alignment']:.2f}")

at_1000 = C.with_axis(base, "budget_steps", 1000)
f64 = harness.run_experiment(at_1000, check=False).scores
bf16 = harness.run_experiment(C.with_axis(at_1000, "precision", "emulated-bf16"),
                              check=False).scores
print(f"{'score':>20} {'f64':>7} {'bf16':>7}")
for name in SCORE_FIELDS:
    print(f"{name:>20} {getattr(f64, name):7.2f} {getattr(bf16, name):7.2f}")
