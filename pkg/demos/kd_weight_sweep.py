"""Sweep the distillation weight on the reference config and write a CSV.

    SAFEKD_WORKERS=4 python3 demos/kd_weight_sweep.py [repeats]

Pass --plot after the repeat count to also save a PNG (needs matplotlib).
"""

import sys
from pathlib import Path

from safekd import config as C
from safekd import harness

ROOT = Path(__file__).resolve().parent.parent
GRID = [0.0, 0.5, 1.0, 2.0, 4.0]

repeats = int(sys.argv[1]) if len(sys.argv) > 1 else 3
base, _ = C.load(ROOT / "configs" / "reference.toml")
rows = harness.sweep(base, "kd_weight", GRID, repeats)
out = ROOT / "runs" / "kd_weight.csv"
out.parent.mkdir(parents=True, exist_ok=True)
harness.write_sweep_csv(rows, out)

means = [r for r in rows if r["repeat"] == "mean"]
for r in means:
    print(f"w={r['value']:<4} kd_alignment={r['kd_alignment']:.2f} "
          f"noise_robustness={r['noise_robustness']:.2f}")
print(f"wrote {out}")

if "--plot" in sys.argv:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    for key in ("kd_alignment", "noise_robustness"):
        ax.plot(GRID, [r[key] for r in means], marker="o", label=key)
    ax.set_xlabel("distillation weight")
    ax.set_ylabel("score")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out.with_suffix(".png"), dpi=120)
