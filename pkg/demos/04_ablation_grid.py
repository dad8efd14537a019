"""Switch the grouping and scanning components on and off.

Every setting trains on the same folds with the same seed, so the deltas in
the table come from the toggles alone. Kept tiny on purpose; pass a real
cohort and more epochs to `groupsurv ablate` for meaningful numbers.

    python demos/04_ablation_grid.py
"""

import tempfile
from pathlib import Path

from groupsurv import ModelConfig, SynthConfig, TrainConfig, generate_cohort, run_ablation

work = Path(tempfile.mkdtemp(prefix="ablate-demo-"))
manifest = generate_cohort(SynthConfig(n_slides=60, patches_min=10, patches_max=40, dim=8, seed=5),
                           work / "cohort")
base = TrainConfig(epochs=2, accumulation_steps=4, lr=1e-3, model=ModelConfig(d_model=8, d_state=4, n_blocks=1))

rows = run_ablation(base, manifest, tables=("2a", "3e"), folds=[0, 1], out_dir=work / "runs")
print(f"{'table':6} {'setting':10} {'mean C':>7} {'delta':>7}")
for r in rows:
    delta = "" if r["delta_vs_base"] is None else f"{r['delta_vs_base']:+.3f}"
    print(f"{r['table']:6} {r['setting']:10} {r['mean']:7.3f} {delta:>7}")
print(f"table written to {work / 'runs' / 'ablation.csv'}")
