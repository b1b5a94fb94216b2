"""Hitting-time complexity against problem size, desk scale.

For each n, generate the scalar two-component mixture benchmark, run the
path-integrated method with batch size ceil(sqrt(n)/20) and a 0.01 step
until the squared mean-field norm first drops below 2.5e-5, and report
the median number of updates (flat in n) and of per-sample conditional
expectations beyond the first pass (growing like sqrt(n)).

A full-fidelity grid up to n = 100_000 with 20 trials runs in a couple of
minutes; the defaults here are lighter.
"""

import numpy as np

from emvr.harness import ExperimentConfig, estimate_complexity

cfg = ExperimentConfig(algorithms=("spider-em",), gamma=0.01)
n_grid = [1_000, 4_000, 16_000]
est = estimate_complexity(cfg, epsilon=2.5e-5, n_grid=n_grid, trials=8)

print(f"{'n':>7} {'b':>3} {'hit rate':>8} {'median updates':>15} {'median CE cost':>15}")
for row in est.rows:
    print(f"{row['n']:7d} {row['b']:3d} {row['hit_rate']:8.2f} "
          f"{row['kopt_median']:15.1f} {row['kce_median']:15.1f}")

kce = np.log([row["kce_median"] for row in est.rows])
slope = np.polyfit(np.log(n_grid), kce, 1)[0]
print(f"\nlog-log slope of the conditional-expectation cost: {slope:.3f} "
      "(about one half: square-root growth)")
