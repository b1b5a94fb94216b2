"""The minibatch family on one problem, sharing the same batch stream.

Runs the plain stochastic-approximation update, the incremental store,
the store-corrected (SAGA-style) update, the anchor-corrected
(SVRG-style) nested loops and the path-integrated difference estimator,
all from the same start, and prints the per-epoch squared mean-field
norm.  The plain update stalls and fluctuates at its step-size noise
floor; every corrected method keeps decreasing at the same oracle budget.
"""

from emvr import (MinibatchSampler, PooledGmm, StepSchedule, run_fiem,
                  run_iem, run_online_em, run_sem_vr, run_spider_em)
from emvr.data import gen_multivariate_mixture
from emvr.gmm import init_kmeans

data = gen_multivariate_mixture(n=2000, g=3, p=2, separation=5.0, seed=1)
model = PooledGmm.from_data(3, data)
s0 = init_kmeans(model, data, seed=1)

b = 50
epochs = 30
per_epoch = data.n // b
gamma = StepSchedule.constant(5e-3)
stream = lambda: MinibatchSampler(b, seed=42)  # same stream for everyone

runs = {
    "online-em": run_online_em(model, data, s0, stream(), gamma, epochs * per_epoch),
    "iem": run_iem(model, data, s0, stream(), StepSchedule.constant(1.0),
                   epochs * per_epoch),
    "fiem": run_fiem(model, data, s0, stream(), MinibatchSampler(b, seed=99),
                     gamma, epochs * per_epoch),
    "sem-vr": run_sem_vr(model, data, s0, stream(), gamma,
                         k_out=epochs // 2, k_in=per_epoch + 1),
    "spider-em": run_spider_em(model, data, s0, stream(), gamma,
                               k_out=epochs // 2, k_in=per_epoch + 1),
}

print(f"{'epoch':>5} " + " ".join(f"{name:>11}" for name in runs))
grid = [5, 10, 20, 30]
for epoch in grid:
    row = []
    for trace in runs.values():
        h = [r.h_sq for r in trace.records if abs(r.epoch - epoch) < 1e-9]
        row.append(f"{h[0]:11.3e}" if h else " " * 11)
    print(f"{epoch:5d} " + " ".join(row))

print("\nterminal oracle cost (conditional expectations, M-steps):")
for name, trace in runs.items():
    print(f"  {name:10s} {trace.counters.ce:8d} {trace.counters.mstep:6d}")
