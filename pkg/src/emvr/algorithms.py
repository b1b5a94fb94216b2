"""Optimizers on the statistic space.

Seven routines share one trace/recording layer:

* :func:`run_em` — full-batch EM.
* :func:`run_online_em` — stochastic approximation with minibatch E-steps.
* :func:`run_iem` — incremental EM with a per-sample statistic store.
* :func:`run_fiem` — SAGA-style control variate over that store.
* :func:`run_sem_vr` — SVRG-style anchor control variate with nested loops.
* :func:`run_spider_em` — path-integrated difference estimator, nested loops.
* :func:`run_spider_em_cv` — the same sequence written with an explicit,
  recursively accumulated control variate.
* :func:`run_spider_em_pl` — the restart variant with a random inner length.

Every run owns its statistic vector, sampler and counters; divergence
(an inadmissible statistic or a non-finite entry) marks the trace instead
of raising.  Checkpoint metrics (objective, squared mean-field norm) cost
a full data pass and are charged to a separate monitor counter so the
algorithmic accounting stays comparable across methods.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .core import (Dataset, DomainError, MinibatchSampler, Model,
                   OracleCounters, full_stats, minibatch_stats, mstep)

STATUS_COMPLETED = "completed"
STATUS_HIT = "hit-eps"
STATUS_STOPPED = "stopped"
STATUS_DIVERGED = "diverged"


class StepSchedule:
    """Positive step sizes gamma_1, gamma_2, ... indexed by update number."""

    def __init__(self, kind: str, value):
        self.kind = kind
        self.value = value
        if kind == "constant":
            if value < 0:
                raise ValueError("constant step size must be nonnegative")
        elif kind == "inverse-sqrt":
            if value <= 0:
                raise ValueError("inverse-sqrt coefficient must be positive")
        elif kind == "table":
            self.value = np.asarray(value, dtype=np.float64)
            if self.value.ndim != 1 or (self.value < 0).any():
                raise ValueError("step table must be 1-d and nonnegative")
        else:
            raise ValueError(f"unknown schedule kind {kind!r}")

    @classmethod
    def constant(cls, gamma: float) -> "StepSchedule":
        return cls("constant", float(gamma))

    @classmethod
    def inverse_sqrt(cls, c: float) -> "StepSchedule":
        """gamma_k = c / sqrt(k)."""
        return cls("inverse-sqrt", float(c))

    @classmethod
    def from_table(cls, values) -> "StepSchedule":
        return cls("table", values)

    def __call__(self, k: int) -> float:
        if k < 1:
            raise ValueError("step index starts at 1")
        if self.kind == "constant":
            return self.value
        if self.kind == "inverse-sqrt":
            return self.value / np.sqrt(k)
        if k > self.value.size:
            raise ValueError(f"step table exhausted at k={k}")
        return float(self.value[k - 1])


def theoretical_step_size(L: float, v_min: float, v_max: float, L_grad_w: float,
                          k_in: int, b: int) -> tuple[float, float]:
    """Constant step size from the convergence analysis.

    Returns ``(gamma, mu_star)`` with
    ``mu_star = v_max sqrt(k_in / b) + L_grad_w / (2 L)`` and
    ``gamma = v_min / (2 mu_star L)``.  The curvature and spectrum bounds
    are caller-supplied; nothing estimates them.
    """
    for name, val in [("L", L), ("v_min", v_min), ("v_max", v_max),
                      ("L_grad_w", L_grad_w), ("k_in", k_in), ("b", b)]:
        if val <= 0:
            raise ValueError(f"{name} must be positive, got {val}")
    mu_star = v_max * np.sqrt(k_in / b) + L_grad_w / (2.0 * L)
    alpha_star = v_min / (2.0 * mu_star)
    return alpha_star / L, float(mu_star)


@dataclass
class TraceRecord:
    phase: str
    t: int
    k: int
    tau: int
    epoch: float
    objective: float
    h_sq: float
    ce: int
    mstep: int
    wall_ms: float


@dataclass
class RunTrace:
    """Per-checkpoint metrics and terminal accounting of one run."""

    algorithm: str
    n: int
    batch_size: int | None = None
    k_in: int | None = None
    k_out: int | None = None
    k_max: int | None = None
    records: list[TraceRecord] = field(default_factory=list)
    snapshots: list[tuple[str, int, int, np.ndarray]] = field(default_factory=list)
    status: str = STATUS_COMPLETED
    counters: OracleCounters = field(default_factory=OracleCounters)
    monitor: OracleCounters = field(default_factory=OracleCounters)
    s_final: np.ndarray | None = None
    hit: tuple[int, int, int] | None = None      # (t, k, tau) of the first eps-crossing
    diverged_at: tuple[int, int, int] | None = None
    xi: list[int] = field(default_factory=list)  # realized inner lengths (restart variant)

    def final_record(self) -> TraceRecord:
        return self.records[-1]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def snapshot_map(self) -> dict[tuple[int, int], np.ndarray]:
        return {(t, k): s for _, t, k, s in self.snapshots}


class _Recorder:
    """Checkpoint bookkeeping shared by every optimizer.

    ``metric_mode``: "epoch" records whenever the epoch counter crosses an
    integer, "update" records after every statistic update, "none" records
    only the initial and final states.  Metric evaluation charges the
    monitor counters, never the algorithmic ones.
    """

    def __init__(self, model: Model, data: Dataset, trace: RunTrace, *,
                 metric_mode: str = "epoch", compute_objective: bool = True,
                 epsilon: float | None = None, snapshot_mode: str = "none",
                 callback=None, phase: str | None = None):
        if metric_mode not in ("epoch", "update", "none"):
            raise ValueError(f"unknown metric_mode {metric_mode!r}")
        if snapshot_mode not in ("none", "checkpoint", "every-update"):
            raise ValueError(f"unknown snapshot_mode {snapshot_mode!r}")
        self.model = model
        self.data = data
        self.trace = trace
        self.metric_mode = metric_mode
        self.compute_objective = compute_objective
        self.epsilon = epsilon
        self.snapshot_mode = snapshot_mode
        self.callback = callback
        self.phase = phase or trace.algorithm
        self._next_epoch = 1.0
        self._t0 = time.perf_counter()

    def snapshot(self, t: int, k: int, s: np.ndarray) -> None:
        if self.snapshot_mode == "every-update":
            self.trace.snapshots.append((self.phase, t, k, s.copy()))

    def _metrics(self, s: np.ndarray) -> tuple[float, float]:
        mon = self.trace.monitor
        params = mstep(self.model, s, mon)
        sbar, w = self.model.checkpoint_stats(self.data, params,
                                              want_nll=self.compute_objective)
        mon.ce += self.data.n
        h_sq = float(((sbar - s) ** 2).sum())
        return w, h_sq

    def checkpoint(self, t: int, k: int, tau: int, epoch: float, s: np.ndarray,
                   force: bool = False) -> str | None:
        """Record metrics if due; returns "hit"/"stop" when the run should end."""
        due = force or self.metric_mode == "update" or (
            self.metric_mode == "epoch" and epoch >= self._next_epoch - 1e-9)
        if self.metric_mode == "epoch" and epoch >= self._next_epoch - 1e-9:
            self._next_epoch = np.floor(epoch + 1e-9) + 1.0
        if not due:
            return None
        tr = self.trace
        if tr.records and tr.records[-1].tau == tau and tr.records[-1].phase == self.phase \
                and tr.records[-1].t == t and tr.records[-1].k == k:
            return None
        w, h_sq = self._metrics(s)
        if not np.isfinite(h_sq) or (self.compute_objective and not np.isfinite(w)):
            raise DomainError("non-finite checkpoint metric", violation="non-finite")
        wall = (time.perf_counter() - self._t0) * 1e3
        tr.records.append(TraceRecord(self.phase, t, k, tau, epoch, w, h_sq,
                                      tr.counters.ce, tr.counters.mstep, wall))
        if self.snapshot_mode == "checkpoint":
            tr.snapshots.append((self.phase, t, k, s.copy()))
        # the stopping rule examines iterates produced by updates, so the
        # pre-update state at tau=0 never hits
        if self.epsilon is not None and tau >= 1 and h_sq <= self.epsilon and tr.hit is None:
            tr.hit = (t, k, tau)
            return "hit"
        if self.callback is not None:
            view = {"ce": tr.counters.ce, "mstep": tr.counters.mstep,
                    "monitor_ce": tr.monitor.ce, "monitor_mstep": tr.monitor.mstep}
            if self.callback(self.phase, t, k, s.copy(), view) is False:
                return "stop"
        return None


def _check_start(model: Model, s_init) -> np.ndarray:
    s = np.array(s_init, dtype=np.float64)
    if s.shape != (model.stat_dim,):
        raise ValueError(f"starting statistics must have shape ({model.stat_dim},)")
    problem = model.domain_check(s)
    if problem is not None:
        raise DomainError(f"starting statistics inadmissible: {problem}", violation=problem)
    return s


def _finish(trace: RunTrace, outcome: str | None, s: np.ndarray) -> RunTrace:
    if outcome == "hit":
        trace.status = STATUS_HIT
    elif outcome == "stop":
        trace.status = STATUS_STOPPED
    trace.s_final = s.copy()
    return trace


def _diverged(trace: RunTrace, t: int, k: int, tau: int, s: np.ndarray) -> RunTrace:
    trace.status = STATUS_DIVERGED
    trace.diverged_at = (t, k, tau)
    trace.s_final = s.copy()
    return trace


def _bad(s: np.ndarray) -> bool:
    return not np.isfinite(s).all()


def run_em(model: Model, data: Dataset, s_init, k_max: int, *,
           metric_mode: str = "epoch", compute_objective: bool = True,
           epsilon: float | None = None, snapshot_mode: str = "none",
           callback=None) -> RunTrace:
    """Full-batch EM: each update replaces the statistics by their exact
    refit average.  Costs n conditional expectations and one M-step per
    update (plus the same once for the initial refit)."""
    s = _check_start(model, s_init)
    trace = RunTrace("em", data.n, k_max=k_max)
    rec = _Recorder(model, data, trace, metric_mode=metric_mode,
                    compute_objective=compute_objective, epsilon=epsilon,
                    snapshot_mode=snapshot_mode, callback=callback)
    pos = (1, 0, 0)
    try:
        rec.snapshot(1, -1, s)
        s = full_stats(model, data, mstep(model, s, trace.counters), trace.counters)
        rec.snapshot(1, 0, s)
        out = rec.checkpoint(1, 0, 0, 0.0, s, force=True)
        for k in range(1, k_max + 1):
            if out:
                break
            pos = (1, k, k)
            s = full_stats(model, data, mstep(model, s, trace.counters), trace.counters)
            if _bad(s):
                return _diverged(trace, *pos, s)
            rec.snapshot(1, k, s)
            out = rec.checkpoint(1, k, k, float(k), s, force=(k == k_max))
    except DomainError:
        return _diverged(trace, *pos, s)
    return _finish(trace, out, s)


def run_online_em(model: Model, data: Dataset, s_init, sampler: MinibatchSampler,
                  schedule: StepSchedule, k_max: int, *,
                  metric_mode: str = "epoch", compute_objective: bool = True,
                  epsilon: float | None = None, snapshot_mode: str = "none",
                  callback=None) -> RunTrace:
    """Stochastic-approximation EM: relax the statistics toward a minibatch
    refit average with step gamma_k.  One minibatch E-step and one M-step
    per update, after an initial full refit."""
    s = _check_start(model, s_init)
    n, b = data.n, sampler.batch_size
    trace = RunTrace("online-em", n, batch_size=b, k_max=k_max)
    rec = _Recorder(model, data, trace, metric_mode=metric_mode,
                    compute_objective=compute_objective, epsilon=epsilon,
                    snapshot_mode=snapshot_mode, callback=callback)
    pos = (1, 0, 0)
    try:
        rec.snapshot(1, -1, s)
        s = full_stats(model, data, mstep(model, s, trace.counters), trace.counters)
        rec.snapshot(1, 0, s)
        out = rec.checkpoint(1, 0, 0, 0.0, s, force=True)
        selections = 0
        for k in range(1, k_max + 1):
            if out:
                break
            pos = (1, k, k)
            batch = sampler.sample(n)
            sb = minibatch_stats(model, data, batch,
                                 mstep(model, s, trace.counters), trace.counters)
            s = s + schedule(k) * (sb - s)
            if _bad(s):
                return _diverged(trace, *pos, s)
            selections += b
            rec.snapshot(1, k, s)
            out = rec.checkpoint(1, k, k, selections / n, s, force=(k == k_max))
    except DomainError:
        return _diverged(trace, *pos, s)
    return _finish(trace, out, s)


class PerSampleStatStore:
    """Per-sample statistic rows plus their incrementally maintained mean.

    Batch updates deduplicate indices so the running mean stays the exact
    arithmetic mean of the stored rows up to accumulation error;
    :meth:`exact_mean` recomputes it from scratch for verification.
    """

    def __init__(self, rows: np.ndarray, max_bytes: int = 2 << 30):
        if rows.nbytes > max_bytes:
            raise ValueError(
                f"per-sample store needs {rows.nbytes} bytes, over the {max_bytes} cap")
        self.rows = rows
        self.mean = rows.sum(axis=0) / rows.shape[0]

    def update(self, indices: np.ndarray, new_rows: np.ndarray) -> None:
        uniq, first = np.unique(indices, return_index=True)
        fresh = new_rows[first]
        delta = fresh - self.rows[uniq]
        self.rows[uniq] = fresh
        self.mean = self.mean + delta.sum(axis=0) / self.rows.shape[0]

    def batch_mean(self, indices: np.ndarray) -> np.ndarray:
        """Multiset average of stored rows over a batch (duplicates count)."""
        return self.rows[indices].sum(axis=0) / indices.size

    def exact_mean(self) -> np.ndarray:
        return self.rows.sum(axis=0) / self.rows.shape[0]


def _init_store(model: Model, data: Dataset, s: np.ndarray,
                counters: OracleCounters, max_bytes: int) -> PerSampleStatStore:
    params = mstep(model, s, counters)
    rows = model.sbar_rows(data, None, params).copy()
    counters.ce += data.n
    return PerSampleStatStore(rows, max_bytes=max_bytes)


def run_iem(model: Model, data: Dataset, s_init, sampler: MinibatchSampler,
            schedule: StepSchedule | None = None, k_max: int = 0, *,
            max_store_bytes: int = 2 << 30, metric_mode: str = "epoch",
            compute_objective: bool = True, epsilon: float | None = None,
            snapshot_mode: str = "none", callback=None) -> RunTrace:
    """Incremental EM: refresh the stored per-sample statistics on each
    batch and track their mean.  Default step size is 1 (the statistics
    equal the store mean).  Memory is n*q floats, capped."""
    if schedule is None:
        schedule = StepSchedule.constant(1.0)
    s = _check_start(model, s_init)
    n, b = data.n, sampler.batch_size
    trace = RunTrace("iem", n, batch_size=b, k_max=k_max)
    rec = _Recorder(model, data, trace, metric_mode=metric_mode,
                    compute_objective=compute_objective, epsilon=epsilon,
                    snapshot_mode=snapshot_mode, callback=callback)
    pos = (1, 0, 0)
    try:
        rec.snapshot(1, -1, s)
        store = _init_store(model, data, s, trace.counters, max_store_bytes)
        s = store.mean.copy()
        rec.snapshot(1, 0, s)
        out = rec.checkpoint(1, 0, 0, 0.0, s, force=True)
        selections = 0
        for k in range(1, k_max + 1):
            if out:
                break
            pos = (1, k, k)
            batch = np.sort(sampler.sample(n))
            params = mstep(model, s, trace.counters)
            rows = model.sbar_rows(data, batch, params)
            trace.counters.ce += batch.size
            store.update(batch, rows)
            s = s + schedule(k) * (store.mean - s)
            if _bad(s):
                return _diverged(trace, *pos, s)
            selections += b
            rec.snapshot(1, k, s)
            out = rec.checkpoint(1, k, k, selections / n, s, force=(k == k_max))
    except DomainError:
        return _diverged(trace, *pos, s)
    return _finish(trace, out, s)


def run_fiem(model: Model, data: Dataset, s_init, sampler: MinibatchSampler,
             sampler_extra: MinibatchSampler, schedule: StepSchedule, k_max: int, *,
             max_store_bytes: int = 2 << 30, metric_mode: str = "epoch",
             compute_objective: bool = True, epsilon: float | None = None,
             snapshot_mode: str = "none", callback=None) -> RunTrace:
    """Incremental EM with a store-based control variate.

    Each update refreshes the store on one batch, then steps along a second,
    independent batch direction corrected by ``store mean - store batch
    mean``, which keeps the step unbiased for the exact mean field.
    Costs 2b conditional expectations and one M-step per update."""
    s = _check_start(model, s_init)
    n, b = data.n, sampler.batch_size
    trace = RunTrace("fiem", n, batch_size=b, k_max=k_max)
    rec = _Recorder(model, data, trace, metric_mode=metric_mode,
                    compute_objective=compute_objective, epsilon=epsilon,
                    snapshot_mode=snapshot_mode, callback=callback)
    pos = (1, 0, 0)
    try:
        rec.snapshot(1, -1, s)
        store = _init_store(model, data, s, trace.counters, max_store_bytes)
        s = store.mean.copy()
        rec.snapshot(1, 0, s)
        out = rec.checkpoint(1, 0, 0, 0.0, s, force=True)
        selections = 0
        for k in range(1, k_max + 1):
            if out:
                break
            pos = (1, k, k)
            params = mstep(model, s, trace.counters)
            batch = np.sort(sampler.sample(n))
            rows = model.sbar_rows(data, batch, params)
            trace.counters.ce += batch.size
            store.update(batch, rows)
            batch2 = np.sort(sampler_extra.sample(n))
            sb2 = minibatch_stats(model, data, batch2, params, trace.counters)
            cv = store.mean - store.batch_mean(batch2)
            s = s + schedule(k) * (sb2 - s + cv)
            if _bad(s):
                return _diverged(trace, *pos, s)
            selections += b
            rec.snapshot(1, k, s)
            out = rec.checkpoint(1, k, k, selections / n, s, force=(k == k_max))
    except DomainError:
        return _diverged(trace, *pos, s)
    return _finish(trace, out, s)


def _outer_gamma(schedule: StepSchedule, outer_gamma, tau: int) -> float:
    return schedule(tau) if outer_gamma is None else float(outer_gamma)


def run_sem_vr(model: Model, data: Dataset, s_init, sampler: MinibatchSampler,
               schedule: StepSchedule, k_out: int, k_in: int, *,
               outer_gamma: float | None = None, metric_mode: str = "epoch",
               compute_objective: bool = True, epsilon: float | None = None,
               snapshot_mode: str = "none", callback=None) -> RunTrace:
    """Nested-loop EM with an anchor control variate.

    Each outer loop refits the full statistics at the current anchor, then
    runs k_in - 1 inner steps whose minibatch direction is corrected by
    ``full anchor average - batch anchor average`` (zero mean by
    construction); the outer refresh itself is a damped update.  Inner
    updates cost 2b conditional expectations and one M-step; the refresh
    costs n and one."""
    if k_in < 2:
        raise ValueError("k_in must be at least 2")
    s = _check_start(model, s_init)
    n, b = data.n, sampler.batch_size
    trace = RunTrace("sem-vr", n, batch_size=b, k_in=k_in, k_out=k_out)
    rec = _Recorder(model, data, trace, metric_mode=metric_mode,
                    compute_objective=compute_objective, epsilon=epsilon,
                    snapshot_mode=snapshot_mode, callback=callback)
    pos = (1, 0, 0)
    try:
        rec.snapshot(1, -1, s)
        params_anchor = mstep(model, s, trace.counters)
        s_anchor_full = full_stats(model, data, params_anchor, trace.counters)
        rec.snapshot(1, 0, s)
        out = rec.checkpoint(1, 0, 0, 0.0, s, force=True)
        selections = 0
        for t in range(1, k_out + 1):
            if out:
                break
            for k in range(k_in - 1):
                batch = np.sort(sampler.sample(n))
                params = mstep(model, s, trace.counters)
                sb = minibatch_stats(model, data, batch, params, trace.counters)
                sb_anchor = minibatch_stats(model, data, batch, params_anchor,
                                            trace.counters)
                tau = (t - 1) * k_in + k + 1
                pos = (t, k + 1, tau)
                s = s + schedule(tau) * (sb - s + (s_anchor_full - sb_anchor))
                if _bad(s):
                    return _diverged(trace, t, k + 1, tau, s)
                selections += b
                rec.snapshot(t, k + 1, s)
                out = rec.checkpoint(t, k + 1, tau, selections / n, s)
                if out:
                    break
            if out:
                break
            rec.snapshot(t + 1, -1, s)
            pos = (t + 1, 0, t * k_in)
            params_anchor = mstep(model, s, trace.counters)
            s_anchor_full = full_stats(model, data, params_anchor, trace.counters)
            tau = t * k_in
            s = s + _outer_gamma(schedule, outer_gamma, tau) * (s_anchor_full - s)
            if _bad(s):
                return _diverged(trace, t + 1, 0, tau, s)
            selections += n
            rec.snapshot(t + 1, 0, s)
            out = rec.checkpoint(t + 1, 0, tau, selections / n, s, force=(t == k_out))
    except DomainError:
        return _diverged(trace, *pos, s)
    return _finish(trace, out, s)


def run_spider_em(model: Model, data: Dataset, s_init, sampler: MinibatchSampler,
                  schedule: StepSchedule, k_out: int, k_in: int, *,
                  outer_gamma: float | None = None, metric_mode: str = "epoch",
                  compute_objective: bool = True, epsilon: float | None = None,
                  snapshot_mode: str = "none", callback=None) -> RunTrace:
    """Nested-loop EM with a path-integrated difference estimator.

    The running estimate of the full refit average is advanced by the
    difference of the batch averages at the current and previous iterates,
    and reset by a full pass at every outer refresh.  Inner updates cost
    2b conditional expectations and one M-step; the refresh costs n and
    one, followed by a damped update."""
    if k_in < 2:
        raise ValueError("k_in must be at least 2")
    s = _check_start(model, s_init)
    n, b = data.n, sampler.batch_size
    trace = RunTrace("spider-em", n, batch_size=b, k_in=k_in, k_out=k_out)
    rec = _Recorder(model, data, trace, metric_mode=metric_mode,
                    compute_objective=compute_objective, epsilon=epsilon,
                    snapshot_mode=snapshot_mode, callback=callback)
    pos = (1, 0, 0)
    try:
        rec.snapshot(1, -1, s)
        params_prev = mstep(model, s, trace.counters)   # refit at the lagged iterate
        s_est = full_stats(model, data, params_prev, trace.counters)
        rec.snapshot(1, 0, s)
        out = rec.checkpoint(1, 0, 0, 0.0, s, force=True)
        selections = 0
        for t in range(1, k_out + 1):
            if out:
                break
            for k in range(k_in - 1):
                batch = np.sort(sampler.sample(n))
                params = mstep(model, s, trace.counters)
                s_est = s_est + (
                    minibatch_stats(model, data, batch, params, trace.counters)
                    - minibatch_stats(model, data, batch, params_prev, trace.counters))
                tau = (t - 1) * k_in + k + 1
                pos = (t, k + 1, tau)
                s = s + schedule(tau) * (s_est - s)
                params_prev = params
                if _bad(s):
                    return _diverged(trace, t, k + 1, tau, s)
                selections += b
                rec.snapshot(t, k + 1, s)
                out = rec.checkpoint(t, k + 1, tau, selections / n, s)
                if out:
                    break
            if out:
                break
            rec.snapshot(t + 1, -1, s)
            pos = (t + 1, 0, t * k_in)
            params_prev = mstep(model, s, trace.counters)
            s_est = full_stats(model, data, params_prev, trace.counters)
            tau = t * k_in
            s = s + _outer_gamma(schedule, outer_gamma, tau) * (s_est - s)
            if _bad(s):
                return _diverged(trace, t + 1, 0, tau, s)
            selections += n
            rec.snapshot(t + 1, 0, s)
            out = rec.checkpoint(t + 1, 0, tau, selections / n, s, force=(t == k_out))
    except DomainError:
        return _diverged(trace, *pos, s)
    return _finish(trace, out, s)


def run_spider_em_cv(model: Model, data: Dataset, s_init, sampler: MinibatchSampler,
                     schedule: StepSchedule, k_out: int, k_in: int, *,
                     outer_gamma: float | None = None, metric_mode: str = "epoch",
                     compute_objective: bool = True, epsilon: float | None = None,
                     snapshot_mode: str = "none", callback=None) -> RunTrace:
    """The same sequence as :func:`run_spider_em`, written as an online
    update plus an explicit control variate accumulated across the inner
    loop and reset to zero at each outer refresh.  Identical batch streams
    give elementwise-identical trajectories up to float associativity."""
    if k_in < 2:
        raise ValueError("k_in must be at least 2")
    s = _check_start(model, s_init)
    n, b = data.n, sampler.batch_size
    trace = RunTrace("spider-em-cv", n, batch_size=b, k_in=k_in, k_out=k_out)
    rec = _Recorder(model, data, trace, metric_mode=metric_mode,
                    compute_objective=compute_objective, epsilon=epsilon,
                    snapshot_mode=snapshot_mode, callback=callback)
    pos = (1, 0, 0)
    try:
        rec.snapshot(1, -1, s)
        params_prev = mstep(model, s, trace.counters)
        s_last = full_stats(model, data, params_prev, trace.counters)  # last batch refit
        rec.snapshot(1, 0, s)
        out = rec.checkpoint(1, 0, 0, 0.0, s, force=True)
        selections = 0
        for t in range(1, k_out + 1):
            if out:
                break
            cv = np.zeros(model.stat_dim)
            for k in range(k_in - 1):
                batch = np.sort(sampler.sample(n))
                sb_old = minibatch_stats(model, data, batch, params_prev, trace.counters)
                cv = cv + s_last - sb_old
                params = mstep(model, s, trace.counters)
                s_last = minibatch_stats(model, data, batch, params, trace.counters)
                tau = (t - 1) * k_in + k + 1
                pos = (t, k + 1, tau)
                s = s + schedule(tau) * (s_last - s + cv)
                params_prev = params
                if _bad(s):
                    return _diverged(trace, t, k + 1, tau, s)
                selections += b
                rec.snapshot(t, k + 1, s)
                out = rec.checkpoint(t, k + 1, tau, selections / n, s)
                if out:
                    break
            if out:
                break
            rec.snapshot(t + 1, -1, s)
            pos = (t + 1, 0, t * k_in)
            params_prev = mstep(model, s, trace.counters)
            s_last = full_stats(model, data, params_prev, trace.counters)
            tau = t * k_in
            s = s + _outer_gamma(schedule, outer_gamma, tau) * (s_last - s)
            if _bad(s):
                return _diverged(trace, t + 1, 0, tau, s)
            selections += n
            rec.snapshot(t + 1, 0, s)
            out = rec.checkpoint(t + 1, 0, tau, selections / n, s, force=(t == k_out))
    except DomainError:
        return _diverged(trace, *pos, s)
    return _finish(trace, out, s)


def run_spider_em_pl(model: Model, data: Dataset, s_init, sampler: MinibatchSampler,
                     schedule: StepSchedule, k_out: int, k_in: int, rng, *,
                     metric_mode: str = "epoch", compute_objective: bool = True,
                     epsilon: float | None = None, snapshot_mode: str = "none",
                     callback=None) -> RunTrace:
    """Restart variant: each outer loop runs a uniformly random number of
    inner difference-estimator steps (1 to k_in - 1), then restarts from
    the last iterate with a fresh full refit and no damped outer step.
    ``rng`` drives only the inner-length draws."""
    if k_in < 2:
        raise ValueError("k_in must be at least 2")
    s = _check_start(model, s_init)
    n, b = data.n, sampler.batch_size
    trace = RunTrace("spider-em-pl", n, batch_size=b, k_in=k_in, k_out=k_out)
    rec = _Recorder(model, data, trace, metric_mode=metric_mode,
                    compute_objective=compute_objective, epsilon=epsilon,
                    snapshot_mode=snapshot_mode, callback=callback)
    pos = (1, 0, 0)
    try:
        rec.snapshot(1, -1, s)
        params_prev = mstep(model, s, trace.counters)
        s_est = full_stats(model, data, params_prev, trace.counters)
        rec.snapshot(1, 0, s)
        out = rec.checkpoint(1, 0, 0, 0.0, s, force=True)
        selections = 0
        tau = 0
        for t in range(1, k_out + 1):
            if out:
                break
            xi = int(rng.integers(1, k_in))
            trace.xi.append(xi)
            for k in range(xi):
                batch = np.sort(sampler.sample(n))
                params = mstep(model, s, trace.counters)
                s_est = s_est + (
                    minibatch_stats(model, data, batch, params, trace.counters)
                    - minibatch_stats(model, data, batch, params_prev, trace.counters))
                tau += 1
                pos = (t, k + 1, tau)
                s = s + schedule(tau) * (s_est - s)
                params_prev = params
                if _bad(s):
                    return _diverged(trace, t, k + 1, tau, s)
                selections += b
                rec.snapshot(t, k + 1, s)
                out = rec.checkpoint(t, k + 1, tau, selections / n, s)
                if out:
                    break
            if out:
                break
            # restart: next outer loop starts exactly at the last iterate
            pos = (t + 1, 0, tau)
            params_prev = mstep(model, s, trace.counters)
            s_est = full_stats(model, data, params_prev, trace.counters)
            selections += n
            rec.snapshot(t + 1, -1, s)
            rec.snapshot(t + 1, 0, s)
            out = rec.checkpoint(t + 1, 0, tau, selections / n, s, force=(t == k_out))
    except DomainError:
        return _diverged(trace, *pos, s)
    return _finish(trace, out, s)


def hybrid_warm_start(model: Model, data: Dataset, s_init, sampler: MinibatchSampler,
                      schedule: StepSchedule, warm_epochs: int, run_main, *,
                      metric_mode: str = "epoch", compute_objective: bool = True,
                      epsilon: float | None = None, snapshot_mode: str = "none",
                      callback=None) -> RunTrace:
    """Run stochastic-approximation EM for ``warm_epochs`` data passes, then
    hand the statistics (and the same sampler stream) to ``run_main(s,
    sampler)``.  The returned trace concatenates both phases with epoch
    offsets and a phase marker per record; counters add across phases.
    ``warm_epochs=0`` skips the warm phase entirely."""
    if warm_epochs < 0:
        raise ValueError("warm_epochs must be >= 0")
    if warm_epochs == 0:
        return run_main(np.asarray(s_init, dtype=np.float64), sampler)
    iters = warm_epochs * max(1, round(data.n / sampler.batch_size))
    warm = run_online_em(model, data, s_init, sampler, schedule, iters,
                         metric_mode=metric_mode, compute_objective=compute_objective,
                         epsilon=epsilon, snapshot_mode=snapshot_mode, callback=callback)
    for r in warm.records:
        r.phase = "warmup"
    warm.snapshots = [("warmup", t, k, s) for _, t, k, s in warm.snapshots]
    if warm.status in (STATUS_DIVERGED, STATUS_HIT, STATUS_STOPPED):
        return warm
    main = run_main(warm.s_final, sampler)
    tau0 = warm.records[-1].tau
    combined = RunTrace(f"warmup+{main.algorithm}", data.n,
                        batch_size=sampler.batch_size, k_in=main.k_in,
                        k_out=main.k_out, k_max=main.k_max)
    combined.records = list(warm.records)
    for r in main.records:
        if r.tau == 0 and combined.records and combined.records[-1].tau == tau0:
            continue  # the handoff state is already recorded by the warm phase
        combined.records.append(TraceRecord(r.phase, r.t, r.k, r.tau + tau0,
                                            r.epoch + warm_epochs, r.objective,
                                            r.h_sq, r.ce + warm.counters.ce,
                                            r.mstep + warm.counters.mstep, r.wall_ms))
    combined.snapshots = warm.snapshots + main.snapshots
    combined.status = main.status
    combined.counters = warm.counters + main.counters
    combined.monitor = warm.monitor + main.monitor
    combined.s_final = main.s_final
    combined.hit = main.hit
    combined.diverged_at = main.diverged_at
    combined.xi = main.xi
    return combined


def randomized_terminate(trace: RunTrace, rng) -> tuple[int, int, np.ndarray]:
    """Draw the randomized output iterate of a nested-loop trace.

    Picks outer index tau uniform on {1..k_out} and inner index xi uniform
    on {0..k_in-1}, independently of the trajectory, and returns
    ``(tau, xi, s)`` where s is the iterate one update *before* (tau, xi),
    read from the trace's per-update snapshots."""
    if trace.k_in is None or trace.k_out is None:
        raise ValueError("randomized termination needs a nested-loop trace")
    snaps = trace.snapshot_map()
    if not snaps:
        raise NotImplementedError("trace has no per-update snapshots; rerun with "
                                  "snapshot_mode='every-update'")
    t = int(rng.integers(1, trace.k_out + 1))
    xi = int(rng.integers(0, trace.k_in))
    key = (t, xi - 1)
    if key not in snaps:
        raise NotImplementedError(f"snapshot {key} missing; rerun with full cadence")
    return t, xi, snaps[key]
