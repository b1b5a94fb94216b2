"""Experiment runner: configs, trace files, complexity estimation, summaries.

A run is fully determined by a config file and a seed; the manifest records
a hash of the canonical config so outputs are attributable.  Trace CSVs use
a fixed column schema (epoch, t, k, tau, W, h_sq_norm, ce_count,
mstep_count, wall_ms, status); wall_ms is the only column allowed to vary
between repetitions.
"""

from __future__ import annotations

import hashlib
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .algorithms import (RunTrace, StepSchedule, hybrid_warm_start, run_em,
                         run_fiem, run_iem, run_online_em, run_sem_vr,
                         run_spider_em, run_spider_em_cv, run_spider_em_pl)
from .core import (WITH_REPLACEMENT, WITHOUT_REPLACEMENT, Dataset,
                   MinibatchSampler)
from .data import gen_multivariate_mixture, gen_scalar_mixture, load_dataset
from .gmm import (PooledGmm, ScalarTwoGmm, ScalarTwoGmmParams,
                  init_kmeans, init_random_responsibility, stats_from_params)

ALGORITHMS = ("em", "iem", "online-em", "fiem", "sem-vr", "spider-em",
              "spider-em-cv", "spider-em-pl")
NESTED = ("sem-vr", "spider-em", "spider-em-cv", "spider-em-pl")
CSV_COLUMNS = ("epoch", "t", "k", "tau", "W", "h_sq_norm", "ce_count",
               "mstep_count", "wall_ms", "status")

# seed-stream tags: a second, independent minibatch stream and the
# restart-length stream must never collide with the shared batch stream
_EXTRA_STREAM_TAG = 1
_RESTART_STREAM_TAG = 2


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # model
    model_kind: str = "scalar2"           # scalar2 | gmm
    components: int = 2
    dim: int = 1
    weights: tuple = (0.2, 0.8)
    variance: float = 1.0
    # data
    data_kind: str = "scalar-mixture"     # scalar-mixture | multivariate-mixture | file
    n: int = 1000
    data_seed: int = 0
    means: tuple = (0.5, -0.5)
    separation: float = 6.0
    data_path: str = ""
    data_format: str = "csv"
    # init
    init_kind: str = "spread-means"       # spread-means | random-responsibility | kmeans
    init_seed: int = 0
    init_means: tuple | None = None
    # run
    algorithms: tuple = ("em",)
    seeds: tuple = (0,)
    batch_size: int | None = None
    k_in: int | None = None
    k_out: int | None = None
    k_max: int | None = None
    epochs: int | None = None
    epsilon: float | None = None
    warm_epochs: int = 0
    sampling: str = WITH_REPLACEMENT
    metric: str = "epoch"                 # epoch | update | none
    snapshot: str = "none"
    include_norm_const: bool = True
    jobs: int = 1
    max_divergence_rate: float = 0.5
    out_dir: str = "runs"
    # steps
    step_kind: str = "constant"
    gamma: float = 1.0
    step_coefficient: float = 1.0
    outer_gamma: float | None = None


def _parse_scalar(section: str, key: str, raw: str, kind):
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config(text: str) -> ExperimentConfig:
    """Parse the flat ``[section]`` / ``key = value`` config format."""
    cfg = ExperimentConfig()
    section = None
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in ("model", "data", "init", "run", "steps"):
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if (section, key) in seen:
            raise ConfigError(f"line {lineno}: duplicate key [{section}] {key}")
        seen[(section, key)] = lineno
        _apply_key(cfg, section, key, value)
    validate_config(cfg)
    return cfg


def _apply_key(cfg: ExperimentConfig, section: str, key: str, value: str) -> None:
    s = section
    if s == "model":
        if key == "kind":
            cfg.model_kind = value
        elif key == "components":
            cfg.components = _parse_scalar(s, key, value, int)
        elif key == "dim":
            cfg.dim = _parse_scalar(s, key, value, int)
        elif key == "weights":
            cfg.weights = tuple(float(v) for v in value.split())
        elif key == "variance":
            cfg.variance = _parse_scalar(s, key, value, float)
        else:
            raise ConfigError(f"[model] unknown key {key!r}")
    elif s == "data":
        if key == "kind":
            cfg.data_kind = value
        elif key == "n":
            cfg.n = _parse_scalar(s, key, value, int)
        elif key == "seed":
            cfg.data_seed = _parse_scalar(s, key, value, int)
        elif key == "means":
            cfg.means = tuple(float(v) for v in value.split())
        elif key == "separation":
            cfg.separation = _parse_scalar(s, key, value, float)
        elif key == "path":
            cfg.data_path = value
        elif key == "format":
            cfg.data_format = value
        else:
            raise ConfigError(f"[data] unknown key {key!r}")
    elif s == "init":
        if key == "kind":
            cfg.init_kind = value
        elif key == "seed":
            cfg.init_seed = _parse_scalar(s, key, value, int)
        elif key == "means":
            cfg.init_means = tuple(float(v) for v in value.split())
        else:
            raise ConfigError(f"[init] unknown key {key!r}")
    elif s == "run":
        if key == "algorithms":
            cfg.algorithms = tuple(v.strip() for v in value.replace(",", " ").split())
        elif key == "seeds":
            cfg.seeds = tuple(int(v) for v in value.replace(",", " ").split())
        elif key == "batch_size":
            cfg.batch_size = _parse_scalar(s, key, value, int)
        elif key in ("k_in", "k_out", "k_max", "epochs"):
            setattr(cfg, key, _parse_scalar(s, key, value, int))
        elif key == "epsilon":
            cfg.epsilon = _parse_scalar(s, key, value, float)
        elif key == "warm_epochs":
            cfg.warm_epochs = _parse_scalar(s, key, value, int)
        elif key == "sampling":
            cfg.sampling = value
        elif key == "metric":
            cfg.metric = value
        elif key == "snapshot":
            cfg.snapshot = value
        elif key == "include_norm_const":
            cfg.include_norm_const = _parse_scalar(s, key, value, bool)
        elif key == "jobs":
            cfg.jobs = _parse_scalar(s, key, value, int)
        elif key == "max_divergence_rate":
            cfg.max_divergence_rate = _parse_scalar(s, key, value, float)
        elif key == "out_dir":
            cfg.out_dir = value
        else:
            raise ConfigError(f"[run] unknown key {key!r}")
    elif s == "steps":
        if key == "kind":
            cfg.step_kind = value
        elif key == "gamma":
            cfg.gamma = _parse_scalar(s, key, value, float)
        elif key == "coefficient":
            cfg.step_coefficient = _parse_scalar(s, key, value, float)
        elif key == "outer_gamma":
            cfg.outer_gamma = _parse_scalar(s, key, value, float)
        else:
            raise ConfigError(f"[steps] unknown key {key!r}")


def validate_config(cfg: ExperimentConfig) -> None:
    if cfg.model_kind not in ("scalar2", "gmm"):
        raise ConfigError(f"[model] kind must be scalar2 or gmm, got {cfg.model_kind!r}")
    if cfg.data_kind not in ("scalar-mixture", "multivariate-mixture", "file"):
        raise ConfigError(f"[data] unknown kind {cfg.data_kind!r}")
    if cfg.data_kind == "file" and not cfg.data_path:
        raise ConfigError("[data] kind=file requires a path")
    if cfg.sampling not in (WITH_REPLACEMENT, WITHOUT_REPLACEMENT):
        raise ConfigError(f"[run] sampling must be {WITH_REPLACEMENT} or "
                          f"{WITHOUT_REPLACEMENT}, got {cfg.sampling!r}")
    if cfg.metric not in ("epoch", "update", "none"):
        raise ConfigError(f"[run] metric must be epoch, update or none, got {cfg.metric!r}")
    if not cfg.algorithms:
        raise ConfigError("[run] algorithms must not be empty")
    for algo in cfg.algorithms:
        if algo not in ALGORITHMS:
            raise ConfigError(f"[run] unknown algorithm {algo!r}")
        if algo in NESTED:
            if cfg.epochs is None and (cfg.k_in is None or cfg.k_out is None):
                raise ConfigError(f"[run] {algo} needs k_in and k_out (or epochs)")
        else:
            if cfg.epochs is None and cfg.k_max is None:
                raise ConfigError(f"[run] {algo} needs k_max (or epochs)")
        if algo != "em" and cfg.batch_size is None:
            raise ConfigError(f"[run] {algo} needs batch_size")
    if cfg.k_in is not None and all(a not in NESTED for a in cfg.algorithms):
        raise ConfigError("[run] k_in given but no nested-loop algorithm requested")
    if not cfg.seeds:
        raise ConfigError("[run] seeds must not be empty")
    if cfg.warm_epochs < 0:
        raise ConfigError("[run] warm_epochs must be >= 0")
    if cfg.model_kind == "scalar2" and cfg.data_kind == "multivariate-mixture":
        raise ConfigError("[data] scalar2 model needs 1-d data")
    if cfg.model_kind == "gmm" and cfg.init_kind == "spread-means":
        raise ConfigError("[init] spread-means applies to the scalar2 model only; "
                          "use random-responsibility or kmeans")


def canonical_config(cfg: ExperimentConfig) -> str:
    """Stable one-line-per-field rendering used for hashing and manifests."""
    pairs = []
    for name in sorted(vars(cfg)):
        pairs.append(f"{name} = {getattr(cfg, name)!r}")
    return "\n".join(pairs) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_config(cfg).encode()).hexdigest()[:16]


def seed_offset() -> int:
    """CI shake-out hook: integer added to every seed the harness derives."""
    return int(os.environ.get("EM_SEED_OFFSET", "0"))


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    off = seed_offset()
    if cfg.data_kind == "scalar-mixture":
        return gen_scalar_mixture(cfg.n, cfg.weights, cfg.means, cfg.variance,
                                  seed=cfg.data_seed + off)
    if cfg.data_kind == "multivariate-mixture":
        return gen_multivariate_mixture(cfg.n, cfg.components, cfg.dim,
                                        cfg.separation, seed=cfg.data_seed + off)
    return load_dataset(cfg.data_path, fmt=cfg.data_format)


def build_model(cfg: ExperimentConfig, data: Dataset):
    if cfg.model_kind == "scalar2":
        return ScalarTwoGmm.from_data(data, weights=cfg.weights, variance=cfg.variance,
                                      include_norm_const=cfg.include_norm_const)
    return PooledGmm.from_data(cfg.components, data,
                               include_norm_const=cfg.include_norm_const)


def initial_stats(cfg: ExperimentConfig, model, data: Dataset) -> np.ndarray:
    off = seed_offset()
    if cfg.init_kind == "random-responsibility":
        return init_random_responsibility(model, data, cfg.init_seed + off)
    if cfg.init_kind == "kmeans":
        return init_kmeans(model, data, cfg.init_seed + off)
    if cfg.init_kind == "spread-means":
        if not isinstance(model, ScalarTwoGmm):
            raise ConfigError("[init] spread-means applies to the scalar2 model only")
        if cfg.init_means is not None:
            mu = np.asarray(cfg.init_means, dtype=np.float64)
        else:
            y = data.values[:, 0]
            mu = np.array([y.mean() + y.std(), y.mean() - y.std()])
        return stats_from_params(model, data, ScalarTwoGmmParams(mu=mu))
    raise ConfigError(f"[init] unknown kind {cfg.init_kind!r}")


def _derived_lengths(cfg: ExperimentConfig, algo: str, n: int):
    """(k_max, k_in, k_out, warm) for one algorithm, honoring the epoch budget."""
    warm = cfg.warm_epochs if algo in ("fiem", "sem-vr", "spider-em",
                                       "spider-em-cv", "spider-em-pl") else 0
    if cfg.epochs is None:
        return cfg.k_max, cfg.k_in, cfg.k_out, warm
    b = cfg.batch_size or n
    per_epoch = max(1, round(n / b))
    if algo == "em":
        return cfg.epochs, None, None, 0
    if algo in ("online-em", "iem"):
        return cfg.epochs * per_epoch, None, None, 0
    if algo == "fiem":
        return (cfg.epochs - warm) * per_epoch, None, None, warm
    span = cfg.epochs - warm
    if span % 2:
        raise ConfigError(f"[run] epochs - warm_epochs must be even for {algo}")
    return None, per_epoch + 1, span // 2, warm


def run_single(cfg: ExperimentConfig, algo: str, seed: int, model, data: Dataset,
               s_init: np.ndarray) -> RunTrace:
    """One (algorithm, seed) run with the config's sampling/step settings."""
    off = seed_offset()
    b = cfg.batch_size or data.n
    schedule = _make_schedule(cfg, algo)
    k_max, k_in, k_out, warm = _derived_lengths(cfg, algo, data.n)
    common = dict(metric_mode=cfg.metric, epsilon=cfg.epsilon,
                  snapshot_mode=cfg.snapshot,
                  compute_objective=cfg.metric != "update")
    sampler = MinibatchSampler(b, np.random.SeedSequence([seed + off]), mode=cfg.sampling)

    if algo == "em":
        return run_em(model, data, s_init, k_max, **common)
    if algo == "online-em":
        return run_online_em(model, data, s_init, sampler, schedule, k_max, **common)
    if algo == "iem":
        return run_iem(model, data, s_init, sampler, schedule, k_max, **common)
    if algo == "fiem":
        extra = MinibatchSampler(
            b, np.random.SeedSequence([seed + off, _EXTRA_STREAM_TAG]), mode=cfg.sampling)
        main = lambda s, smp: run_fiem(model, data, s, smp, extra, schedule, k_max, **common)
    elif algo == "sem-vr":
        main = lambda s, smp: run_sem_vr(model, data, s, smp, schedule, k_out, k_in,
                                         outer_gamma=cfg.outer_gamma, **common)
    elif algo == "spider-em":
        main = lambda s, smp: run_spider_em(model, data, s, smp, schedule, k_out, k_in,
                                            outer_gamma=cfg.outer_gamma, **common)
    elif algo == "spider-em-cv":
        main = lambda s, smp: run_spider_em_cv(model, data, s, smp, schedule, k_out, k_in,
                                               outer_gamma=cfg.outer_gamma, **common)
    elif algo == "spider-em-pl":
        rng = np.random.default_rng(
            np.random.SeedSequence([seed + off, _RESTART_STREAM_TAG]))
        main = lambda s, smp: run_spider_em_pl(model, data, s, smp, schedule, k_out,
                                               k_in, rng, **common)
    else:
        raise ConfigError(f"unknown algorithm {algo!r}")
    if warm:
        return hybrid_warm_start(model, data, s_init, sampler, schedule, warm, main,
                                 **common)
    return main(s_init, sampler)


def _make_schedule(cfg: ExperimentConfig, algo: str) -> StepSchedule:
    if algo == "iem":
        return StepSchedule.constant(1.0)
    if algo == "em":
        return StepSchedule.constant(1.0)
    if cfg.step_kind == "constant":
        return StepSchedule.constant(cfg.gamma)
    if cfg.step_kind == "inverse-sqrt":
        return StepSchedule.inverse_sqrt(cfg.step_coefficient)
    raise ConfigError(f"[steps] unknown kind {cfg.step_kind!r}")


def trace_to_csv(trace: RunTrace, path) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        last = len(trace.records) - 1
        for i, r in enumerate(trace.records):
            status = trace.status if i == last else "running"
            fh.write(",".join([repr(float(r.epoch)), str(r.t), str(r.k), str(r.tau),
                               repr(float(r.objective)), repr(float(r.h_sq)), str(r.ce),
                               str(r.mstep), f"{r.wall_ms:.3f}", status]) + "\n")


def read_trace_csv(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    cols = {}
    for j, name in enumerate(header):
        if name == "status":
            cols[name] = np.array([r[j] for r in rows])
        else:
            cols[name] = np.array([float(r[j]) for r in rows])
    return cols


def _run_one_job(args):
    cfg, algo, seed = args
    data = build_dataset(cfg)
    model = build_model(cfg, data)
    s_init = initial_stats(cfg, model, data)
    return algo, seed, run_single(cfg, algo, seed, model, data, s_init)


def run_experiment(cfg: ExperimentConfig, progress=None) -> dict:
    """Execute the config's (algorithm, seed) grid and write trace CSVs.

    Returns a summary dict with per-run statuses and the divergence rate.
    Every algorithm shares the per-seed minibatch stream; the SAGA-style
    method draws its second stream from an independent seed sequence.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, algo, seed) for algo in cfg.algorithms for seed in cfg.seeds]
    results = []
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            for res in pool.map(_run_one_job, jobs):
                results.append(res)
                if progress:
                    progress(res)
    else:
        for job in jobs:
            res = _run_one_job(job)
            results.append(res)
            if progress:
                progress(res)
    statuses = {}
    summary_rows = ["algorithm,seed,status,final_epoch,final_W,final_h_sq_norm,"
                    "ce_count,mstep_count"]
    for algo, seed, trace in results:
        trace_to_csv(trace, out / f"trace_{algo}_{seed}.csv")
        statuses[(algo, seed)] = trace.status
        last = trace.final_record()
        summary_rows.append(f"{algo},{seed},{trace.status},{repr(float(last.epoch))},"
                            f"{repr(float(last.objective))},{repr(float(last.h_sq))},"
                            f"{trace.counters.ce},{trace.counters.mstep}")
    (out / "summary.csv").write_text(
        summary_rows[0] + "\n" + "\n".join(sorted(summary_rows[1:])) + "\n")
    diverged = sum(1 for v in statuses.values() if v == "diverged")
    rate = diverged / len(statuses)
    manifest = [f"emvr version = {__version__}",
                f"config hash = {config_hash(cfg)}",
                f"seed offset = {seed_offset()}",
                f"divergence rate = {rate}"]
    manifest += [f"trace_{a}_{s}.csv = {st}" for (a, s), st in sorted(statuses.items())]
    manifest.append("")
    manifest.append("[config]")
    manifest.append(canonical_config(cfg))
    (out / "manifest.txt").write_text("\n".join(manifest))
    return {"statuses": statuses, "divergence_rate": rate, "out_dir": str(out),
            "traces": {(a, s): t for a, s, t in results}}


# ---------------------------------------------------------------------------
# oracle-cost accounting


def epoch_accounting(algorithm: str, n: int, b: int, k_in: int | None = None):
    """Per-epoch oracle costs: list of (phase, ce, msteps).

    One epoch selects n examples.  Full-batch EM spends it on a single
    refit; minibatch methods spend it on n/b updates; the nested-loop
    methods alternate a refresh epoch (n, 1) with an inner epoch (2n, n/b).
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    if algorithm == "spider-em-pl":
        raise ValueError("the restart variant has a random epoch structure")
    if algorithm == "em":
        return [("full", n, 1)]
    if b < 1 or n % b:
        raise ValueError(f"epoch accounting needs b | n, got n={n}, b={b}")
    per = n // b
    if algorithm in ("online-em", "iem"):
        return [("inner", n, per)]
    if algorithm == "fiem":
        return [("inner", 2 * n, per)]
    if k_in is not None and k_in != per + 1:
        raise ValueError(f"nested epoch structure needs k_in = n/b + 1 = {per + 1}")
    return [("refresh", n, 1), ("inner", 2 * n, per)]


def expected_totals(algorithm: str, n: int, b: int | None = None,
                    k_in: int | None = None, k_out: int | None = None,
                    k_max: int | None = None, xi=None) -> tuple[int, int]:
    """Closed-form terminal (ce, msteps) for a completed run.

    Flat methods: one initial full pass plus k_max updates at their batch
    cost.  Nested methods: the initial full pass plus, per outer loop,
    k_in - 1 inner updates at 2b each and one refresh at n.  The restart
    variant replaces k_in - 1 by its realized inner lengths ``xi``.
    """
    if algorithm == "em":
        return n * (1 + k_max), 1 + k_max
    if algorithm in ("online-em", "iem"):
        return n + b * k_max, 1 + k_max
    if algorithm == "fiem":
        return n + 2 * b * k_max, 1 + k_max
    if algorithm in ("sem-vr", "spider-em", "spider-em-cv"):
        return (n + k_out * (n + 2 * b * (k_in - 1)),
                1 + k_out * k_in)
    if algorithm == "spider-em-pl":
        xi = list(xi)
        return (n + sum(n + 2 * b * x for x in xi),
                1 + sum(x + 1 for x in xi))
    raise ValueError(f"unknown algorithm {algorithm!r}")


# ---------------------------------------------------------------------------
# first-hitting-time complexity estimation


@dataclass
class ComplexityEstimate:
    """Per-problem-size medians of the hitting-time oracle costs."""

    algorithm: str
    epsilon: float
    rows: list = field(default_factory=list)   # dicts per n

    def summary_csv(self) -> str:
        lines = ["n,b,k_in,trials,hits,hit_rate,kopt_median,kce_median"]
        for r in self.rows:
            lines.append(f"{r['n']},{r['b']},{r['k_in']},{r['trials']},{r['hits']},"
                         f"{repr(r['hit_rate'])},{repr(r['kopt_median'])},"
                         f"{repr(r['kce_median'])}")
        return "\n".join(lines) + "\n"

    def trials_csv(self) -> str:
        lines = ["n,trial,hit,tau_emp,t_emp,k_opt,k_ce"]
        for r in self.rows:
            for i, rec in enumerate(r["trial_records"]):
                lines.append(f"{r['n']},{i},{int(rec['hit'])},{rec['tau']},"
                             f"{rec['t']},{rec['k_opt']},{rec['k_ce']}")
        return "\n".join(lines) + "\n"


def paper_batch_size(n: int) -> int:
    return math.ceil(math.sqrt(n) / 20.0)


def _hitting_costs(algorithm: str, n: int, b: int, k_in: int | None,
                   hit: tuple[int, int, int]) -> tuple[int, int]:
    """(k_opt, k_ce) for a first hit at trace position (t, k, tau).

    k_opt is the update count tau; k_ce counts post-initialization
    conditional expectations: full refreshes completed so far plus the
    per-update batch cost of the algorithm.
    """
    t, _, tau = hit
    if algorithm in ("sem-vr", "spider-em", "spider-em-cv"):
        return tau, n * (t - 1) + 2 * b * tau
    if algorithm == "fiem":
        return tau, 2 * b * tau
    if algorithm in ("online-em", "iem"):
        return tau, b * tau
    if algorithm == "em":
        return tau, n * tau
    raise ValueError(f"no hitting-cost formula for {algorithm!r}")


def estimate_complexity(cfg: ExperimentConfig, epsilon: float, n_grid, trials: int,
                        max_epochs: int = 500, progress=None) -> ComplexityEstimate:
    """First-hitting-time study over a grid of problem sizes.

    For each n the dataset and starting point are fixed; trials differ in
    the minibatch stream.  Runs check the squared mean-field norm after
    every update and stop at the first crossing of ``epsilon``; trials that
    never hit within ``max_epochs`` data passes are excluded from the
    medians and reported through the hit rate.  ``batch_size``/``k_in``
    left unset follow the ceil(sqrt(n)/20) and ceil(n/b) rules.
    """
    if epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    algo = cfg.algorithms[0]
    est = ComplexityEstimate(algorithm=algo, epsilon=epsilon)
    for n in n_grid:
        b = cfg.batch_size if cfg.batch_size is not None else paper_batch_size(n)
        k_in = cfg.k_in if cfg.k_in is not None else math.ceil(n / b)
        if algo in NESTED:
            k_out = max(1, math.ceil(max_epochs / 2))
            k_max = None
        elif algo == "em":
            k_out = None
            k_max = max_epochs
        else:
            k_out = None
            k_max = max_epochs * max(1, round(n / b))
        sub = replace(cfg, n=n, batch_size=b, k_in=k_in, k_out=k_out, k_max=k_max,
                      epochs=None, epsilon=epsilon, metric="update", snapshot="none",
                      warm_epochs=0, algorithms=(algo,))
        data = build_dataset(sub)
        model = build_model(sub, data)
        s_init = initial_stats(sub, model, data)
        recs = []
        for trial in range(trials):
            trace = run_single(sub, algo, trial, model, data, s_init)
            if trace.hit is not None:
                k_opt, k_ce = _hitting_costs(algo, n, b, k_in, trace.hit)
                recs.append({"hit": True, "tau": trace.hit[2], "t": trace.hit[0] - 1,
                             "k_opt": k_opt, "k_ce": k_ce})
            else:
                recs.append({"hit": False, "tau": -1, "t": -1, "k_opt": -1, "k_ce": -1})
            if progress:
                progress(n, trial, recs[-1])
        hits = [r for r in recs if r["hit"]]
        est.rows.append({
            "n": n, "b": b, "k_in": k_in, "trials": trials, "hits": len(hits),
            "hit_rate": len(hits) / trials,
            "kopt_median": float(np.median([r["k_opt"] for r in hits])) if hits else float("nan"),
            "kce_median": float(np.median([r["k_ce"] for r in hits])) if hits else float("nan"),
            "trial_records": recs,
        })
    return est


# ---------------------------------------------------------------------------
# cross-seed summaries


def summarize_quantiles(trace_files, quantiles) -> str:
    """Per-epoch quantiles of h_sq_norm and W across aligned trace CSVs."""
    if len(trace_files) < 2:
        raise ValueError("need at least two traces to summarize")
    traces = [read_trace_csv(p) for p in trace_files]
    epochs = traces[0]["epoch"]
    for i, tr in enumerate(traces[1:], 1):
        if tr["epoch"].shape != epochs.shape or not np.array_equal(tr["epoch"], epochs):
            raise ValueError(f"trace {trace_files[i]} has a misaligned checkpoint grid")
    qs = list(quantiles)
    header = ["epoch", "stat"] + [f"q{q}" for q in qs]
    lines = [",".join(header)]
    for stat, col in (("h_sq_norm", "h_sq_norm"), ("W", "W")):
        mat = np.stack([tr[col] for tr in traces])   # (n_traces, n_epochs)
        for j, ep in enumerate(epochs):
            vals = np.quantile(mat[:, j], qs)
            lines.append(",".join([repr(float(ep)), stat] + [repr(float(v)) for v in vals]))
    return "\n".join(lines) + "\n"
