"""Experiment harness: seeded runs, suboptimality traces, CSV emission.

A run is fully determined by (config, seed): the dataset is built under its
own seed (so every algorithm sees the identical subsample), the reference
optimum is computed once, and the optimizer records the objective gap
f(w) - f(w*) against both cost metrics (update steps and fresh gradient
computations) at fixed checkpoints.  Checkpoint evaluation itself is excluded
from the counters.

Config files are flat `key = value` text with dotted keys; `#` comments are
ignored and unknown keys are hard errors.  See KEY_SPECS for the schema.
"""

from __future__ import annotations

import hashlib
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import memengine, neighbors, theory
from .errors import ConfigError, DataError, DivergenceError, MemsagaError
from .problem import (
    LOSS_KINDS,
    LossModel,
    ProblemInstance,
    ReferenceOptimum,
    load_libsvm,
    reference_optimum,
    synthesize_problem,
)

WORKERS_ENV = "MEMSAGA_WORKERS"

ALGO_KINDS = memengine.SAMPLER_KINDS + ("sgd_const", "sgd_decay")
GAMMA_RULES = ("q_over_mun", "theory_star", "theory_universal", "explicit")

TRACE_HEADER = "seed,algorithm,datapoint_evals,gradient_evals,suboptimality,wall_seconds"


@dataclass
class RunConfig:
    # dataset
    dataset_kind: str = "synthetic"            # synthetic | libsvm
    dataset_path: str | None = None
    synth_n: int = 1000
    synth_d: int = 20
    synth_noise: float = 0.0
    synth_seed: int = 1
    synth_clusters: int = 0
    synth_cluster_spread: float = 0.15
    synth_row_scale: float = 1.0
    subsample: int | None = None
    subsample_seed: int = 0
    standardize_targets: bool = False
    # problem
    loss_kind: str = "ridge"
    mu: float = 0.1
    # algorithm
    algo_kind: str = "saga"
    q: int = 1
    eps: float | None = None
    storage: str = memengine.GLM_SCALARS
    growing_n: bool = True
    # step size
    gamma_rule: str = "q_over_mun"
    gamma_value: float | None = None           # explicit value, or gamma_0 for sgd_decay
    gamma_sweep: bool = False                  # sgd_decay: sweep {0.1,1,10}/L, keep best final
    # run
    epochs: float = 5.0
    seeds: tuple = (0, 1, 2, 3, 4)
    trace_every: int | None = None             # datapoint evals between checkpoints
    measure_wall: bool = False
    label: str | None = None

    def algorithm_label(self) -> str:
        if self.label:
            return self.label
        k = self.algo_kind
        if k == "q_saga":
            return f"q_saga{self.q}"
        if k == "eps_n_saga":
            return f"eps_n_saga{self.q}_eps{self.eps:g}"
        if k == "n_saga":
            return f"n_saga{self.q}"
        return k

    def validate(self) -> None:
        if self.dataset_kind not in ("synthetic", "libsvm"):
            raise ConfigError(f"dataset.kind must be synthetic or libsvm, got {self.dataset_kind}")
        if self.dataset_kind == "libsvm" and not self.dataset_path:
            raise ConfigError("dataset.path is required for dataset.kind = libsvm")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"problem.loss must be one of {LOSS_KINDS}, got {self.loss_kind}")
        if self.mu <= 0:
            raise ConfigError("problem.mu must be positive")
        if self.algo_kind not in ALGO_KINDS:
            raise ConfigError(f"algorithm.kind must be one of {ALGO_KINDS}, got {self.algo_kind}")
        if self.storage not in memengine.STORAGE_MODES:
            raise ConfigError(f"algorithm.storage must be one of {memengine.STORAGE_MODES}")
        if self.gamma_rule not in GAMMA_RULES:
            raise ConfigError(f"gamma.rule must be one of {GAMMA_RULES}, got {self.gamma_rule}")
        if self.gamma_rule == "explicit" and self.gamma_value is None:
            raise ConfigError("gamma.value required for gamma.rule = explicit")
        if self.algo_kind == "eps_n_saga" and self.eps is None:
            raise ConfigError("algorithm.eps required for eps_n_saga")
        if self.epochs <= 0:
            raise ConfigError("run.epochs must be positive")
        if not self.seeds:
            raise ConfigError("run.seeds must list at least one seed")


def _parse_bool(v: str) -> bool:
    low = v.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _parse_seeds(v: str) -> tuple:
    return tuple(int(tok) for tok in v.replace(",", " ").split())


def _parse_opt_int(v: str):
    return None if v.lower() == "none" else int(v)


def _parse_opt_float(v: str):
    return None if v.lower() == "none" else float(v)


# dotted config key -> (RunConfig field, parser)
KEY_SPECS = {
    "dataset.kind": ("dataset_kind", str),
    "dataset.path": ("dataset_path", str),
    "dataset.n": ("synth_n", int),
    "dataset.d": ("synth_d", int),
    "dataset.noise": ("synth_noise", float),
    "dataset.seed": ("synth_seed", int),
    "dataset.clusters": ("synth_clusters", int),
    "dataset.cluster_spread": ("synth_cluster_spread", float),
    "dataset.row_scale": ("synth_row_scale", float),
    "dataset.subsample": ("subsample", _parse_opt_int),
    "dataset.subsample_seed": ("subsample_seed", int),
    "dataset.standardize_targets": ("standardize_targets", _parse_bool),
    "problem.loss": ("loss_kind", str),
    "problem.mu": ("mu", float),
    "algorithm.kind": ("algo_kind", str),
    "algorithm.q": ("q", int),
    "algorithm.eps": ("eps", _parse_opt_float),
    "algorithm.storage": ("storage", str),
    "algorithm.growing_n": ("growing_n", _parse_bool),
    "algorithm.label": ("label", str),
    "gamma.rule": ("gamma_rule", str),
    "gamma.value": ("gamma_value", _parse_opt_float),
    "gamma.sweep": ("gamma_sweep", _parse_bool),
    "run.epochs": ("epochs", float),
    "run.seeds": ("seeds", _parse_seeds),
    "run.trace_every": ("trace_every", _parse_opt_int),
    "run.measure_wall": ("measure_wall", _parse_bool),
}


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    """Apply dotted-key overrides; unknown keys or bad values are ConfigErrors."""
    updates = {}
    for key, raw in overrides.items():
        spec = KEY_SPECS.get(key)
        if spec is None:
            raise ConfigError(f"unknown config key {key!r}")
        fieldname, parser = spec
        try:
            updates[fieldname] = parser(str(raw).strip())
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
    cfg = replace(config, **updates)
    cfg.validate()
    return cfg


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        overrides[key.strip()] = value.strip()
    return apply_overrides(base or RunConfig(), overrides)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    try:
        return parse_config_text(text, base)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def dump_config(config: RunConfig) -> str:
    """Effective config as flat key = value lines (provenance echo)."""
    lines = []
    for key, (fieldname, _) in sorted(KEY_SPECS.items()):
        value = getattr(config, fieldname)
        if value is None:
            continue
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


# -- problem assembly ---------------------------------------------------------


def build_problem(config: RunConfig) -> ProblemInstance:
    """Load or synthesize the dataset, then subsample/standardize as configured."""
    if config.dataset_kind == "synthetic":
        inst, _ = synthesize_problem(
            config.synth_n,
            config.synth_d,
            config.loss_kind,
            config.mu,
            config.synth_seed,
            noise=config.synth_noise,
            clusters=config.synth_clusters,
            cluster_spread=config.synth_cluster_spread,
            row_scale=config.synth_row_scale,
        )
    else:
        label_map = {0.0: -1.0, 2.0: -1.0} if config.loss_kind == "logistic" else None
        inst = load_libsvm(config.dataset_path, config.loss_kind, config.mu, label_map=label_map)
    X, y = inst.features, inst.labels
    if config.subsample is not None and config.subsample < inst.n:
        rng = np.random.default_rng(config.subsample_seed)
        keep = np.sort(rng.choice(inst.n, size=config.subsample, replace=False))
        X, y = X[keep], y[keep]
    if config.standardize_targets:
        if config.loss_kind != "ridge":
            raise ConfigError("dataset.standardize_targets applies to ridge targets only")
        sd = y.std()
        if sd == 0:
            raise DataError("cannot standardize constant targets")
        y = (y - y.mean()) / sd
    if X is not inst.features or y is not inst.labels:
        inst = ProblemInstance(X, y, config.loss_kind, config.mu)
    return inst


def graph_cache_path(cache_dir, instance: ProblemInstance, q: int) -> str:
    key = hashlib.sha256((instance.fingerprint() + f":{q}").encode()).hexdigest()[:16]
    return os.path.join(cache_dir, f"graph_{key}_q{q}.txt")


def get_graph(instance: ProblemInstance, q: int, cache_dir=None) -> neighbors.NeighborGraph:
    """Build the neighbor graph, reusing an on-disk cache when available."""
    if cache_dir is None:
        return neighbors.build_knn_graph(instance, q)
    os.makedirs(cache_dir, exist_ok=True)
    path = graph_cache_path(cache_dir, instance, q)
    if os.path.exists(path):
        return neighbors.load_graph(path, instance)
    graph = neighbors.build_knn_graph(instance, q)
    neighbors.save_graph(graph, path)
    return graph


def resolve_gamma(config: RunConfig, model: LossModel) -> float:
    """Constant step size per the configured rule (sgd_decay handles t itself)."""
    n, mu, L = model.n, model.mu, model.lipschitz
    q_eff = max(config.q, 1) if config.algo_kind.startswith("sgd") else config.q
    if config.gamma_rule == "explicit":
        return float(config.gamma_value)
    if config.gamma_rule == "q_over_mun":
        return q_eff / (mu * n)
    if config.gamma_rule == "theory_star":
        return theory.gamma_star(theory.k_param(mu, L, q_eff, n), L)
    return theory.universal_gamma(L)


def suboptimality(model: LossModel, w: np.ndarray, ref: ReferenceOptimum) -> float:
    """f(w) - f(w*), floored at zero within the numerical tolerance."""
    if ref.fingerprint != model.instance.fingerprint():
        raise MemsagaError("reference optimum belongs to a different problem")
    gap = model.objective(w) - ref.f_star
    if gap < -1e-12:
        raise MemsagaError(f"negative suboptimality {gap:.3e}: reference is not optimal")
    return max(gap, 0.0)


# -- traces -------------------------------------------------------------------


@dataclass
class TraceRow:
    seed: int
    algorithm: str
    datapoint_evals: int
    gradient_evals: int
    suboptimality: float
    wall_seconds: float


@dataclass
class MetricsTrace:
    rows: list = field(default_factory=list)
    diverged_seeds: list = field(default_factory=list)

    def extend(self, other: "MetricsTrace") -> None:
        self.rows.extend(other.rows)
        self.diverged_seeds.extend(other.diverged_seeds)

    def algorithms(self) -> list:
        seen = []
        for r in self.rows:
            if r.algorithm not in seen:
                seen.append(r.algorithm)
        return seen

    def aggregate(self, algorithm: str | None = None):
        """Per-checkpoint (mean, min, max) of suboptimality across seeds,
        keyed and sorted by datapoint_evals."""
        buckets: dict[int, list] = {}
        for r in self.rows:
            if algorithm is not None and r.algorithm != algorithm:
                continue
            buckets.setdefault(r.datapoint_evals, []).append(r.suboptimality)
        out = []
        for k in sorted(buckets):
            vals = buckets[k]
            out.append((k, sum(vals) / len(vals), min(vals), max(vals)))
        return out

    def curve_at(self, algorithm: str, metric: str, grid) -> np.ndarray:
        """Mean suboptimality at each grid point of the chosen cost metric.

        Per seed, the trace is read as a step function of the metric
        (last checkpoint not exceeding the grid point); seeds are averaged.
        """
        if metric not in ("datapoint_evals", "gradient_evals"):
            raise ValueError(f"unknown metric {metric!r}")
        per_seed: dict[int, list] = {}
        for r in self.rows:
            if r.algorithm == algorithm:
                per_seed.setdefault(r.seed, []).append(r)
        grid = np.asarray(grid, dtype=np.int64)
        curves = []
        for rows in per_seed.values():
            rows.sort(key=lambda r: r.datapoint_evals)
            xs = np.array([getattr(r, metric) for r in rows], dtype=np.int64)
            ys = np.array([r.suboptimality for r in rows])
            pos = np.searchsorted(xs, grid, side="right") - 1
            if np.any(pos < 0):
                raise ValueError("grid point precedes the first checkpoint")
            curves.append(ys[pos])
        if not curves:
            raise ValueError(f"no rows for algorithm {algorithm!r}")
        return np.mean(curves, axis=0)


def write_trace(trace: MetricsTrace, path) -> None:
    """Deterministic CSV: fixed header, rows sorted by (algorithm, seed,
    datapoint_evals), shortest round-trip float formatting."""
    rows = sorted(trace.rows, key=lambda r: (r.algorithm, r.seed, r.datapoint_evals))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(TRACE_HEADER + "\n")
        for r in rows:
            fh.write(
                f"{r.seed},{r.algorithm},{r.datapoint_evals},{r.gradient_evals},"
                f"{float(r.suboptimality)!r},{float(r.wall_seconds)!r}\n"
            )


def read_trace(path) -> MetricsTrace:
    trace = MetricsTrace()
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != TRACE_HEADER:
            raise DataError(f"{path}: unexpected trace header {header!r}")
        for lineno, raw in enumerate(fh, start=2):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 6:
                raise DataError(f"{path}:{lineno}: expected 6 fields")
            trace.rows.append(
                TraceRow(
                    int(parts[0]), parts[1], int(parts[2]), int(parts[3]),
                    float(parts[4]), float(parts[5]),
                )
            )
    return trace


# -- running ------------------------------------------------------------------


def _make_sampler(config: RunConfig, instance: ProblemInstance, cache_dir):
    kind = config.algo_kind
    if kind in ("sgd_const", "sgd_decay"):
        return memengine.make_sampler(memengine.SGD, instance.n)
    if kind in (memengine.N_SAGA, memengine.EPS_N_SAGA):
        graph = get_graph(instance, config.q, cache_dir)
        eps = config.eps if kind == memengine.EPS_N_SAGA else None
        return memengine.make_sampler(kind, instance.n, graph=graph, eps=eps)
    return memengine.make_sampler(kind, instance.n, q=config.q)


def _run_single_seed(
    config: RunConfig,
    model: LossModel,
    ref: ReferenceOptimum,
    sampler,
    gamma,
    seed: int,
) -> tuple[list, bool]:
    n = model.n
    total_steps = int(round(config.epochs * n))
    every = config.trace_every or max(1, n // 10)
    label = config.algorithm_label()
    state = memengine.init_state(
        model, seed, mode=config.storage, growing=config.growing_n
    )
    rows = []
    t0 = time.perf_counter()

    def record():
        wall = (time.perf_counter() - t0) if config.measure_wall else 0.0
        rows.append(
            TraceRow(
                seed,
                label,
                state.counters.datapoint_evals,
                state.counters.gradient_evals,
                suboptimality(model, state.w, ref),
                wall,
            )
        )

    record()
    diverged = False
    if config.algo_kind == "sgd_decay":
        gamma_fn = lambda t: gamma / t  # noqa: E731
    else:
        gamma_fn = None
    try:
        for start in range(0, total_steps, every):
            chunk = min(every, total_steps - start)
            memengine.run(
                state, model, sampler,
                gamma_fn if gamma_fn is not None else gamma,
                chunk,
            )
            record()
    except DivergenceError:
        diverged = True
    return rows, diverged


def _run_cell(args):
    config, seed, cache_dir = args
    instance = build_problem(config)
    model = LossModel(instance)
    ref = reference_optimum(model)
    sampler = _make_sampler(config, instance, cache_dir)
    gamma = resolve_gamma(config, model)
    return _run_single_seed(config, model, ref, sampler, gamma, seed)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def run_experiment(config: RunConfig, cache_dir=None) -> MetricsTrace:
    """Run the configured algorithm over all seeds and collect the trace.

    sgd_decay with gamma.sweep runs gamma_0 in {0.1, 1, 10}/L and keeps the
    schedule with the best final mean suboptimality.
    """
    config.validate()
    if config.algo_kind == "sgd_decay" and config.gamma_sweep:
        instance = build_problem(config)
        L = LossModel(instance).lipschitz
        best = None
        for g0 in (0.1 / L, 1.0 / L, 10.0 / L):
            cand = replace(config, gamma_sweep=False, gamma_rule="explicit", gamma_value=g0)
            tr = run_experiment(cand, cache_dir)
            agg = tr.aggregate(cand.algorithm_label())
            final = agg[-1][1]
            if best is None or final < best[0]:
                best = (final, tr)
        return best[1]

    trace = MetricsTrace()
    workers = worker_count()
    cells = [(config, seed, cache_dir) for seed in config.seeds]
    if workers > 1 and len(cells) > 1:
        needs_graph = config.algo_kind in (memengine.N_SAGA, memengine.EPS_N_SAGA)
        if cache_dir is not None and needs_graph:
            # build once so workers only read the cache
            get_graph(build_problem(config), config.q, cache_dir)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, cells))
        for (rows, diverged), (cfg, seed, _) in zip(results, cells):
            trace.rows.extend(rows)
            if diverged:
                trace.diverged_seeds.append(seed)
        return trace

    instance = build_problem(config)
    model = LossModel(instance)
    ref = reference_optimum(model)
    sampler = _make_sampler(config, instance, cache_dir)
    gamma = resolve_gamma(config, model)
    for seed in config.seeds:
        rows, diverged = _run_single_seed(config, model, ref, sampler, gamma, seed)
        trace.rows.extend(rows)
        if diverged:
            trace.diverged_seeds.append(seed)
    return trace
