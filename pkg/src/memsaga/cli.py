"""Command-line interface: run / rates / neighbors / replicate.

Exit status taxonomy: 0 success, 1 configuration error (unknown key, bad
flag, invalid combination), 2 data error (missing or malformed file), 3
numerical failure (reference solver or all-seed divergence).  Outputs land
in a user-named or timestamped directory; every chart is rendered from the
CSV written next to it, and the effective config is echoed for provenance.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import bench, neighbors, theory
from .errors import ConfigError, DataError, DivergenceError, NonConvergenceError
from .plotting import render_trace_chart
from .problem import LossModel, reference_optimum


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _out_dir(arg) -> str:
    path = arg or os.path.join("runs", time.strftime("%Y%m%d-%H%M%S"))
    os.makedirs(path, exist_ok=True)
    return path


def _emit(trace, out_dir, stem, x_axes, per_n):
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    bench.write_trace(trace, csv_path)
    for metric in x_axes:
        svg_path = os.path.join(out_dir, f"{stem}_{metric.split('_')[0]}.svg")
        render_trace_chart(csv_path, svg_path, x_metric=metric, per_n=per_n, title=stem)
    return csv_path


_X_CHOICES = {
    "datapoint": ["datapoint_evals"],
    "gradient": ["gradient_evals"],
    "both": ["datapoint_evals", "gradient_evals"],
}


def cmd_run(args) -> int:
    config = bench.RunConfig()
    if args.config:
        config = bench.load_config(args.config, config)
    config = bench.apply_overrides(config, _parse_overrides(args.set))
    out_dir = _out_dir(args.out)
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(bench.dump_config(config))
    cache_dir = args.cache_dir or os.path.join(out_dir, "graph_cache")
    trace = bench.run_experiment(config, cache_dir=cache_dir)
    n = bench.build_problem(config).n
    _emit(trace, out_dir, "trace", _X_CHOICES[args.x_axis], per_n=n)
    if trace.diverged_seeds:
        print(f"warning: diverged seeds {sorted(set(trace.diverged_seeds))}", file=sys.stderr)
        if set(trace.diverged_seeds) >= set(config.seeds):
            raise DivergenceError(-1, "all seeds diverged; see truncated trace")
    print(out_dir)
    return 0


def cmd_rates(args) -> int:
    params = theory.RateParams(mu=args.mu, lipschitz=args.L, n=args.n, q=args.q)
    gamma_u = params.universal_gamma()
    rows = [
        ("K", params.K),
        ("kappa", params.kappa),
        ("gamma_star", params.gamma_star()),
        ("rho_star", params.rho_star()),
        ("gamma_tilde", params.gamma_tilde()),
        ("gamma_universal", gamma_u),
        ("rho(gamma_universal)", params.rho(gamma_u)),
        ("gamma_q_over_mun", args.q / (args.mu * args.n)),
    ]
    for g in args.gamma or ():
        rows.append((f"rho(gamma={g:g})", params.rho(g)))
    print(f"n={args.n} mu={args.mu:g} L={args.L:g} q={args.q}")
    width = max(len(name) for name, _ in rows)
    for name, value in rows:
        print(f"{name:<{width}}  = {value:.12g}")
    return 0


def cmd_neighbors(args) -> int:
    config = bench.RunConfig()
    if args.config:
        config = bench.load_config(args.config, config)
    config = bench.apply_overrides(config, _parse_overrides(args.set))
    out_dir = _out_dir(args.out)
    instance = bench.build_problem(config)
    q = args.q or config.q
    graph = bench.get_graph(instance, q, cache_dir=out_dir)
    report = neighbors.verify_uniformity(graph)
    print(f"n={instance.n} q={q} edges={instance.n * q}")
    print(report.summary())
    print(f"cache: {bench.graph_cache_path(out_dir, instance, q)}")
    return 0 if report.ok else 3


def _replicate_eps(config, q, cache_dir) -> float:
    """Data-derived default sharing threshold: the median nonself edge bound
    at the reference optimum."""
    instance = bench.build_problem(config)
    model = LossModel(instance)
    ref = reference_optimum(model)
    graph = bench.get_graph(instance, q, cache_dir)
    table = neighbors.EpsBoundTable(instance, graph)
    w = ref.w_star
    w_norm = float(np.linalg.norm(w))
    vals = []
    for i in range(instance.n):
        b = table.neighborhood_bounds(i, w, w_norm=w_norm)
        kids = graph.children[i]
        vals.append(b[kids != i])
    vals = np.concatenate(vals)
    return float(np.median(vals))


def cmd_replicate(args) -> int:
    out_dir = _out_dir(args.out)
    cache_dir = os.path.join(out_dir, "graph_cache")
    seeds = tuple(int(s) for s in args.seeds.split(","))
    mus = [float(m) for m in args.mus.split(",")]
    base = bench.RunConfig(
        loss_kind=args.loss,
        epochs=args.epochs,
        seeds=seeds,
        subsample=args.subsample,
    )
    if args.dataset == "synthetic":
        d = 20
        base = replace(
            base,
            dataset_kind="synthetic",
            synth_n=args.n,
            synth_d=d,
            synth_clusters=max(2, args.n // 50),
            synth_cluster_spread=0.05,
            synth_row_scale=0.7 / (d ** 0.5),
            synth_noise=0.5,
        )
    else:
        base = replace(base, dataset_kind="libsvm", dataset_path=args.dataset)

    q = args.q
    manifest = []
    for mu in mus:
        panel = replace(base, mu=mu)
        if args.eps is not None:
            eps_values = [args.eps]
        elif args.eps_sweep:
            eps_values = [float(e) for e in args.eps_sweep.split(",")]
        else:
            eps_values = [_replicate_eps(panel, q, cache_dir)]
        cells = [
            replace(panel, algo_kind="saga", q=1),
            replace(panel, algo_kind="q_saga", q=q),
            *[replace(panel, algo_kind="eps_n_saga", q=q, eps=e) for e in eps_values],
            replace(panel, algo_kind="sgd_const", q=1),
            replace(panel, algo_kind="sgd_decay", q=1, gamma_rule="explicit",
                    gamma_value=1.0, gamma_sweep=True),
        ]
        merged = bench.MetricsTrace()
        for cell in cells:
            cell.validate()
            merged.extend(bench.run_experiment(cell, cache_dir=cache_dir))
            manifest.append(bench.dump_config(cell))
        stem = f"replicate_mu{mu:g}"
        n = bench.build_problem(panel).n
        _emit(merged, out_dir, stem, _X_CHOICES["both"], per_n=n)
        print(f"panel mu={mu:g}: {len(cells)} curves -> {stem}.csv")
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(manifest))
    print(out_dir)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="memsaga", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one configured experiment")
    p_run.add_argument("--config", help="flat key = value config file")
    p_run.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
    p_run.add_argument("--out", help="output directory (default runs/<timestamp>)")
    p_run.add_argument("--cache-dir", help="neighbor-graph cache directory")
    p_run.add_argument("--x-axis", choices=sorted(_X_CHOICES), default="datapoint")
    p_run.set_defaults(func=cmd_run)

    p_rates = sub.add_parser("rates", help="print step-size/rate table")
    p_rates.add_argument("--n", type=int, required=True)
    p_rates.add_argument("--mu", type=float, required=True)
    p_rates.add_argument("--L", type=float, required=True)
    p_rates.add_argument("--q", type=int, default=1)
    p_rates.add_argument("--gamma", type=float, action="append",
                         help="also print rho at this step size (repeatable)")
    p_rates.set_defaults(func=cmd_rates)

    p_nb = sub.add_parser("neighbors", help="build/cache a neighbor graph and audit it")
    p_nb.add_argument("--config", help="config file providing the dataset")
    p_nb.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_nb.add_argument("--q", type=int, help="in-degree (default algorithm.q)")
    p_nb.add_argument("--out", help="output/cache directory")
    p_nb.set_defaults(func=cmd_neighbors)

    p_rep = sub.add_parser("replicate", help="run the comparison preset grid")
    p_rep.add_argument("--dataset", default="synthetic",
                       help="'synthetic' or a libsvm file path")
    p_rep.add_argument("--loss", default="logistic", choices=["ridge", "logistic"])
    p_rep.add_argument("--n", type=int, default=10000, help="synthetic dataset size")
    p_rep.add_argument("--subsample", type=int, default=None)
    p_rep.add_argument("--q", type=int, default=20)
    p_rep.add_argument("--epochs", type=float, default=5.0)
    p_rep.add_argument("--seeds", default="0,1,2")
    p_rep.add_argument("--mus", default="0.1,0.001")
    p_rep.add_argument("--eps", type=float, help="fixed sharing threshold")
    p_rep.add_argument("--eps-sweep", help="comma list of thresholds, one curve each")
    p_rep.add_argument("--out", help="output directory")
    p_rep.set_defaults(func=cmd_replicate)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError, PermissionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, NonConvergenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
