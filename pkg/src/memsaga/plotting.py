"""Convergence-curve rendering: SVG line charts that are pure views of trace CSVs.

Charts are always drawn from an already-written CSV file, never from
in-memory state, so every figure can be regenerated from the data shipped
next to it.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .bench import read_trace  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "memsaga"

_METRIC_LABELS = {
    "datapoint_evals": "datapoint evaluations",
    "gradient_evals": "gradient evaluations",
}


def render_trace_chart(
    csv_path,
    out_path,
    x_metric: str = "datapoint_evals",
    per_n: int | None = None,
    title: str | None = None,
    floor: float = 1e-16,
) -> None:
    """Plot mean suboptimality per algorithm from a trace CSV (log-scale y).

    `per_n` divides the x axis by n so it reads in epochs.  Zero gaps are
    floored so the log axis stays finite.
    """
    if x_metric not in _METRIC_LABELS:
        raise ValueError(f"x_metric must be one of {sorted(_METRIC_LABELS)}")
    trace = read_trace(csv_path)
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    for algorithm in trace.algorithms():
        buckets: dict[int, tuple[float, int]] = {}
        xsum: dict[int, int] = {}
        for r in trace.rows:
            if r.algorithm != algorithm:
                continue
            key = r.datapoint_evals
            s, c = buckets.get(key, (0.0, 0))
            buckets[key] = (s + r.suboptimality, c + 1)
            xsum[key] = xsum.get(key, 0) + getattr(r, x_metric)
        keys = sorted(buckets)
        ys = [max(buckets[k][0] / buckets[k][1], floor) for k in keys]
        xs = [xsum[k] / buckets[k][1] for k in keys]
        if per_n:
            xs = [x / per_n for x in xs]
        ax.plot(xs, ys, label=algorithm, linewidth=1.4)
    ax.set_yscale("log")
    unit = _METRIC_LABELS[x_metric]
    ax.set_xlabel(f"{unit} / n (epochs)" if per_n else unit)
    ax.set_ylabel("suboptimality")
    if title:
        ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    if str(out_path).endswith(".svg"):
        fig.savefig(out_path, metadata={"Date": None})  # reproducible bytes
    else:
        fig.savefig(out_path)
    plt.close(fig)
