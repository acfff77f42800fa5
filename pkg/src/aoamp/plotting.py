"""Figure rendering from result rows: curves to PNG files next to the CSVs."""

import math
import os
from collections import defaultdict

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

STYLE = {
    "aoamp": dict(color="C0", marker="o"),
    "per-stream": dict(color="C4", marker="D"),
    "gip-no-gso": dict(color="C7", marker="x"),
    "method1": dict(color="C3", marker="^"),
    "method2": dict(color="C1", marker="v"),
    "method3": dict(color="C2", marker="s"),
    "se-predict": dict(color="k", linestyle="--", marker=""),
}

AXIS_LABEL = {"snr_rd": "relay-destination SNR (dB)",
              "snr_sr": "source-relay SNR (dB)",
              "cr_db": "clipping ratio (dB)",
              "alpha": "stream flip probability"}


def _final_t(rows):
    return max(r["t"] for r in rows)


def _series(rows, method, metric, t):
    pts = sorted((r["sweep_value"], r["value"]) for r in rows
                 if r["method"] == method and r["metric"] == metric and r["t"] == t)
    return [p[0] for p in pts], [p[1] for p in pts]


def plot_metric_vs_sweep(rows, axis, metric, path, t=None):
    """Final-iteration metric against the sweep axis, one line per method."""
    t = t or _final_t(rows)
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    methods = sorted({r["method"] for r in rows})
    floor = 1e-6
    for method in methods:
        key = metric if method != "se-predict" else f"se_{metric}"
        xs, ys = _series(rows, method, key, t)
        if not xs:
            continue
        ys = [max(y, floor) for y in ys]
        xs = [x if math.isfinite(x) else max(v for v in xs if math.isfinite(v)) + 5
              for x in xs]
        ax.semilogy(xs, ys, label=method, **STYLE.get(method, {}))
    ax.set_xlabel(AXIS_LABEL.get(axis, axis))
    ax.set_ylabel(metric.upper())
    ax.set_title(f"{metric.upper()} after {t} iterations")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_iterations(rows, axis, value, path, metric="mse"):
    """Per-iteration curves at one sweep point: simulations plus predictor."""
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    here = [r for r in rows if r["sweep_value"] == value]
    methods = sorted({r["method"] for r in here})
    floor = 1e-8
    for method in methods:
        key = metric if method != "se-predict" else f"se_{metric}"
        pts = sorted((r["t"], max(r["value"], floor)) for r in here
                     if r["method"] == method and r["metric"] == key)
        if pts:
            ax.semilogy(*zip(*pts), label=method, **STYLE.get(method, {}))
    tag = "inf" if math.isinf(value) else f"{value:g}"
    ax.set_xlabel("iteration")
    ax.set_ylabel(metric.upper())
    ax.set_title(f"{metric.upper()} vs iteration at {axis}={tag}")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_report(rows, axis, outdir):
    """Write the standard figure set; returns the file paths."""
    os.makedirs(outdir, exist_ok=True)
    paths = []
    metrics = {r["metric"].removeprefix("se_") for r in rows}
    for metric in sorted(metrics & {"ber", "mse"}):
        p = os.path.join(outdir, f"{metric}_vs_{axis}.png")
        paths.append(plot_metric_vs_sweep(rows, axis, metric, p))
    for value in sorted({r["sweep_value"] for r in rows}):
        tag = "inf" if math.isinf(value) else f"{value:g}"
        p = os.path.join(outdir, f"iterations_{axis}={tag}.png")
        paths.append(plot_iterations(rows, axis, value, p))
    return paths
