"""Run and grid reports: delimited data files plus rendered figures.

Every report path writes the same bundle: machine-readable JSON, flat CSV
(and a gnuplot-compatible ``.dat`` for grids), and PNG figures rendered with
matplotlib's Agg backend so headless runs just work. Figures are additive;
the data files alone carry everything.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .engine import StreamReport

__all__ = [
    "write_report_files",
    "write_grid_files",
    "plot_cumulative_error",
    "plot_loss_traces",
    "plot_acceptance_rates",
    "plot_grid_summary",
    "read_dat_blocks",
    "summarize_grid_dir",
]

_FIG_KW = {"figsize": (7.0, 4.2), "dpi": 130}


def _style(ax, xlabel: str, ylabel: str, title: str) -> None:
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(alpha=0.3)


def plot_cumulative_error(report: StreamReport, path: Path) -> None:
    curve = report.cumulative_error()
    fig, ax = plt.subplots(**_FIG_KW)
    ax.plot(np.arange(1, len(curve) + 1), 100.0 * curve, lw=1.5)
    _style(ax, "samples seen", "cumulative error (%)",
           f"{report.method} / {report.protocol} (seed {report.seed})")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_loss_traces(report: StreamReport, path: Path) -> None:
    if not report.losses:
        return
    keys = [k for k in ("l_ac", "l_ga", "l_st", "entropy", "total") if k in report.losses[0]]
    fig, ax = plt.subplots(**_FIG_KW)
    steps = np.arange(len(report.losses))
    for key in keys:
        ax.plot(steps, [row.get(key, np.nan) for row in report.losses], lw=1.0, label=key)
    _style(ax, "adaptation step", "loss", "objective components")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_acceptance_rates(report: StreamReport, path: Path) -> None:
    if not report.acceptance:
        return
    fig, ax = plt.subplots(**_FIG_KW)
    steps = np.arange(len(report.acceptance))
    for key in ("tc_rate", "pp_rate", "accept_rate", "st_rate"):
        ax.plot(steps, [row[key] for row in report.acceptance], lw=1.0, label=key)
    _style(ax, "adaptation step", "fraction of minibatch", "filter acceptance")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def write_report_files(report: StreamReport, out_dir, figures: bool = True) -> dict:
    """Write report.json, predictions.csv, cumulative_error.csv, figures.

    Returns a manifest of written paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    report_path = out / "report.json"
    with open(report_path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=1)
    paths["report"] = report_path

    pred_path = out / "predictions.csv"
    with open(pred_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if report.labels is not None:
            writer.writerow(["arrival_index", "prediction", "label"])
            for i, (p, y) in enumerate(zip(report.predictions, report.labels)):
                writer.writerow([i, p, y])
        else:
            writer.writerow(["arrival_index", "prediction"])
            for i, p in enumerate(report.predictions):
                writer.writerow([i, p])
    paths["predictions"] = pred_path

    if report.labels is not None:
        curve = report.cumulative_error()
        curve_path = out / "cumulative_error.csv"
        with open(curve_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["arrival_index", "cumulative_error"])
            for i, e in enumerate(curve):
                writer.writerow([i, f"{e:.10f}"])
        paths["cumulative_error"] = curve_path

    if figures:
        if report.labels is not None:
            plot_cumulative_error(report, out / "cumulative_error.png")
            paths["cumulative_error_png"] = out / "cumulative_error.png"
        plot_loss_traces(report, out / "losses.png")
        plot_acceptance_rates(report, out / "acceptance.png")
    return paths


# ---------------------------------------------------------------------------
# Grid-level outputs

_RESULT_COLUMNS = [
    "name", "key", "method", "protocol", "severity", "status",
    "error_mean", "error_std", "error_median", "accept_rate_mean",
    "n_seeds", "curve",
]


def _result_row(row: dict, index: int) -> dict:
    out = {
        "name": row["name"],
        "key": row["key"],
        "method": row["method"],
        "protocol": row["protocol"],
        "severity": row["severity"],
        "status": row.get("status", "ok"),
        "error_mean": "",
        "error_std": "",
        "error_median": "",
        "accept_rate_mean": "",
        "n_seeds": "",
        "curve": "",
    }
    if row.get("status", "ok") != "ok":
        return out
    out["error_mean"] = f"{row['error_mean']:.6f}"
    out["error_std"] = f"{row['error_std']:.6f}"
    out["error_median"] = f"{row['error_median']:.6f}"
    if row.get("accept_rate_mean") is not None:
        out["accept_rate_mean"] = f"{row['accept_rate_mean']:.6f}"
    out["n_seeds"] = len(row["seeds"])
    out["curve"] = f"cumulative_error.dat:{index}"
    return out


def write_grid_files(rows: list[dict], out_dir, figures: bool = True) -> dict:
    """Write results.csv / results.json / cumulative_error.dat (+ figures).

    The ``.dat`` file is gnuplot-friendly: one whitespace-separated block per
    cell (mean cumulative error over seeds), blocks separated by blank lines
    and addressable by index. No timing columns, so reruns with the same
    seeds reproduce the files bitwise.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    json_rows = []
    for row in rows:
        slim = {k: row[k] for k in row if k != "reports"}
        json_rows.append(slim)
    results_json = out / "results.json"
    with open(results_json, "w") as fh:
        json.dump(json_rows, fh, indent=1)
    paths["results_json"] = results_json

    results_csv = out / "results.csv"
    with open(results_csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_RESULT_COLUMNS)
        writer.writeheader()
        for idx, row in enumerate(rows):
            writer.writerow(_result_row(row, idx))
    paths["results_csv"] = results_csv

    dat_path = out / "cumulative_error.dat"
    with open(dat_path, "w") as fh:
        fh.write("# cumulative error curves, one block per cell\n")
        fh.write("# columns: sample_index mean_cumulative_error\n")
        for idx, row in enumerate(rows):
            fh.write(f"\n# block {idx}: {row['name']}\n")
            curves = [r.cumulative_error() for r in row.get("reports", []) if r.labels]
            if not curves:
                continue
            mean_curve = np.mean(np.stack(curves), axis=0)
            for i, e in enumerate(mean_curve):
                fh.write(f"{i + 1} {e:.10f}\n")
    paths["dat"] = dat_path

    if figures:
        fig_path = out / "summary.png"
        plot_grid_summary(rows, fig_path)
        paths["summary_png"] = fig_path
    return paths


def plot_grid_summary(rows: list[dict], path: Path) -> None:
    """Two panels: mean cumulative-error curves and final-error bars."""
    ok = [row for row in rows if row.get("status", "ok") == "ok"]
    labels = [row["name"] for row in ok]
    curves = []
    for row in ok:
        per_seed = [r.cumulative_error() for r in row.get("reports", []) if r.labels]
        curves.append(np.mean(np.stack(per_seed), axis=0) if per_seed else None)
    means = [row["error_mean"] for row in ok]
    stds = [row["error_std"] for row in ok]
    _render_summary(labels, curves, means, stds, path)


def _render_summary(labels, curves, means, stds, path) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11.0, 4.2), dpi=130)
    for label, curve in zip(labels, curves):
        if curve is not None:
            ax1.plot(np.arange(1, len(curve) + 1), 100.0 * np.asarray(curve),
                     lw=1.3, label=label)
    _style(ax1, "samples seen", "cumulative error (%)", "adaptation curves")
    ax1.legend(fontsize=7)

    xs = np.arange(len(labels))
    ax2.bar(xs, 100.0 * np.asarray(means), yerr=100.0 * np.asarray(stds), capsize=3)
    ax2.set_xticks(xs)
    ax2.set_xticklabels(labels, rotation=30, ha="right", fontsize=7)
    _style(ax2, "", "final error (%)", "final error by cell")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def read_dat_blocks(path) -> list[np.ndarray]:
    """Parse the gnuplot ``.dat`` back into one curve per block."""
    blocks: list[list[float]] = []
    current: list[float] | None = None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("# block"):
                current = []
                blocks.append(current)
            elif line and not line.startswith("#") and current is not None:
                current.append(float(line.split()[1]))
    return [np.array(b) for b in blocks]


def summarize_grid_dir(in_dir, figures: bool = True) -> str:
    """Re-render the summary from a grid directory's data files.

    Reads results.json and cumulative_error.dat, rewrites summary.png, and
    returns a fixed-width text table of the results.
    """
    in_dir = Path(in_dir)
    with open(in_dir / "results.json") as fh:
        rows = json.load(fh)
    dat = in_dir / "cumulative_error.dat"
    curves = read_dat_blocks(dat) if dat.exists() else [None] * len(rows)
    if len(curves) < len(rows):
        curves = curves + [None] * (len(rows) - len(curves))
    ok = [i for i, r in enumerate(rows) if r.get("status", "ok") == "ok"]
    if figures:
        _render_summary(
            [rows[i]["name"] for i in ok],
            [c if c is not None and len(c) else None for c in (curves[i] for i in ok)],
            [rows[i]["error_mean"] for i in ok],
            [rows[i]["error_std"] for i in ok],
            in_dir / "summary.png",
        )
    header = (
        f"{'name':<28} {'method':<10} {'protocol':<8} {'sev':>3} "
        f"{'err%':>7} {'std%':>6} {'acc':>6}"
    )
    lines = [header, "-" * len(header)]
    for r in rows:
        if r.get("status", "ok") != "ok":
            lines.append(f"{r['name']:<28} FAILED: {r.get('message', '?')}")
            continue
        acc = r.get("accept_rate_mean")
        acc_s = f"{acc:.3f}" if acc is not None else "-"
        lines.append(
            f"{r['name']:<28} {r['method']:<10} {r['protocol']:<8} "
            f"{r['severity']:>3} {100 * r['error_mean']:>7.2f} "
            f"{100 * r['error_std']:>6.2f} {acc_s:>6}"
        )
    return "\n".join(lines)
