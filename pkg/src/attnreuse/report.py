"""Serialization for run artifacts: JSON reports, CSV tables, and figures.

All text output is UTF-8 with LF line endings.  Matplotlib is imported
lazily (Agg backend) so headless runs and figure-free runs never pay for
or require a display.
"""

from __future__ import annotations

import csv
import json

import numpy as np


def _coerce(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON-serializable: {type(obj).__name__}")


def write_json(path: str, obj) -> str:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, default=_coerce)
        fh.write("\n")
    return path


def write_csv(path: str, rows, fieldnames) -> str:
    """Write dict rows with a fixed column order; missing/None cells are blank."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in fieldnames})
    return path


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_run_figure(metrics, report: dict, path: str) -> str:
    """Two panels: relative-error histogram (when measured) and reuse-gap histogram."""
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    errs = [e for e in metrics.err_samples if np.isfinite(e)]
    if errs:
        floor = 1e-17
        axes[0].hist(np.log10(np.maximum(errs, floor)), bins=40, color="tab:blue")
        axes[0].set_xlabel("log10 relative error")
    else:
        axes[0].text(0.5, 0.5, "no error samples", ha="center", va="center")
    axes[0].set_ylabel("steps")
    axes[0].set_title(f"err_mean={report.get('err_mean')}")
    if metrics.delta_gaps:
        axes[1].hist(metrics.delta_gaps, bins=40, color="tab:orange")
        axes[1].set_xlabel("reuse gap m - p")
    else:
        axes[1].text(0.5, 0.5, "no hits", ha="center", va="center")
    axes[1].set_title(
        f"acceptance={report['acceptance_rate']:.3f}  kv_fraction={report['kv_fraction']:.3f}"
    )
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_sweep_figure(rows, x_key: str, path: str) -> str:
    """Swept knob vs traffic/acceptance (left) and vs mean error (right, log y)."""
    plt = _pyplot()
    xs = [row[x_key] for row in rows]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].plot(xs, [row["kv_fraction"] for row in rows], "o-", label="kv_fraction")
    axes[0].plot(xs, [row["acceptance_rate"] for row in rows], "s--", label="acceptance")
    axes[0].set_xlabel(x_key)
    axes[0].legend()
    errs = [row.get("err_mean") for row in rows]
    if any(e is not None for e in errs):
        floor = 1e-17
        ys = [max(e, floor) if e is not None else np.nan for e in errs]
        axes[1].semilogy(xs, ys, "o-", color="tab:red")
        axes[1].set_ylabel("err_mean")
    else:
        axes[1].text(0.5, 0.5, "no error samples", ha="center", va="center")
    axes[1].set_xlabel(x_key)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_schedsim_figure(rows, path: str) -> str:
    """Per-seed makespans of the three planners, sorted by the ideal bound."""
    plt = _pyplot()
    order = np.argsort([row["perfect"] for row in rows])
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for key, style in (("naive", "s--"), ("lpt", "o-"), ("perfect", "k:")):
        ax.plot([rows[i][key] for i in order], style, label=key, markersize=3)
    ax.set_xlabel("seed (sorted by ideal makespan)")
    ax.set_ylabel("makespan (tiles)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
