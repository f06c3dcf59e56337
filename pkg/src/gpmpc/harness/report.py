"""CSV, summary and figure output for episodes and comparisons."""

from __future__ import annotations

import csv
import math
from contextlib import contextmanager
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .config import config_to_text  # noqa: E402
from .episode import (GP_TRACE_COLUMNS, TIMING_COLUMNS, TRAJECTORY_COLUMNS,  # noqa: E402
                      EpisodeResult)
from .experiment import REPORT_COLUMNS, ComparisonReport  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.2,
    "legend.frameon": False,
}


@contextmanager
def _style():
    with plt.rc_context(STYLE):
        yield


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)


def _write_table(path, columns, data, fmt="%.10g"):
    np.savetxt(path, np.asarray(data, dtype=float).reshape(-1, len(columns)), fmt=fmt,
               delimiter=",", header=",".join(columns), comments="")


def _format_value(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    return str(v)


def write_episode(result: EpisodeResult, out_dir, figures: bool = True) -> list:
    """Write the CSV logs, ``summary.txt`` and optionally PNG figures; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = result.log
    paths = [out / "trajectory.csv", out / "gp_trace.csv", out / "timings.csv",
             out / "summary.txt", out / "config.ini"]
    _write_table(paths[0], TRAJECTORY_COLUMNS, log.trajectory)
    _write_table(paths[1], GP_TRACE_COLUMNS, log.gp_trace)
    _write_table(paths[2], TIMING_COLUMNS, log.timings)
    lines = [f"status = {result.status}"]
    if result.message:
        lines.append(f"message = {result.message}")
    lines += [f"{k} = {_format_value(v)}" for k, v in result.metrics.items() if k != "status"]
    paths[3].write_text("\n".join(lines) + "\n")
    paths[4].write_text(config_to_text(result.config))
    if figures and len(log.trajectory):
        paths += plot_episode(result, out)
    return paths


def plot_episode(result: EpisodeResult, out_dir) -> list:
    out = Path(out_dir)
    log, cfg = result.log, result.config
    t = log.times
    pos, ref = log.positions, log.reference_positions
    gp_on = log.column("gp_mode") == 1.0
    paths = []
    with _style():
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        ax.plot(ref[:, 0], ref[:, 1], "k--", lw=0.8, label="reference")
        ax.plot(pos[:, 0], pos[:, 1], color="C0", label="flown")
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        ax.set_aspect("equal", adjustable="datalim")
        ax.legend(loc="best")
        paths.append(out / "trajectory.png")
        _save(fig, paths[-1])

        fig, axes = plt.subplots(4, 1, figsize=(6.5, 6.0), sharex=True)
        err = pos - ref
        for i, name in enumerate("xyz"):
            axes[i].plot(t, err[:, i], color=f"C{i}")
            axes[i].set_ylabel(f"e_{name} [m]")
        axes[3].plot(t, np.linalg.norm(err, axis=1), color="k")
        axes[3].set_ylabel("|e| [m]")
        axes[3].set_xlabel("time [s]")
        if np.any(gp_on):
            for ax in axes:
                ax.axvspan(t[gp_on][0], t[-1], color="C2", alpha=0.08, lw=0)
        axes[0].set_title(f"{cfg.controller} controller, seed {cfg.seed}, "
                          f"RMS {result.metrics.get('rms', float('nan')):.3f} m")
        paths.append(out / "tracking_error.png")
        _save(fig, paths[-1])

        fig, axes = plt.subplots(3, 1, figsize=(6.5, 5.5), sharex=True)
        accel = np.column_stack([log.column(f"f_{a}") for a in "xyz"]) / cfg.quad.mass
        for i, a in enumerate("xyz"):
            ax = axes[i]
            ax.plot(t, accel[:, i], color="0.6", lw=0.8, label="true latent")
            ax.plot(t, log.column(f"d_{a}"), color="C0", label="extracted")
            mean, std = log.column(f"gp_mean_{a}"), log.column(f"gp_std_{a}")
            if np.any(np.isfinite(mean)):
                ax.plot(t, mean, color="C3", label="GP one-step")
                ax.fill_between(t, mean - 2 * std, mean + 2 * std, color="C3", alpha=0.2, lw=0)
            ax.set_ylabel(f"d_{a} [m/s^2]")
        axes[0].legend(loc="upper right", ncol=3)
        axes[-1].set_xlabel("time [s]")
        paths.append(out / "disturbance.png")
        _save(fig, paths[-1])

        if len(log.gp_trace):
            tr = log.gp_trace
            fig, axes = plt.subplots(3, 1, figsize=(6.5, 5.0), sharex=True)
            for j, name in enumerate(["signal_var", "length_scale", "noise_var"]):
                col = GP_TRACE_COLUMNS.index(name)
                for axis in range(3):
                    rows = tr[:, 1] == axis
                    axes[j].semilogy(tr[rows, 0], tr[rows, col], color=f"C{axis}",
                                     label="xyz"[axis])
                axes[j].set_ylabel(name)
            axes[0].legend(loc="best", ncol=3)
            axes[-1].set_xlabel("time [s]")
            paths.append(out / "gp_hyperparameters.png")
            _save(fig, paths[-1])
    return paths


def write_comparison(report: ComparisonReport, out_dir, figures: bool = True) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "comparison.csv", out / "summary.txt"]
    with open(paths[0], "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in report.rows:
            writer.writerow({k: _format_value(row[k]) for k in REPORT_COLUMNS})
    paths[1].write_text(format_summary(report))
    if figures and report.rows:
        paths.append(plot_comparison(report, out))
    return paths


def format_summary(report: ComparisonReport) -> str:
    la, lb = report.labels
    a, b = report.rms(la), report.rms(lb)
    seeds = [r["seed"] for r in report.rows if r["label"] == la]
    lines = [f"{'seed':>6} {la:>12} {lb:>12} {'ratio':>8}"]
    for s, ra, rb in zip(seeds, a, b):
        lines.append(f"{s:>6d} {ra:>12.4f} {rb:>12.4f} {ra / rb if rb else math.inf:>8.2f}")
    summ = report.summary()
    lines.append("")
    for key, value in summ.items():
        if key != "rms_difference":
            lines.append(f"{key} = {_format_value(value)}")
    for label in (la, lb):
        rows = [r for r in report.rows if r["label"] == label]
        for key in ("mean_step_ms_nominal", "mean_step_ms_gp", "mean_train_ms"):
            vals = np.array([r[key] for r in rows], dtype=float)
            vals = vals[np.isfinite(vals)]
            if vals.size:
                lines.append(f"{label}.{key} = {vals.mean():.4g}")
        for axis in "xyz":
            vals = np.array([r[f"rms_{axis}"] for r in rows], dtype=float)
            lines.append(f"{label}.mean_rms_{axis} = {np.mean(vals):.4g}")
    return "\n".join(lines) + "\n"


def plot_comparison(report: ComparisonReport, out_dir) -> Path:
    la, lb = report.labels
    a, b = report.rms(la), report.rms(lb)
    seeds = [r["seed"] for r in report.rows if r["label"] == la]
    idx = np.arange(len(seeds))
    with _style():
        fig, ax = plt.subplots(figsize=(6.0, 3.2))
        ax.bar(idx - 0.2, a, width=0.4, label=la, color="C1")
        ax.bar(idx + 0.2, b, width=0.4, label=lb, color="C0")
        ax.set_xticks(idx, [str(s) for s in seeds])
        ax.set_xlabel("seed")
        ax.set_ylabel("RMS position error [m]")
        ax.legend(loc="best")
        path = Path(out_dir) / "comparison.png"
        _save(fig, path)
    return path
