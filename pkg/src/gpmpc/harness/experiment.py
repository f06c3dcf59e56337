"""Paired-seed comparison of two scenario configurations."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ScenarioConfig, with_seed
from .episode import STATUS_OK, run_episode

REPORT_COLUMNS = ["seed", "label", "controller", "status", "rms", "rms_x", "rms_y", "rms_z",
                  "mean_step_ms_nominal", "mean_step_ms_gp", "mean_train_ms", "softened",
                  "max_kkt_residual", "switch_time"]


@dataclass
class ComparisonReport:
    rows: list = field(default_factory=list)
    labels: tuple = ("A", "B")

    def rms(self, label: str) -> np.ndarray:
        return np.array([r["rms"] for r in self.rows if r["label"] == label])

    def summary(self) -> dict:
        a, b = self.rms(self.labels[0]), self.rms(self.labels[1])
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = a / b
        ok = [r["status"] == STATUS_OK for r in self.rows]
        return {
            "seeds": len(a),
            "all_ok": all(ok),
            f"mean_rms_{self.labels[0]}": float(np.mean(a)) if len(a) else math.nan,
            f"mean_rms_{self.labels[1]}": float(np.mean(b)) if len(b) else math.nan,
            "rms_difference": [float(d) for d in a - b],
            # seeds on which the second configuration tracks strictly better
            "wins_second": int(np.sum(b < a)),
            "median_ratio": float(np.median(ratio)) if len(ratio) else math.nan,
        }


def _episode_row(job):
    cfg, seed, label = job
    result = run_episode(with_seed(cfg, seed))
    m = result.metrics
    row = {k: m.get(k, math.nan) for k in REPORT_COLUMNS}
    row.update(seed=seed, label=label, controller=cfg.controller, status=result.status)
    return row


def compare(config_a: ScenarioConfig, config_b: ScenarioConfig, n_seeds: int,
            base_seed: int = 0, labels=("A", "B"), jobs: int = 1) -> ComparisonReport:
    """Run both configurations on seeds ``base_seed .. base_seed + n_seeds - 1``.

    Both members of a pair see the same wind realization. Rows come back in
    seed order, first configuration first, whatever the worker count.
    """
    if n_seeds < 1:
        raise ValueError("need at least one seed")
    if labels[0] == labels[1]:
        labels = (f"{labels[0]}-1", f"{labels[1]}-2")
    jobs_list = []
    for seed in range(base_seed, base_seed + n_seeds):
        jobs_list.append((config_a, seed, labels[0]))
        jobs_list.append((config_b, seed, labels[1]))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_episode_row, jobs_list))
    else:
        rows = [_episode_row(job) for job in jobs_list]
    return ComparisonReport(rows, tuple(labels))
