"""Turn a results store into trajectories, fits and reliability statistics."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .reliability import (
    ReliabilityRow,
    fixed_effects_fit,
    quartile_analysis,
    single_seed_summary,
    spearman,
)
from .trajectory import TrajectoryPoint, TrajectoryRecord, empirical_variance, fit_trajectory

log = logging.getLogger(__name__)

POOLED = "all"

# column order of every emitted table
TABLE_COLUMNS = {
    "fits": ["dataset", "method", "metric", "alpha", "C", "r2", "monotone", "n_points"],
    "trajectories": ["dataset", "method", "metric", "n", "valid_count", "mean", "variance"],
    "reliability": ["dataset", "method", "metric", "n", "valid_count", "local_variance", "rel_rmse",
                    "p_within_10", "mean_metric"],
    "peaks": ["dataset", "method", "metric", "max_rel_rmse", "peak_n", "p_within_10"],
    "correlations": ["dataset", "metric", "rho", "p_value", "pair_count"],
    "quartiles": ["dataset", "metric", "q1", "q2", "q3", "q4", "high_var_mean", "rest_mean", "ratio",
                  "mw_p", "monotone"],
    "fixed_effects": ["metric", "slope", "se", "ci_low", "ci_high", "n_obs"],
}


@dataclass
class AnalysisBundle:
    metric: str
    repetitions: int | None
    trajectories: list = field(default_factory=list)
    fits: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)
    correlations: dict = field(default_factory=dict)
    quartiles: dict = field(default_factory=dict)
    fixed_effects: object = None
    flags: list = field(default_factory=list)

    def tables(self) -> dict:
        t = {name: [] for name in TABLE_COLUMNS}
        m = self.metric
        for rec in self.trajectories:
            for p in rec.points:
                vals = np.asarray(p.values, dtype=np.float64)
                t["trajectories"].append({
                    "dataset": rec.dataset, "method": rec.method, "metric": rec.metric, "n": p.n,
                    "valid_count": p.valid_count,
                    "mean": float(vals.mean()) if vals.size else math.nan,
                    "variance": empirical_variance(vals) if vals.size >= 2 else math.nan,
                })
            fit = self.fits.get((rec.dataset, rec.method))
            if fit is not None:
                t["fits"].append({
                    "dataset": rec.dataset, "method": rec.method, "metric": rec.metric,
                    "alpha": fit.alpha, "C": fit.C, "r2": fit.r2, "monotone": fit.monotone,
                    "n_points": fit.n_points,
                })
        by_cell = defaultdict(list)
        for r in self.rows:
            t["reliability"].append({
                "dataset": r.dataset, "method": r.method, "metric": m, "n": r.n,
                "valid_count": r.valid_count, "local_variance": r.local_variance,
                "rel_rmse": r.rel_rmse, "p_within_10": r.p_within_10, "mean_metric": r.mean_metric,
            })
            by_cell[(r.dataset, r.method)].append(r)
        for (ds, meth), rows in by_cell.items():
            worst = max(rows, key=lambda r: (r.rel_rmse, -r.n))
            t["peaks"].append({
                "dataset": ds, "method": meth, "metric": m, "max_rel_rmse": worst.rel_rmse,
                "peak_n": worst.n, "p_within_10": worst.p_within_10,
            })
        for ds, c in self.correlations.items():
            t["correlations"].append({"dataset": ds, "metric": m, "rho": c.rho, "p_value": c.p_value,
                                      "pair_count": c.pair_count})
        for ds, q in self.quartiles.items():
            q1, q2, q3, q4 = q.quartile_means
            t["quartiles"].append({
                "dataset": ds, "metric": m, "q1": q1, "q2": q2, "q3": q3, "q4": q4,
                "high_var_mean": q.high_var_mean, "rest_mean": q.rest_mean, "ratio": q.ratio,
                "mw_p": q.mw_p, "monotone": q.monotone,
            })
        if self.fixed_effects is not None:
            fe = self.fixed_effects
            t["fixed_effects"].append({"metric": m, "slope": fe.slope, "se": fe.se, "ci_low": fe.ci_low,
                                       "ci_high": fe.ci_high, "n_obs": fe.n_obs})
        return t


def build_trajectories(results, metric: str, repetitions: int | None = None, flags=None):
    """Group valid run values by (dataset, method) into trajectories.

    With ``repetitions`` only reps ``0 .. repetitions-1`` are used.
    """
    cells = defaultdict(list)
    for r in results:
        if repetitions is not None and r.rep >= repetitions:
            continue
        cells[(r.dataset, r.method, r.n)].append(r)
    grouped = defaultdict(list)
    for (ds, meth, n), runs in sorted(cells.items()):
        runs.sort(key=lambda r: r.rep)
        vals = tuple(r.metrics[metric] for r in runs if r.valid and metric in r.metrics)
        if flags is not None and len(vals) < len(runs):
            flags.append(f"{ds}/{meth}/n={n}: {len(runs) - len(vals)} invalid runs")
        if flags is not None and len(vals) < 2:
            flags.append(f"{ds}/{meth}/n={n}: fewer than 2 valid runs, excluded")
        grouped[(ds, meth)].append(TrajectoryPoint(n, vals, len(vals)))
    return [TrajectoryRecord(meth, ds, metric, tuple(pts)) for (ds, meth), pts in sorted(grouped.items())]


def reliability_rows(trajectories, flags=None):
    rows = []
    for rec in trajectories:
        for p in rec.points:
            if p.valid_count < 2:
                continue
            try:
                rel_rmse, p10 = single_seed_summary(p.values)
            except ValueError as exc:
                if flags is not None:
                    flags.append(f"{rec.dataset}/{rec.method}/n={p.n}: {exc}")
                continue
            rows.append(ReliabilityRow(rec.method, rec.dataset, p.n, empirical_variance(p.values),
                                       rel_rmse, p10, float(np.mean(p.values)), p.valid_count))
    return rows


def analyze(results, metric: str = "CRPS", repetitions: int | None = None) -> AnalysisBundle:
    """Build the full analysis bundle for one metric.

    ``results`` is an iterable of RunResult (e.g. ``store.results()``).
    """
    results = list(results)
    bundle = AnalysisBundle(metric, repetitions)
    bundle.trajectories = build_trajectories(results, metric, repetitions, bundle.flags)
    for rec in bundle.trajectories:
        fit = fit_trajectory(rec)
        if fit is None:
            bundle.flags.append(f"{rec.dataset}/{rec.method}: too few usable cells for a power-law fit")
        else:
            bundle.fits[(rec.dataset, rec.method)] = fit
    bundle.rows = reliability_rows(bundle.trajectories, bundle.flags)

    per_ds = defaultdict(list)
    for r in bundle.rows:
        per_ds[r.dataset].append(r)
    groups = dict(per_ds)
    if len(per_ds) > 1:
        groups[POOLED] = list(bundle.rows)
    for ds, rows in groups.items():
        try:
            bundle.correlations[ds] = spearman([r.local_variance for r in rows], [r.rel_rmse for r in rows])
        except ValueError as exc:
            bundle.flags.append(f"{ds}: no Spearman correlation ({exc})")
        if ds != POOLED:
            try:
                bundle.quartiles[ds] = quartile_analysis(rows)
            except ValueError as exc:
                bundle.flags.append(f"{ds}: no quartile analysis ({exc})")
    n_groups = len({r.dataset for r in bundle.rows}) + len({r.method for r in bundle.rows})
    if n_groups >= 3:
        try:
            bundle.fixed_effects = fixed_effects_fit(bundle.rows)
        except ValueError as exc:
            bundle.flags.append(f"no fixed-effects fit ({exc})")
    return bundle
