"""Emit analysis tables (CSV, JSON, markdown) and log-log trajectory plots."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from pathlib import Path

import numpy as np

from .analysis import TABLE_COLUMNS, AnalysisBundle

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
FORMATS = ("csv", "json", "md", "svg")

_STR = {"dataset", "method", "metric"}
_INT = {"n", "valid_count", "peak_n", "n_points", "pair_count", "n_obs"}
_BOOL = {"monotone"}


class ReportError(OSError):
    """The output directory cannot be written."""


def _cell(col, value) -> str:
    if col in _STR or col in _INT:
        return str(value)
    if col in _BOOL:
        return "true" if value else "false"
    return repr(float(value))  # shortest round-tripping form


def _parse(col, text: str):
    if col in _STR:
        return text
    if col in _INT:
        return int(text)
    if col in _BOOL:
        return text == "true"
    return float(text)


def _prepare(out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ReportError(f"output directory {out} is not writable: {exc}") from exc
    return out


def write_csv(tables: dict, out: Path) -> list:
    paths = []
    for name, cols in TABLE_COLUMNS.items():
        path = out / f"{name}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in tables.get(name, []):
                w.writerow([_cell(c, row[c]) for c in cols])
        paths.append(path)
    return paths


def read_tables(out_dir) -> dict:
    """Re-ingest the CSV tables written by :func:`report`."""
    out = Path(out_dir)
    tables = {}
    for name, cols in TABLE_COLUMNS.items():
        with open(out / f"{name}.csv", newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != cols:
                raise ValueError(f"{name}.csv: unexpected header {header}")
            tables[name] = [{c: _parse(c, v) for c, v in zip(cols, line)} for line in reader]
    return tables


def write_json(bundle: AnalysisBundle, tables: dict, out: Path) -> Path:
    path = out / "bundle.json"
    doc = {
        "schema_version": SCHEMA_VERSION,
        "metric": bundle.metric,
        "repetitions": bundle.repetitions,
        "tables": tables,
        "flags": bundle.flags,
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "M" if v else "NM"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.3g}" if (abs(v) < 1e-3 and v != 0) or abs(v) >= 1e4 else f"{v:.3f}"
    return str(v)


def markdown_table(rows, cols) -> str:
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    lines += ["| " + " | ".join(_fmt(r[c]) for c in cols) + " |" for r in rows]
    return "\n".join(lines)


_MD_TITLES = {
    "fits": "Power-law fits (Var = C n^-alpha)",
    "peaks": "Worst single-seed error per method",
    "correlations": "Spearman: local variance vs rel-RMSE",
    "quartiles": "rel-RMSE by local-variance quartile",
    "fixed_effects": "Fixed-effects slope of log rel-RMSE on log local variance",
    "reliability": "Per-cell reliability",
    "trajectories": "Variance trajectories",
}


def write_markdown(bundle: AnalysisBundle, tables: dict, out: Path) -> Path:
    parts = [f"# Benchmark reliability report ({bundle.metric})", ""]
    if bundle.repetitions is not None:
        parts += [f"Using the first {bundle.repetitions} repetitions per cell.", ""]
    for name, title in _MD_TITLES.items():
        parts += [f"## {title}", "", markdown_table(tables.get(name, []), TABLE_COLUMNS[name]), ""]
    if bundle.flags:
        parts += ["## Flags", ""] + [f"- {f}" for f in bundle.flags] + [""]
    path = out / "report.md"
    path.write_text("\n".join(parts), encoding="utf-8")
    return path


def plot_trajectories(bundle: AnalysisBundle, out: Path) -> list:
    """One SVG per dataset: empirical variances and fitted curves, log-log."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.fonttype"] = "none"  # keep labels as searchable text

    by_ds = defaultdict(list)
    for rec in bundle.trajectories:
        by_ds[rec.dataset].append(rec)
    paths = []
    for ds, recs in sorted(by_ds.items()):
        fig, ax = plt.subplots(figsize=(6, 4.5))
        drew = False
        for i, rec in enumerate(recs):
            ns, vs = rec.usable()
            pos = vs > 0
            if not pos.any():
                continue
            color = f"C{i % 10}"
            ax.plot(ns[pos], vs[pos], "o", color=color, label=rec.method)
            fit = bundle.fits.get((rec.dataset, rec.method))
            if fit is not None and fit.C > 0:
                grid = np.geomspace(ns.min(), ns.max(), 100)
                ax.plot(grid, fit.predict(grid), "-", color=color, alpha=0.8,
                        label=f"{rec.method} fit (alpha={fit.alpha:.2f}, R2={fit.r2:.2f})")
            drew = True
        if not drew:
            plt.close(fig)
            continue
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("training size n")
        ax.set_ylabel(f"Var[{bundle.metric}] across runs")
        ax.set_title(ds)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out / f"trajectory_{ds}.svg"
        fig.savefig(path, format="svg")
        plt.close(fig)
        paths.append(path)
    return paths


def report(bundle: AnalysisBundle, out_dir, formats=FORMATS) -> list:
    """Write the requested formats into ``out_dir`` and return the paths."""
    unknown = set(formats) - set(FORMATS)
    if unknown:
        raise ValueError(f"unknown report formats {sorted(unknown)}; choose from {FORMATS}")
    out = _prepare(out_dir)
    tables = bundle.tables()
    if not bundle.trajectories:
        log.warning("empty analysis bundle: writing header-only tables and no plots")
    paths = []
    if "csv" in formats:
        paths += write_csv(tables, out)
    if "json" in formats:
        paths.append(write_json(bundle, tables, out))
    if "md" in formats:
        paths.append(write_markdown(bundle, tables, out))
    if "svg" in formats and bundle.trajectories:
        paths += plot_trajectories(bundle, out)
    return paths
