import math
import os
import re

import numpy as np
import pytest

from benchrel.analysis import POOLED, TABLE_COLUMNS, analyze, build_trajectories
from benchrel.report import ReportError, read_tables, report
from benchrel.runner import RunResult

SIZES = (10, 20, 50, 100, 200)


def _results(rng, methods=("A", "B"), datasets=("toy",), reps=8, alpha=1.0, constant=False):
    out = []
    for ds in datasets:
        for mi, meth in enumerate(methods):
            for n in SIZES:
                sd = math.sqrt(0.5 * (1 + mi) * n ** -alpha)
                for rep in range(reps):
                    v = 0.4 if constant else 1.0 + sd * rng.normal()
                    out.append(RunResult(ds, meth, n, rep, {"CRPS": v}, True, {}))
    return out


def test_constant_store_is_degenerate_but_well_defined(rng):
    bundle = analyze(_results(rng, constant=True))
    for fit in bundle.fits.values():
        assert (fit.alpha, fit.C, fit.r2, fit.monotone) == (0.0, 0.0, 1.0, True)
    assert all(r.rel_rmse == 0.0 and r.p_within_10 == 1.0 for r in bundle.rows)


def test_repetition_subsampling_uses_first_reps(rng):
    results = _results(rng, reps=10)
    sub = analyze(results, repetitions=4)
    manual = analyze([r for r in results if r.rep < 4])
    assert sub.tables()["reliability"] == manual.tables()["reliability"]
    for rec in sub.trajectories:
        assert all(p.valid_count == 4 for p in rec.points)


def test_invalid_runs_are_flagged_and_dropped(rng):
    results = _results(rng, methods=("A",), reps=3)
    results[0] = RunResult("toy", "A", 10, 0, {}, False, {}, "diverged", 3)
    results[1] = RunResult("toy", "A", 10, 1, {}, False, {}, "diverged", 3)
    bundle = analyze(results)
    point = bundle.trajectories[0].points[0]
    assert point.valid_count == 1
    assert any("invalid" in f for f in bundle.flags)
    assert any("fewer than 2" in f for f in bundle.flags)
    assert 10 not in {r.n for r in bundle.rows}


def test_values_are_ordered_by_rep(rng):
    results = _results(rng, methods=("A",), reps=5)
    recs = build_trajectories(list(reversed(results)), "CRPS")
    first = recs[0].points[0].values
    assert first == tuple(r.metrics["CRPS"] for r in results[:5])


def test_pooled_correlation_only_with_several_datasets(rng):
    one = analyze(_results(rng))
    two = analyze(_results(rng, datasets=("d1", "d2")))
    assert POOLED not in one.correlations
    assert POOLED in two.correlations
    assert POOLED not in two.quartiles


def test_csv_round_trip_is_exact(rng, tmp_path):
    bundle = analyze(_results(rng, datasets=("d1", "d2"), methods=("A", "B", "C")))
    report(bundle, tmp_path)
    back = read_tables(tmp_path)
    orig = bundle.tables()
    for name in TABLE_COLUMNS:
        assert len(back[name]) == len(orig[name])
        for a, b in zip(orig[name], back[name]):
            for col in TABLE_COLUMNS[name]:
                x, y = a[col], b[col]
                if isinstance(x, float) and math.isnan(x):
                    assert math.isnan(y)
                else:
                    assert y == x and type(y) is type(x)


def test_all_formats_written(rng, tmp_path):
    paths = report(analyze(_results(rng, datasets=("d1", "d2"))), tmp_path)
    names = {p.name for p in paths}
    assert {f"{t}.csv" for t in TABLE_COLUMNS} <= names
    assert {"bundle.json", "report.md", "trajectory_d1.svg", "trajectory_d2.svg"} <= names
    md = (tmp_path / "report.md").read_text()
    assert md.count("| d1 | A |") >= 1 and "## Power-law fits" in md


def test_svg_is_log_log_with_points_and_fit(rng, tmp_path):
    report(analyze(_results(rng)), tmp_path, formats=("svg",))
    svg = (tmp_path / "trajectory_toy.svg").read_text()
    assert svg.lstrip().startswith("<?xml")
    # log tick labels are "10" followed by a smaller superscript exponent
    sup = r"\s*<tspan[^>]*font-size: 7px[^>]*>"
    decades = re.findall(rf">1</tspan>\s*<tspan[^>]*>0</tspan>{sup}(\u2212</tspan>{sup})?(\d)<", svg)
    exps = {("-" if neg else "") + d for neg, d in decades}
    assert {"1", "2"} <= exps  # x axis spans 10..200
    assert any(e.startswith("-") for e in exps)  # y axis variances below one
    assert svg.count("fit (alpha=") == 2
    assert "training size n" in svg


def test_empty_bundle_gives_header_only_tables(tmp_path, caplog):
    bundle = analyze([])
    with caplog.at_level("WARNING"):
        paths = report(bundle, tmp_path)
    assert not [p for p in paths if p.suffix == ".svg"]
    assert "empty" in caplog.text
    for name, cols in TABLE_COLUMNS.items():
        lines = (tmp_path / f"{name}.csv").read_text().splitlines()
        assert lines == [",".join(cols)]


def test_unknown_format_rejected(rng, tmp_path):
    with pytest.raises(ValueError):
        report(analyze(_results(rng)), tmp_path, formats=("pdf",))


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_unwritable_directory_raises(rng, tmp_path):
    tmp_path.chmod(0o500)
    try:
        with pytest.raises(ReportError):
            report(analyze(_results(rng)), tmp_path / "out")
    finally:
        tmp_path.chmod(0o700)


def test_output_path_under_a_file_raises(rng, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ReportError):
        report(analyze(_results(rng)), blocker / "out")


def test_decreasing_variance_recovers_exponent(rng):
    bundle = analyze(_results(rng, methods=("A",), reps=400, alpha=1.0))
    fit = bundle.fits[("toy", "A")]
    assert fit.alpha == pytest.approx(1.0, abs=0.15)
    assert fit.monotone
    assert np.isfinite(bundle.correlations["toy"].rho)
