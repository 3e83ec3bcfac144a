"""Command-line entry point: ``benchrel {fetch,run,analyze,report,selftest}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .analysis import analyze
from .config import ConfigError, load_config
from .data import DatasetError, fetch_dataset, load_dataset
from .report import FORMATS, ReportError, report
from .runner import ResultsStore, StoreMismatch, run_experiment

log = logging.getLogger("benchrel")

EXIT_OK, EXIT_FATAL, EXIT_INVALID = 0, 1, 2


def _cmd_fetch(args, cfg) -> int:
    for spec in cfg.datasets:
        if spec.source == "remote-url":
            path = fetch_dataset(spec, cfg.cache_path, timeout=args.timeout)
            print(f"{spec.name}: {path}")
        else:
            ds = load_dataset(spec, cfg.cache_path)
            print(f"{spec.name}: {spec.source}, {len(ds)} rows, {ds.d} features")
    return EXIT_OK


def _cmd_run(args, cfg) -> int:
    if args.workers is not None:
        cfg = replace(cfg, workers=args.workers)
    if args.output_dir is not None:
        cfg = replace(cfg, output_dir=args.output_dir)

    def progress(done, total, result):
        if not args.quiet:
            state = "ok" if result.valid else f"INVALID ({result.error})"
            print(f"[{done}/{total}] {result.dataset} {result.method} n={result.n} rep={result.rep} "
                  f"{state} {result.wall_time:.1f}s", flush=True)

    summary = run_experiment(cfg, progress, max_cells=args.max_cells)
    print(f"{summary.completed} cells run, {summary.skipped_existing} already stored, "
          f"{summary.invalid} invalid, {len(summary.skipped_cells)} (dataset, n) pairs skipped")
    return EXIT_INVALID if summary.exit_code == 2 else EXIT_OK


def _open_store(args, cfg) -> ResultsStore:
    root = Path(args.output_dir or cfg.output_dir)
    if not (root / "manifest.json").exists():
        raise ConfigError(f"no results store at {root}; run `benchrel run` first")
    store = ResultsStore(root)
    if store.manifest().get("config_hash") != cfg.hash():
        raise StoreMismatch(f"store at {root} does not match this config")
    store.load()
    if len(store) == 0:
        raise ConfigError(f"results store at {root} is empty")
    return store


def _bundle(args, cfg):
    store = _open_store(args, cfg)
    metric = args.metric or cfg.metrics[0].key
    return analyze(store.results(), metric, args.reps)


def _cmd_analyze(args, cfg) -> int:
    bundle = _bundle(args, cfg)
    tables = bundle.tables()
    if args.json:
        print(json.dumps(tables, indent=2))
    else:
        for row in tables["fits"]:
            label = "M" if row["monotone"] else "NM"
            print(f"{row['dataset']:>12} {row['method']:>14}  alpha={row['alpha']:.3f}  "
                  f"R2={row['r2']:.3f}  {label}")
        for row in tables["correlations"]:
            print(f"spearman[{row['dataset']}] rho={row['rho']:.3f} p={row['p_value']:.2g}")
        for f in bundle.flags:
            print(f"flag: {f}")
    return EXIT_OK


def _cmd_report(args, cfg) -> int:
    bundle = _bundle(args, cfg)
    out = Path(args.out) if args.out else Path(args.output_dir or cfg.output_dir) / "report"
    formats = tuple(args.formats.split(",")) if args.formats else FORMATS
    for path in report(bundle, out, formats):
        print(path)
    return EXIT_OK


def _cmd_selftest(args, cfg) -> int:
    from .selftest import run_selftest

    ok = True
    for check in run_selftest():
        print(f"{'PASS' if check.passed else 'FAIL'}  {check.name}: {check.detail}")
        ok &= check.passed
    return EXIT_OK if ok else EXIT_FATAL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="benchrel", description="Seed-variance reliability harness for "
                                "probabilistic regression benchmarks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("config", help="experiment TOML file")
        return sp

    f = with_config(sub.add_parser("fetch", help="download and verify datasets"))
    f.add_argument("--timeout", type=float, default=60.0)
    r = with_config(sub.add_parser("run", help="execute (or resume) the experiment grid"))
    r.add_argument("--workers", type=int)
    r.add_argument("--output-dir")
    r.add_argument("--max-cells", type=int, help="stop after this many new cells")
    r.add_argument("-q", "--quiet", action="store_true")
    for name, help_ in (("analyze", "print fits and reliability statistics"),
                        ("report", "write CSV/JSON/markdown tables and SVG plots")):
        sp = with_config(sub.add_parser(name, help=help_))
        sp.add_argument("--output-dir", help="results store (defaults to the config's output_dir)")
        sp.add_argument("--metric", help="metric key, e.g. CRPS or PICP@0.9")
        sp.add_argument("--reps", type=int, help="use only the first R' repetitions per cell")
        if name == "analyze":
            sp.add_argument("--json", action="store_true")
        else:
            sp.add_argument("--out", help="report directory (default <output_dir>/report)")
            sp.add_argument("--formats", help=f"comma-separated subset of {','.join(FORMATS)}")
    sub.add_parser("selftest", help="run quick oracle checks")
    return p


_COMMANDS = {"fetch": _cmd_fetch, "run": _cmd_run, "analyze": _cmd_analyze, "report": _cmd_report,
             "selftest": _cmd_selftest}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if hasattr(args, "config") else None
        return _COMMANDS[args.command](args, cfg)
    except (ConfigError, DatasetError, StoreMismatch, ReportError, OSError) as exc:
        print(f"benchrel: error: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
