"""Command-line entry point: ``imavae {gen-data,run,export,verify}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from .errors import ImaVaeError
from .experiments import (_DATA, _seed_seq, _source_dist, build_mixing, export_results,
                          load_config, paper_scale, records_from_csv, run_experiment)
from .metrics import fit_loglog_slope
from .mixing import dataset_to_text, make_dataset

log = logging.getLogger("imavae")


def _resolve(args):
    config = load_config(args.config)
    if getattr(args, "paper_scale", False):
        config = paper_scale(config)
    if getattr(args, "seed", None) is not None:
        config.master_seed = int(args.seed)
    return config


def cmd_gen_data(args) -> int:
    config = _resolve(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    severities = config.cima_severity_grid or [None]
    for seed in config.seeds:
        for si, sev in enumerate(severities):
            spec = build_mixing(config, seed, sev)
            data = make_dataset(spec, _source_dist(config), config.samples,
                                _seed_seq(config, _DATA, seed))
            name = f"data_seed{seed}" + (f"_sev{si}" if sev is not None else "") + ".txt"
            (out / name).write_text(dataset_to_text(data))
            print(out / name)
    return 0


def cmd_run(args) -> int:
    config = _resolve(args)
    records, timings = run_experiment(config, workers=args.workers, with_timing=True)
    path = export_results(records, args.out, config, timings)
    n_err = sum(r.error is not None for r in records)
    print(f"wrote {len(records)} records to {path} ({n_err} failed cells)")
    return 0 if n_err == 0 else 3


SUMMARY_FIELDS = ["elbo_star", "log_px", "l_ima", "cima_local_mean", "cima_global", "mcc",
                  "mean_sigma_sq", "median_recon_gap", "optl_sigma_rel_err", "gap"]


def cmd_export(args) -> int:
    """Aggregate a results CSV into per-(gamma^2, severity) means over seeds."""
    records = records_from_csv(Path(args.input).read_text())
    groups = defaultdict(list)
    for r in records:
        if r.error is None:
            groups[(r.gamma_sq, r.severity)].append(r)
    rows = []
    for (g, sev), recs in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1] or 0.0)):
        row = {"gamma_sq": g, "severity": sev, "n": len(recs)}
        for f in SUMMARY_FIELDS:
            vals = [getattr(r, f) for r in recs if getattr(r, f) is not None]
            row[f] = float(np.mean(vals)) if vals else None
        rows.append(row)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["gamma_sq", "severity", "n"] + SUMMARY_FIELDS
        w.writerow(header)
        for row in rows:
            w.writerow(["null" if row[h] is None else repr(row[h]) if isinstance(row[h], float)
                        else row[h] for h in header])
    sig = [(r["gamma_sq"], r["mean_sigma_sq"]) for r in rows if r["mean_sigma_sq"]]
    if len({g for g, _ in sig}) >= 3:
        slope, _, r2 = fit_loglog_slope([g for g, _ in sig], [s for _, s in sig])
        print(f"log-log slope of mean sigma^2 vs gamma^2: {slope:.4f} (r^2 {r2:.4f})")
    print(f"wrote {len(rows)} summary rows to {out}")
    return 0


def cmd_verify(args) -> int:
    from .acceptance import run_criteria

    only = [int(c) for c in args.only.split(",")] if args.only else None
    results = run_criteria(only, workers=args.workers)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="imavae", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", required=True, help="YAML experiment config")
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--paper-scale", action="store_true",
                        help="use full sample and seed counts instead of desk-scale ones")
        sp.add_argument("--seed", type=int, default=None, help="override the 64-bit master seed")

    g = sub.add_parser("gen-data", help="write the datasets of a config")
    common(g, "output directory")
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("run", help="run an experiment sweep and write a CSV")
    common(r, "CSV path; metadata goes to <out>.meta.json")
    r.add_argument("--workers", type=int, default=1)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("export", help="summarise a results CSV per grid point")
    e.add_argument("--in", dest="input", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_export)

    v = sub.add_parser("verify", help="run the acceptance criteria")
    v.add_argument("--only", default=None, help="comma-separated criterion numbers")
    v.add_argument("--workers", type=int, default=1)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ImaVaeError, OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc),
                          "command": args.command}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
