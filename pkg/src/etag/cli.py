"""Command line entry point: ``etag {train,ablate,grad-check,report}``.

Exit codes: 0 success, 1 bad input (config key, missing or malformed
metrics), 2 a run aborted on a non-finite loss, 3 a gradient check failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import METHODS, ConfigError, RunConfig, load_config
from .errors import EtagError, NonFiniteLossError

log = logging.getLogger("etag")

EXIT_OK, EXIT_INPUT, EXIT_NAN, EXIT_GRAD = 0, 1, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    name = os.environ.get("ETAG_LOG_LEVEL", "info").lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"ETAG_LOG_LEVEL must be one of {', '.join(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def _write_diagnostics(out: Path, err: NonFiniteLossError) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "diagnostics.json"
    path.write_text(json.dumps({"error": str(err), "where": err.diagnostics}, indent=2,
                               sort_keys=True, default=repr) + "\n")
    return path


def _run_one(config: RunConfig, out: Path) -> dict:
    from .harness import run_cil, write_run
    result = run_cil(config)
    write_run(result, out)
    return {"A": result.A, "F": result.F}


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    config = load_config(args.config, args.set)
    out = Path(args.out)
    try:
        m = _run_one(config, out)
    except NonFiniteLossError as err:
        path = _write_diagnostics(out, err)
        print(f"error: {err}; diagnostics in {path}", file=sys.stderr)
        return EXIT_NAN
    f_text = "n/a" if m["F"] is None else f"{m['F']:.4f}"
    print(f"{config.method} seed {config.seed}: A={m['A']:.4f} F={f_text} -> {out}")
    return EXIT_OK


def _parse_list(text: str, kind=str) -> list:
    return [kind(s) for s in re.split(r"[,\s]+", text.strip()) if s]


def _ablate_job(job):
    raw, out = job
    config = RunConfig.from_dict(raw)
    try:
        return _run_one(config, Path(out)), None
    except NonFiniteLossError as err:
        return None, str(_write_diagnostics(Path(out), err))


def summarize(rows: list[dict]) -> list[dict]:
    """Mean and sample standard deviation of A and F per variant, in first-seen order."""
    summary = []
    for variant in dict.fromkeys(r["variant"] for r in rows):
        group = [r for r in rows if r["variant"] == variant]
        entry = {"variant": variant, "runs": len(group)}
        for key in ("A", "F"):
            vals = np.array([r[key] for r in group if r[key] is not None], dtype=float)
            mean = float(vals.mean()) if vals.size else float("nan")
            std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
            entry[f"{key}_mean"], entry[f"{key}_std"] = mean, std
            entry[key] = f"{100 * mean:.2f}±{100 * std:.2f}"
        summary.append(entry)
    return summary


def cmd_ablate(args) -> int:
    base = load_config(args.config, args.set)
    variants = _parse_list(args.variants)
    unknown = [v for v in variants if v not in METHODS]
    if unknown:
        raise ConfigError(f"unknown variant(s) {', '.join(unknown)}; choose from {', '.join(METHODS)}")
    seeds = _parse_list(args.seeds, int)
    out = Path(args.out)
    jobs, keys = [], []
    for variant in variants:
        for seed in seeds:
            raw = base.to_dict()
            raw.update(method=variant, seed=seed)
            RunConfig.from_dict(raw)  # validate everything before any training starts
            jobs.append((raw, str(out / variant / f"seed_{seed}")))
            keys.append((variant, seed))
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_ablate_job, jobs))
    else:
        results = [_ablate_job(job) for job in jobs]

    rows, failed = [], []
    for (variant, seed), (metrics, diag) in zip(keys, results):
        if metrics is None:
            failed.append(diag)
            continue
        rows.append({"variant": variant, "seed": seed, **metrics})
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "runs.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=["variant", "seed", "A", "F"])
        wr.writeheader()
        wr.writerows({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()} for r in rows)
    summary = summarize(rows)
    with open(out / "ablation.csv", "w", newline="") as fh:
        fields = ["variant", "runs", "A", "F", "A_mean", "A_std", "F_mean", "F_std"]
        wr = csv.DictWriter(fh, fieldnames=fields)
        wr.writeheader()
        wr.writerows({k: (repr(v) if isinstance(v, float) else v) for k, v in s.items()} for s in summary)
    for s in summary:
        print(f"{s['variant']:6s} A={s['A']} F={s['F']} ({s['runs']} runs)")
    if failed:
        print(f"error: {len(failed)} run(s) hit a non-finite loss; see {', '.join(failed)}", file=sys.stderr)
        return EXIT_NAN
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .checks import TOLERANCE, run_suite
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = run_suite(args.points, args.seed)
    with open(out / "grad_check.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["check", "max_rel_error", "points", "seconds", "status"])
        for r in results:
            wr.writerow([r.name, repr(r.max_error), r.points, f"{r.seconds:.3f}", "pass" if r.passed else "FAIL"])
    failed = [r for r in results if not r.passed]
    for r in results:
        log.info("%-26s %.2e %s", r.name, r.max_error, "ok" if r.passed else "FAIL")
    if failed:
        names = ", ".join(f"{r.name} ({r.max_error:.3g})" for r in failed)
        print(f"gradient check failed (tolerance {TOLERANCE:g}): {names}", file=sys.stderr)
        return EXIT_GRAD
    print(f"all {len(results)} gradient checks passed; report in {out / 'grad_check.csv'}")
    return EXIT_OK


def _load_metrics(run_dir: Path) -> dict:
    path = run_dir / "metrics.json"
    try:
        m = json.loads(path.read_text())
        acc = m["acc_matrix"]
        if not all(len(row) == t + 1 for t, row in enumerate(acc)):
            raise ValueError("accuracy matrix is not lower-triangular")
        m["confusion"]  # noqa: B018  required key
    except FileNotFoundError:
        raise ConfigError(f"{path}: no metrics.json") from None
    except (ValueError, KeyError, TypeError) as err:
        raise ConfigError(f"{path}: malformed metrics ({err})") from None
    return m


def _run_ids(dirs: list[Path]) -> list[str]:
    ids = []
    for d in dirs:
        name = d.resolve().name
        rid, k = name, 2
        while rid in ids:
            rid, k = f"{name}_{k}", k + 1
        ids.append(rid)
    return ids


def cmd_report(args) -> int:
    dirs = [Path(d) for d in args.runs]
    metrics = [_load_metrics(d) for d in dirs]
    ids = _run_ids(dirs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_tasks = max(len(m["acc_matrix"]) for m in metrics)
    with open(out / "curves.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["after_task", "task"] + ids)
        for t in range(n_tasks):
            for j in range(t + 1):
                wr.writerow([t, j] + [repr(m["acc_matrix"][t][j]) if t < len(m["acc_matrix"]) else ""
                                      for m in metrics])
    with open(out / "cumulative.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["after_task"] + ids)
        for t in range(n_tasks):
            wr.writerow([t] + [repr(m["cumulative_accuracy"][t]) if t < len(m.get("cumulative_accuracy", []))
                               else "" for m in metrics])
    for rid, m in zip(ids, metrics):
        conf = m["confusion"]
        with open(out / f"confusion_{rid}.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["true\\pred"] + list(range(len(conf))))
            for i, row in enumerate(conf):
                wr.writerow([i] + list(row))
    print(f"report for {len(metrics)} run(s) written to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="etag", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p):
        p.add_argument("--config", help="YAML run config (defaults apply when omitted)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-key override, e.g. train.solver_epochs=5 (repeatable)")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="one class-incremental run")
    config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="one run per (variant, seed) plus a summary table")
    config_args(p)
    p.add_argument("--variants", default="eTag,B0,B1,B2,B3", help="comma-separated method names")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated integer seeds")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--out", required=True)
    p.add_argument("--points", type=int, default=10, help="random points per check")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("report", help="CSV accuracy curves and confusion matrices from run dirs")
    p.add_argument("runs", nargs="+", help="run directories containing metrics.json")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except (EtagError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    raise SystemExit(main())
