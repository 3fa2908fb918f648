"""Command-line entry point: ``spsc-lab run|grid|ablate|rate``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .config import ExperimentConfig
from .harness import (
    ABLATIONS,
    Job,
    ablation_defaults,
    emit,
    env_seed,
    error_row,
    execute,
    failed,
    run_ablation,
    run_episode,
    run_grid,
    subspace_rate_report,
    summarize,
)

log = logging.getLogger("spsc_lab")

RATE_DEFAULTS = dict(d=20, r=3, K=1, rate_bins=[50, 100, 200, 400, 800, 1600, 2000])


def _config(args, base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    cfg = ExperimentConfig.load(args.config, base) if args.config else base
    if args.quick:
        cfg = cfg.quick()
    if args.seeds is not None:
        cfg = cfg.replace(n_seeds=args.seeds)
    cfg.validate()
    return cfg


def _default_out(args) -> Path:
    name = args.command if args.command != "ablate" else f"ablate_{args.kind}"
    return Path(f"{name}.{args.format}")


def _write_table(rows: list[dict], fmt: str, path: Path, extra: dict | None = None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        path.write_text(json.dumps({**(extra or {}), "rows": rows}, indent=1))
        return
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else [])
        writer.writeheader()
        writer.writerows(rows)


def cmd_run(args) -> int:
    cfg = _config(args)
    jobs, series, results = [], {}, []
    for rep in range(cfg.n_seeds):
        seed = env_seed(cfg, rep)
        for method in cfg.methods:
            jobs.append(Job(cfg, method, seed, "run"))
    if args.workers > 1:
        results = execute(jobs, args.workers)
    else:
        for job in jobs:
            try:
                trace, res = run_episode(cfg, job.method, job.seed)
            except Exception as exc:
                log.error("run failed: %s seed=%s: %s", job.method, job.seed, exc)
                res = error_row(job)
            else:
                series[f"{job.method}/{job.seed}"] = trace.cumulative_costed
            results.append(res)
    out = Path(args.out or _default_out(args))
    emit(results, args.format, out, series=series or None)
    for s in summarize(results, cfg.T):
        print(_fmt_summary(s))
    return 1 if failed(results) else 0


def _fmt_summary(s) -> str:
    parts = [f"d={s.d} r={s.r}"]
    parts += [f"{m}={s.mean[m]:.1f}±{s.se[m]:.1f}" for m in s.mean]
    if s.ratio == s.ratio:
        parts.append(f"S/L={s.ratio:.3f} verdict={s.verdict}")
        parts.append(f"crossover_predicts={'SPSC' if s.crossover_predicts_spsc else 'LinUCB'}")
    return "  ".join(parts)


def cmd_grid(args) -> int:
    cfg = _config(args)
    summary, results = run_grid(cfg, args.workers)
    out = Path(args.out or _default_out(args))
    emit(results, args.format, out)
    rows = []
    for s in summary:
        row = {"d": s.d, "r": s.r, "ratio": s.ratio, "verdict": s.verdict,
               "crossover_predicts_spsc": s.crossover_predicts_spsc, "error": s.error}
        for m in s.mean:
            row[f"{m}_mean"], row[f"{m}_se"] = s.mean[m], s.se[m]
        rows.append(row)
        print(_fmt_summary(s))
    _write_table(rows, args.format, out.with_name(out.stem + "_summary." + args.format))
    return 1 if failed(results) else 0


def cmd_ablate(args) -> int:
    cfg = _config(args, ablation_defaults(args.kind))
    results = run_ablation(args.kind, cfg, args.workers)
    emit(results, args.format, Path(args.out or _default_out(args)))
    groups: dict = {}
    for res in results:
        groups.setdefault((res.experiment, res.method), []).append(res.costed_regret)
    for (label, method), vals in groups.items():
        print(f"{label:28s} {method:16s} mean costed regret {sum(vals) / len(vals):10.1f}  (n={len(vals)})")
    return 1 if failed(results) else 0


def cmd_rate(args) -> int:
    cfg = _config(args, ExperimentConfig().replace(**RATE_DEFAULTS))
    rows, slope = subspace_rate_report(cfg)
    out = Path(args.out or _default_out(args))
    _write_table(rows, args.format, out, extra={"slope": slope, "config": asdict(cfg)})
    for row in rows:
        print(f"m={row['probe_count']:6d}  mean projector error {row['mean_error']:.4f}")
    print(f"log-log slope {slope:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spsc-lab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML file of config keys")
        p.add_argument("--out", help="output path (default: <command>.<format>)")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.add_argument("--seeds", type=int, help="number of seeds (overrides config)")
        p.add_argument("--quick", action="store_true", help="3 seeds, T<=2000 smoke run")
        p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
        p.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("run", help="single cell, every configured method"))
    common(sub.add_parser("grid", help="(d, r) phase grid"))
    p = sub.add_parser("ablate", help="one robustness or sensitivity sweep")
    p.add_argument("kind", choices=ABLATIONS)
    common(p)
    common(sub.add_parser("rate", help="subspace error vs. probe count"))
    return parser


COMMANDS = {"run": cmd_run, "grid": cmd_grid, "ablate": cmd_ablate, "rate": cmd_rate}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
