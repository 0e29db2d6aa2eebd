"""Command-line entry points.

Verbs:
    run        one experiment from a config file -> one JSONL record
    sweep      B/C/E/lr/optimizer/k grid from the config's sweep section
    attack     fc/dlg gradient-inversion campaign
    baselines  local-only and centralized reference accuracies
    report     render a JSONL record file as CSV and print a summary

Exit codes: 0 success, 2 bad usage/config, 3 diverged run.
The FEDBENCH_SEED environment variable overrides the config's base seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from . import metrics, runner
from .config import load_config, resolve_config
from .errors import ConfigError, DivergedError, FedBenchError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3


def _load(args) -> dict:
    cfg = load_config(args.config)
    env_seed = os.environ.get("FEDBENCH_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"FEDBENCH_SEED must be an integer, got {env_seed!r}"
                              ) from exc
        cfg["dataset"]["seed"] = cfg["seed"]
        cfg = resolve_config(cfg)
    if getattr(args, "durations", None):
        cfg["durations"]["mode"] = args.durations
    return cfg


def _out_path(args, cfg) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if cfg.get("output"):
        return Path(cfg["output"])
    return Path("records.jsonl")


def cmd_run(args) -> int:
    cfg = _load(args)
    try:
        record = runner.run_experiment(cfg)
    except DivergedError as exc:
        print(f"run diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    out = _out_path(args, cfg)
    runner.append_record(out, record)
    print(f"fl_acc={record['fl_acc']} comm_round={record['comm_round']} "
          f"time_all={record['time_all']:.3f}s -> {out}")
    return EXIT_OK


def cmd_baselines(args) -> int:
    cfg = _load(args)
    cfg["baselines"] = True
    cfg["strategy"]["name"] = "central"
    try:
        record = runner.run_experiment(cfg)
    except DivergedError as exc:
        print(f"baseline training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    out = _out_path(args, cfg)
    runner.append_record(out, record)
    print(f"local_acc={record['local_acc']:.5f} "
          f"central_acc={record['central_acc']:.5f} -> {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    out = _out_path(args, cfg)
    cells = runner.sweep_cells(resolve_config(cfg))
    print(f"sweep: {len(cells)} cells -> {out}")
    records = runner.run_sweep(cfg, out, jobs=args.jobs)
    done = runner.read_records(out)
    ok = [r for r in done if r.get("status") == "ok"]
    failed = [r for r in done if r.get("status") in ("failed", "diverged")]
    print(f"completed {len(records)} new cells ({len(failed)} failed, "
          f"{len(ok)} ok total)")
    _print_sweep_summary(ok)
    return EXIT_OK


def _print_sweep_summary(records: list[dict], delta: float = 0.01) -> None:
    ranked = metrics.eligible_cells(records, delta)
    if not ranked:
        best = metrics.select_best_cell(records, delta)
        if best is not None:
            print(f"no cell within {delta:.0%} accuracy loss; best accuracy: "
                  f"B={best['B']} C={best['C']} E={best['E']} lr={best['lr']} "
                  f"fl_acc={best['fl_acc']:.4f}")
        return
    print(f"cells within {delta:.0%} accuracy loss, fastest first:")
    print(f"{'B':>6} {'C':>6} {'E':>4} {'lr':>8} {'fl_acc':>8} {'time_all':>10} "
          f"{'rounds':>7}")
    for r in ranked:
        print(f"{str(r['B']):>6} {r['C']:>6} {r['E']:>4} {r['lr']:>8} "
              f"{r['fl_acc']:>8.4f} {r['time_all']:>10.3f} {r['comm_round']:>7}")


def cmd_attack(args) -> int:
    cfg = _load(args)
    out = _out_path(args, cfg)
    dump = None
    if args.dump_images or cfg.get("attack", {}).get("dump_images"):
        dump = Path(args.dump_dir) if args.dump_dir else out.parent / "attack_images"
    runner.run_attack_campaign(cfg, out, jobs=args.jobs, dump_dir=dump)
    return EXIT_OK


def cmd_report(args) -> int:
    records = runner.read_records(args.records)
    if not records:
        print(f"no records in {args.records}", file=sys.stderr)
        return EXIT_USAGE
    csv_path = Path(args.csv) if args.csv else Path(args.records).with_suffix(".csv")
    write_csv(records, csv_path)
    print(f"wrote {len(records)} rows to {csv_path}")
    run_records = [r for r in records if r.get("fl_acc") is not None]
    if run_records:
        _print_sweep_summary(run_records, delta=args.delta)
    return EXIT_OK


def write_csv(records: list[dict], path: Path) -> None:
    columns = [c for c in metrics.RECORD_COLUMNS
               if any(c in r for r in records)]
    extras = sorted({k for r in records for k in r}
                    - set(columns) - {"config"})
    header = columns + extras + ["config"]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for r in records:
            row = [r.get(c, "") for c in columns + extras]
            row.append(json.dumps(r.get("config", {})))
            writer.writerow(row)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedbench", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, durations=True):
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--out", help="JSONL record file (default: config output)")
        if durations:
            p.add_argument("--durations", choices=["simulated", "measured"],
                           help="override the durations mode")

    p_run = sub.add_parser("run", help="run one experiment")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_base = sub.add_parser("baselines", help="local-only and centralized baselines")
    common(p_base)
    p_base.set_defaults(func=cmd_baselines)

    p_sweep = sub.add_parser("sweep", help="run the config's sweep grid (resumable)")
    common(p_sweep)
    p_sweep.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                         help="parallel worker processes")
    p_sweep.set_defaults(func=cmd_sweep)

    p_attack = sub.add_parser("attack", help="run a gradient-inversion campaign")
    common(p_attack, durations=False)
    p_attack.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p_attack.add_argument("--dump-images", action="store_true",
                          help="write truth/recon PGM pairs per cell")
    p_attack.add_argument("--dump-dir", help="directory for image dumps")
    p_attack.set_defaults(func=cmd_attack)

    p_report = sub.add_parser("report", help="render records as CSV + summary")
    p_report.add_argument("--records", required=True, help="JSONL record file")
    p_report.add_argument("--csv", help="CSV output path")
    p_report.add_argument("--delta", type=float, default=0.01,
                          help="accuracy-loss threshold for the summary")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FedBenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
