"""Command-line entry point: ``python -m drbuf <command>``.

Exit codes: 0 success, 1 a worker failed, 2 bad usage or config,
3 the run finished but some invariant counter is nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path
from typing import Sequence

from drbuf import bench
from drbuf.core import ConfigError, Mode, RunConfig, read_config_file, read_roster, write_config_file, write_roster
from drbuf.metrics import export, log_from_dict, log_to_dict, read_breakdown_csv, window_means
from drbuf.scenario import DatasetError, make_schedule, read_dataset, synth_dataset, write_dataset
from drbuf.trainer import run_scenario

EXIT_OK, EXIT_WORKER, EXIT_USAGE, EXIT_INVARIANT = 0, 1, 2, 3

log = logging.getLogger("drbuf")


class UsageError(Exception):
    pass


# -- config plumbing ------------------------------------------------------------


def add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value config file; flags override it")
    g = p.add_argument_group("config keys (same names as in the config file)")
    defaults = RunConfig().to_mapping()
    for name in RunConfig.field_names():
        flag = "--" + name.replace("_", "-")
        extra = ["--workers"] if name == "n_workers" else []
        g.add_argument(flag, *extra, dest=f"cfg_{name}", metavar="V", default=None,
                       help=f"(default: {defaults[name] or 'empty'})")


def resolve_config(args) -> RunConfig:
    values = read_config_file(args.config) if args.config else {}
    for name in RunConfig.field_names():
        v = getattr(args, f"cfg_{name}")
        if v is not None:
            values[name] = v
    cfg = RunConfig.from_mapping(values)
    cfg.validate()
    return cfg


def load_dataset(cfg: RunConfig):
    if cfg.dataset_path:
        ds = read_dataset(cfg.dataset_path)
        if ds.n_classes != cfg.n_classes:
            raise ConfigError(f"dataset has {ds.n_classes} classes, config says {cfg.n_classes}")
        return ds
    return synth_dataset(cfg.n_classes, cfg.samples_per_class, cfg.feature_dim, cfg.separation, cfg.rng_seed)


def schedule_for(cfg: RunConfig):
    return make_schedule(cfg.n_classes, cfg.n_tasks, cfg.rng_seed, cfg.epochs_per_task, cfg.allow_uneven_tasks)


# -- commands -------------------------------------------------------------------


def cmd_gen_dataset(args) -> int:
    cfg = resolve_config(args)
    ds = synth_dataset(cfg.n_classes, cfg.samples_per_class, cfg.feature_dim, cfg.separation, cfg.rng_seed)
    write_dataset(args.out, ds)
    print(f"wrote {len(ds)} samples ({cfg.n_classes} classes, dim {cfg.feature_dim}) to {args.out}")
    return EXIT_OK


def run_worker(cfg: RunConfig, rank: int) -> dict:
    result = run_scenario(cfg, schedule_for(cfg), load_dataset(cfg), rank=rank)
    return log_to_dict(result.log)


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    results = Path(args.results)
    if args.roster_file:
        cfg.roster = read_roster(args.roster_file)
    if args.spawn_local:
        return launch_local(cfg, results, args.timeout)
    if args.rank is None:
        if cfg.n_workers != 1:
            raise UsageError(f"{cfg.n_workers} workers need --spawn-local or --rank")
        args.rank = 0
    if not 0 <= args.rank < cfg.n_workers:
        raise UsageError(f"rank {args.rank} outside [0, {cfg.n_workers})")
    if cfg.n_workers > 1 and len(cfg.roster) != cfg.n_workers:
        raise UsageError(f"roster has {len(cfg.roster)} entries for {cfg.n_workers} workers")
    data = run_worker(cfg, args.rank)
    if cfg.n_workers > 1:
        out = results / "workers" / f"rank{args.rank}.json"
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(data))
        return EXIT_OK
    mlog = log_from_dict(data)
    export(mlog, results)
    print((results / "summary.txt").read_text().split("--- counters")[0], end="")
    return EXIT_OK if mlog.invariant_violations == 0 else EXIT_INVARIANT


def launch_local(cfg: RunConfig, results: Path, timeout: float) -> int:
    """Spawn one process per worker on free localhost ports and merge their logs."""
    n = cfg.n_workers
    cfg.roster = bench.free_ports(n)
    launch = results / "workers"
    launch.mkdir(parents=True, exist_ok=True)
    for old in launch.glob("rank*.json"):
        old.unlink()
    cfg_path = launch / "run.cfg"
    write_config_file(cfg, cfg_path)
    write_roster(cfg.roster, launch / "roster.txt")
    env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1", MKL_NUM_THREADS="1")
    src = str(Path(__file__).resolve().parents[1])
    env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
    procs = []
    for rank in range(n):
        logf = open(launch / f"rank{rank}.log", "w")
        cmd = [sys.executable, "-m", "drbuf", "run", "--config", str(cfg_path),
               "--rank", str(rank), "--results", str(results)]
        procs.append((subprocess.Popen(cmd, stdout=logf, stderr=subprocess.STDOUT, env=env), logf))

    deadline = time.monotonic() + timeout
    failed = []
    try:
        while any(p.poll() is None for p, _ in procs):
            if any(p.poll() not in (None, 0) for p, _ in procs):
                time.sleep(2.0)  # let peers notice and exit on their own first
                break
            if time.monotonic() > deadline:
                log.error("workers still running after %.0f s", timeout)
                break
            time.sleep(0.05)
    finally:
        for rank, (p, logf) in enumerate(procs):
            if p.poll() is None:
                p.kill()
                p.wait()
            logf.close()
            if p.returncode != 0:
                failed.append(rank)
    if failed:
        for rank in failed:
            tail = (launch / f"rank{rank}.log").read_text().splitlines()[-15:]
            print(f"worker {rank} failed (exit {procs[rank][0].returncode}):", file=sys.stderr)
            print("\n".join("  " + t for t in tail), file=sys.stderr)
        return EXIT_WORKER

    logs = [log_from_dict(json.loads((launch / f"rank{r}.json").read_text())) for r in range(n)]
    merged = merge_logs(logs)
    export(merged, results)
    print((results / "summary.txt").read_text().split("--- counters")[0], end="")
    return EXIT_OK if merged.invariant_violations == 0 else EXIT_INVARIANT


def merge_logs(logs):
    """Rank 0's accuracy, everyone's breakdown rows, and summed counters."""
    head = logs[0]
    counters: dict = {}
    for lg in logs:
        for k, v in lg.counters.items():
            counters[k] = counters.get(k, 0) + v
    finals = {lg.totals.get("final_digest") for lg in logs}
    diverged = int(len(finals) != 1)
    if any(lg.replica_digests for lg in logs):
        per_iter = list(zip(*(lg.replica_digests for lg in logs)))
        diverged += sum(len(set(d)) != 1 for d in per_iter)
        diverged += int(len({len(lg.replica_digests) for lg in logs}) != 1)
    counters["replica_divergence"] = diverged
    head.counters = counters
    head.breakdown = [r for lg in logs for r in lg.breakdown]
    head.totals = dict(head.totals, max_train_time=max(lg.totals["train_time"] for lg in logs))
    return head


def cmd_bias_test(args) -> int:
    res = bench.bias_test(args.workers, args.fill, args.draws, args.rep_count, args.n_classes,
                          args.rng_seed, args.fetch_check)
    text = res.format()
    if args.results:
        out = Path(args.results)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bias_report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK if res.fetch_mismatches == res.consolidation_violations == res.duplicate_plans == 0 \
        else EXIT_INVARIANT


def cmd_overlap_bench(args) -> int:
    rep = bench.overlap_bench(args.train_cost_ms, args.iters, args.workers, args.batch_size,
                              args.rep_count, args.candidate_count, stub=args.stub, seed=args.rng_seed)
    text = rep.format()
    if args.results:
        out = Path(args.results)
        out.mkdir(parents=True, exist_ok=True)
        (out / "overlap_report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_breakdown(args) -> int:
    path = Path(args.results) / "breakdown.csv"
    records = read_breakdown_csv(path)
    if not records:
        raise UsageError(f"{path} has no rows")
    if args.worker is not None:
        records = [r for r in records if r.worker == args.worker]
    rows = window_means(records, args.window)
    cols = ("load", "train", "populate_buffer", "augment_batch", "wait")
    print("first_iteration  n  " + "  ".join(f"{c}_ms" for c in cols))
    for row in rows:
        print(f"{row['first_iteration']:>15} {row['n']:>2}  "
              + "  ".join(f"{row[c] * 1e3:.3f}" for c in cols))
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drbuf", description="Distributed rehearsal buffer experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-dataset", help="write a synthetic Gaussian-blob dataset file")
    p.add_argument("--out", required=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("run", help="train through a class-incremental scenario")
    add_config_flags(p)
    launch = p.add_mutually_exclusive_group()
    launch.add_argument("--spawn-local", action="store_true", help="fork one process per worker")
    launch.add_argument("--rank", type=int, help="join an existing roster as this worker")
    p.add_argument("--roster-file", help="roster file with 'id host:port' lines")
    p.add_argument("--results", default="results", help="results directory")
    p.add_argument("--timeout", type=float, default=3600.0, help="launcher deadline in seconds")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bias-test", help="chi-square test of global sampling uniformity")
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--fill", type=int, default=40, help="samples inserted per worker before freezing")
    p.add_argument("--draws", type=int, default=100_000)
    p.add_argument("--rep-count", type=int, default=7)
    p.add_argument("--n-classes", type=int, default=10)
    p.add_argument("--rng-seed", type=int, default=0)
    p.add_argument("--fetch-check", type=int, default=500, help="plans also fetched over the wire")
    p.add_argument("--results", help="directory for bias_report.txt")
    p.set_defaults(func=cmd_bias_test)

    p = sub.add_parser("overlap-bench", help="measure update() wait against a fixed-cost training stub")
    p.add_argument("--train-cost-ms", type=float, required=True)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--batch-size", type=int, default=56)
    p.add_argument("--rep-count", type=int, default=7)
    p.add_argument("--candidate-count", type=int, default=14)
    p.add_argument("--stub", choices=("spin", "sleep"), default="spin")
    p.add_argument("--rng-seed", type=int, default=0)
    p.add_argument("--results", help="directory for overlap_report.txt")
    p.set_defaults(func=cmd_overlap_bench)

    p = sub.add_parser("breakdown", help="windowed means of breakdown.csv")
    p.add_argument("--results", default="results")
    p.add_argument("--window", type=int, default=35)
    p.add_argument("--worker", type=int)
    p.set_defaults(func=cmd_breakdown)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, DatasetError, FileNotFoundError) as exc:
        print(f"drbuf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"drbuf: error: {exc}", file=sys.stderr)
        return EXIT_WORKER


if __name__ == "__main__":
    sys.exit(main())
