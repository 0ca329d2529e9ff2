"""Command line entry point.

Exit codes:
    0  success
    2  invalid configuration or input (bad config, schedule, plan or feed file)
    3  pipeline invariant violated (conservation identity or end-of-stream)
    4  artifacts needed by ``report`` are missing
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from fogstream import __version__
from fogstream.broker import Broker
from fogstream.broker.tcp import BrokerServer, parse_address
from fogstream.cloud import (
    CloudStore,
    DecodeError,
    InconsistentSnapshots,
    map_reduce_trips,
    render_trips_table,
    totals,
    write_reports,
)
from fogstream.config import ENV_PATHS, ConfigError, load_config, load_toml_text
from fogstream.feedgen import (
    CorruptionPlan,
    InvalidPlan,
    InvalidSchedule,
    Schedule,
    corrupt_feed,
    generate_clean_feed,
    ledger_to_jsonl,
    read_csv,
    reference_day_schedule,
    write_csv,
)
from fogstream.fog import PipelineInvariantError, TaskStatus
from fogstream.model import MalformedRecord
from fogstream.pipeline import RunResult, run

log = logging.getLogger("fogstream")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3
EXIT_MISSING = 4

STORE_BATCHES = "batches.jsonl"
STORE_SNAPSHOTS = "fog_snapshots.json"
STORE_SCHEDULE = "schedule.json"
STORE_RUN = "run.json"


class MissingArtifacts(FileNotFoundError):
    pass


class UsageError(ValueError):
    pass


# --- helpers --------------------------------------------------------------------------


def _out_dir(args: argparse.Namespace, default: str = "out") -> Path:
    return Path(args.out_dir or os.environ.get(ENV_PATHS["out_dir"]) or default)


def _load_plan(args: argparse.Namespace) -> CorruptionPlan:
    fields: dict = {}
    if args.plan:
        text = Path(args.plan).read_text()
        fields = load_toml_text(text) if args.plan.endswith(".toml") else json.loads(text)
        if not isinstance(fields, dict):
            raise InvalidPlan("plan file must hold a table of CorruptionPlan fields")
    for name in ("duplicate_rate", "drop_rate", "blank_field_rate", "wrong_value_rate", "shuffle_window"):
        v = getattr(args, name)
        if v is not None:
            fields[name] = v
    fields["rng_seed"] = args.seed if args.seed is not None else fields.get("rng_seed", 0)
    return CorruptionPlan.from_dict(fields)


def _write_corruption(feed, plan: CorruptionPlan, out: Path) -> tuple[int, int]:
    corrupted, ledger = corrupt_feed(feed, plan)
    write_csv(corrupted, out / "feed.csv")
    (out / "ledger.jsonl").write_text(ledger_to_jsonl(ledger))
    return len(corrupted), len(ledger)


def _write_lines(path: Path, lines: Sequence[bytes]) -> None:
    with open(path, "wb") as fh:
        for line in lines:
            fh.write(line.rstrip(b"\n") + b"\n")


# --- subcommands ----------------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    if args.reference_day:
        schedule = reference_day_schedule()
    elif args.schedule:
        schedule = Schedule.load(args.schedule)
    else:
        raise UsageError("generate needs --schedule FILE or --reference-day")
    plan = _load_plan(args)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    feed, manifest = generate_clean_feed(schedule)
    schedule.dump(out / "schedule.json")
    (out / "manifest.jsonl").write_text(manifest.to_jsonl())
    n, defects = _write_corruption(feed, plan, out)
    print(f"generated {len(feed)} clean tuples for {len(schedule.routes)} routes; wrote {n} records and {defects} defects to {out}")
    return EXIT_OK


def cmd_corrupt(args: argparse.Namespace) -> int:
    feed = read_csv(args.feed)
    plan = _load_plan(args)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    n, defects = _write_corruption(feed, plan, out)
    print(f"wrote {n} records and {defects} defects to {out}")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    topo = load_config(args.config)
    if args.seed is not None:
        topo = topo.with_seed(args.seed)
    if args.out_dir:
        q = topo.paths.quarantine if os.environ.get(ENV_PATHS["quarantine"]) else Path(args.out_dir) / "quarantine"
        topo = replace(topo, paths=replace(topo.paths, out_dir=Path(args.out_dir), quarantine=q))
    try:
        schedule = Schedule.load(topo.paths.schedule)
    except OSError as exc:
        raise ConfigError([f"cannot read schedule {topo.paths.schedule}: {exc.strerror}"]) from exc
    if not topo.paths.feed.exists() and any(e.source is None for e in topo.edges):
        raise ConfigError([f"feed {topo.paths.feed} does not exist"])

    out = topo.paths.out_dir
    out.mkdir(parents=True, exist_ok=True)
    if topo.paths.quarantine.is_dir():
        for old in topo.paths.quarantine.glob("*.csv"):
            old.unlink()

    started = time.perf_counter()
    kwargs = {}
    if args.disconnect_after_windows is not None:
        if topo.tcp_address is None:
            raise ConfigError(["--disconnect-after-windows needs a tcp broker"])
        kwargs["disconnect_after_windows"] = args.disconnect_after_windows
    result = run(topo, schedule, **kwargs)
    elapsed = time.perf_counter() - started

    _save_run(out, topo.min_tuples_per_trip, schedule, result)
    print(render_trips_table(result.rows), end="")
    print()
    print(result.totals.render(), end="")
    print(f"\n{result.totals.received} tuples in {elapsed:.2f}s; artifacts in {out}")
    return EXIT_OK


def _save_run(out: Path, min_tuples: int, schedule: Schedule, result: RunResult) -> None:
    write_reports(out, result.rows, result.totals)
    _write_lines(out / "alarms.jsonl", result.alarms)
    _write_lines(out / "metrics.jsonl", [json.dumps(m, sort_keys=True).encode() for m in result.metrics])
    if result.ledger:
        (out / "ledger.jsonl").write_text(ledger_to_jsonl(result.ledger))
    store = out / "store"
    store.mkdir(exist_ok=True)
    result.store.dump(store / STORE_BATCHES)
    snaps = {fog: [s.to_dict() for s in snap] for fog, snap in sorted(result.snapshots.items())}
    (store / STORE_SNAPSHOTS).write_text(json.dumps(snaps, indent=1, sort_keys=True) + "\n")
    schedule.dump(store / STORE_SCHEDULE)
    (store / STORE_RUN).write_text(json.dumps({"min_tuples_per_trip": min_tuples}) + "\n")


def cmd_report(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    store_dir = Path(args.store) if args.store else out / "store"
    needed = [store_dir / n for n in (STORE_BATCHES, STORE_SNAPSHOTS, STORE_SCHEDULE)]
    missing = [str(p) for p in needed if not p.exists()]
    if missing:
        raise MissingArtifacts(f"missing run artifacts: {', '.join(missing)}")
    store = CloudStore.load(store_dir / STORE_BATCHES)
    schedule = Schedule.load(store_dir / STORE_SCHEDULE)
    raw_snaps = json.loads((store_dir / STORE_SNAPSHOTS).read_text())
    snaps = [tuple(TaskStatus.from_dict(s) for s in snap) for snap in raw_snaps.values()]
    threshold = args.min_tuples_per_trip
    if threshold is None:
        run_meta = store_dir / STORE_RUN
        threshold = json.loads(run_meta.read_text())["min_tuples_per_trip"] if run_meta.exists() else 1
    rows = map_reduce_trips(store, schedule, threshold)
    try:
        tot = totals(store, snaps)
    except InconsistentSnapshots as exc:
        raise PipelineInvariantError(str(exc)) from exc
    write_reports(out, rows, tot)
    print(render_trips_table(rows), end="")
    print()
    print(tot.render(), end="")
    return EXIT_OK


def cmd_broker(args: argparse.Namespace) -> int:
    address = parse_address(args.address)
    server = BrokerServer(Broker(), address).start()
    host, port = server.address
    print(f"broker listening on {host}:{port}", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


# --- parser -----------------------------------------------------------------------------


def _plan_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--plan", help="corruption plan file (TOML or JSON)")
    p.add_argument("--duplicate-rate", type=float)
    p.add_argument("--drop-rate", type=float)
    p.add_argument("--blank-field-rate", type=float)
    p.add_argument("--wrong-value-rate", type=float)
    p.add_argument("--shuffle-window", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fogstream", description="Edge/fog/cloud stream pipeline emulator.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize a feed, its manifest and its defect ledger")
    g.add_argument("--schedule", help="schedule file (JSON or TOML)")
    g.add_argument("--reference-day", action="store_true", help="use the built-in 16-route schedule")
    g.add_argument("--seed", type=int)
    g.add_argument("--out-dir")
    _plan_flags(g)
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("corrupt", help="inject defects into an existing clean feed")
    c.add_argument("--feed", required=True)
    c.add_argument("--seed", type=int)
    c.add_argument("--out-dir")
    _plan_flags(c)
    c.set_defaults(func=cmd_corrupt)

    r = sub.add_parser("run", help="run the pipeline end to end from a topology config")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out-dir")
    r.add_argument(
        "--disconnect-after-windows",
        type=int,
        help="tcp mode only: cut the first fog's and the cloud's connections after this many windows",
    )
    r.set_defaults(func=cmd_run)

    rp = sub.add_parser("report", help="re-render reports from a previous run's store")
    rp.add_argument("--out-dir")
    rp.add_argument("--store", help="store directory (default OUT_DIR/store)")
    rp.add_argument("--min-tuples-per-trip", type=int)
    rp.set_defaults(func=cmd_report)

    b = sub.add_parser("broker", help="run a standalone TCP broker")
    b.add_argument("--address", default="127.0.0.1:7878")
    b.set_defaults(func=cmd_broker)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (UsageError, InvalidPlan, InvalidSchedule, MalformedRecord, DecodeError, ValueError, OSError) as exc:
        if isinstance(exc, MissingArtifacts):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_MISSING
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PipelineInvariantError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
