"""Topology configuration, read from a TOML file.

Schema (every key optional unless marked)::

    seed = 7                        # drives every random choice of a run
    broker = "inprocess"            # or "tcp://HOST:PORT" (port 0 picks one)
    fog_count = 1
    cadence = 5                     # seconds between tuples of one vehicle
    package_period = 300            # edge package and fog window length
    retention = 86400               # seconds an uploaded table is kept
    slack = 120                     # tolerance around the trip window
    dedup_horizon = 2               # windows covered by the fog dedup index
    min_tuples_per_trip = 1

    [paths]                         # relative to the config file
    feed = "feed.csv"               # required
    schedule = "schedule.json"      # required
    out_dir = "out"
    quarantine = "out/quarantine"

    [[edges]]                       # at least one
    edge_id = "edge-1"
    package_period_seconds = 300    # defaults to package_period
    source = "part-1.csv"           # own feed; otherwise a share of paths.feed

    [corruption]                    # optional, applied to the feed before replay
    duplicate_rate = 0.01           # any CorruptionPlan field except rng_seed

Environment variables ``FOGSTREAM_FEED``, ``FOGSTREAM_SCHEDULE``,
``FOGSTREAM_OUT_DIR`` and ``FOGSTREAM_QUARANTINE_DIR`` override the paths.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from fogstream.broker.tcp import parse_address
from fogstream.edge import EdgeConfig
from fogstream.feedgen import CorruptionPlan, InvalidPlan

PathLike = Union[str, os.PathLike]

INPROCESS = "inprocess"
ENV_PATHS = {
    "feed": "FOGSTREAM_FEED",
    "schedule": "FOGSTREAM_SCHEDULE",
    "out_dir": "FOGSTREAM_OUT_DIR",
    "quarantine": "FOGSTREAM_QUARANTINE_DIR",
}
_TOP_KEYS = {
    "seed", "broker", "fog_count", "cadence", "package_period", "retention", "slack",
    "dedup_horizon", "min_tuples_per_trip", "paths", "edges", "corruption",
}
_POSITIVE_INTS = ("fog_count", "cadence", "package_period", "dedup_horizon", "min_tuples_per_trip")


class ConfigError(ValueError):
    """Carries every problem found, not just the first."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


def load_toml_text(text: str) -> dict:
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"not valid TOML: {exc}"]) from exc


@dataclass(frozen=True)
class Paths:
    feed: Path
    schedule: Path
    out_dir: Path
    quarantine: Path


@dataclass(frozen=True)
class TopologyConfig:
    edges: tuple[EdgeConfig, ...]
    paths: Paths
    fog_count: int = 1
    broker: str = INPROCESS
    cadence: int = 5
    package_period: int = 300
    retention: int = 86400
    slack: int = 120
    dedup_horizon: int = 2
    min_tuples_per_trip: int = 1
    seed: int = 0
    corruption: Optional[Mapping[str, Any]] = None

    @property
    def tcp_address(self) -> Optional[tuple[str, int]]:
        return None if self.broker == INPROCESS else parse_address(self.broker)

    @property
    def fog_ids(self) -> tuple[str, ...]:
        return tuple(f"fog-{i + 1}" for i in range(self.fog_count))

    def fog_of(self, edge_index: int) -> str:
        return self.fog_ids[edge_index % self.fog_count]

    def corruption_plan(self) -> Optional[CorruptionPlan]:
        if self.corruption is None:
            return None
        plan = CorruptionPlan.from_dict({**self.corruption, "rng_seed": self.seed})
        return replace(plan, slack_seconds=self.slack) if "slack_seconds" not in self.corruption else plan

    def with_seed(self, seed: int) -> "TopologyConfig":
        return replace(self, seed=seed)

    def with_out_dir(self, out_dir: PathLike) -> "TopologyConfig":
        out = Path(out_dir)
        return replace(self, paths=replace(self.paths, out_dir=out, quarantine=out / "quarantine"))


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def parse_config(obj: Mapping[str, Any], base: Path = Path("."), env: Optional[Mapping[str, str]] = None) -> TopologyConfig:
    """Validate a decoded config table; raises ConfigError listing all problems."""
    env = os.environ if env is None else env
    errors: list[str] = []
    for k in sorted(set(obj) - _TOP_KEYS):
        errors.append(f"unknown key {k!r}")

    scalars: dict[str, Any] = {}
    defaults = {f: TopologyConfig.__dataclass_fields__[f].default for f in _POSITIVE_INTS + ("retention", "slack", "seed")}
    for name, default in defaults.items():
        v = obj.get(name, default)
        if not _is_int(v):
            errors.append(f"{name} must be an integer, got {v!r}")
        elif name in _POSITIVE_INTS + ("retention",) and v <= 0:
            errors.append(f"{name} must be positive, got {v}")
        elif name == "slack" and v < 0:
            errors.append(f"slack must be non-negative, got {v}")
        elif name == "seed" and not 0 <= v < 2**64:
            errors.append("seed must be an unsigned 64-bit integer")
        scalars[name] = v

    broker = obj.get("broker", INPROCESS)
    if not isinstance(broker, str):
        errors.append("broker must be a string")
    elif broker != INPROCESS:
        try:
            parse_address(broker)
        except ValueError as exc:
            errors.append(f"broker: {exc}")

    raw_paths = obj.get("paths", {})
    if not isinstance(raw_paths, Mapping):
        errors.append("paths must be a table")
        raw_paths = {}
    for k in sorted(set(raw_paths) - set(ENV_PATHS)):
        errors.append(f"unknown key paths.{k}")
    resolved: dict[str, Optional[Path]] = {}
    for k, var in ENV_PATHS.items():
        v = env.get(var) or raw_paths.get(k)
        if v is not None and not isinstance(v, str):
            errors.append(f"paths.{k} must be a string")
            v = None
        resolved[k] = None if v is None else (base / v)
    for k in ("feed", "schedule"):
        if resolved[k] is None:
            errors.append(f"paths.{k} is required")
    out_dir = resolved["out_dir"] or base / "out"
    quarantine = resolved["quarantine"] or out_dir / "quarantine"

    raw_edges = obj.get("edges", [])
    edges: list[EdgeConfig] = []
    if not isinstance(raw_edges, list) or not raw_edges:
        errors.append("at least one [[edges]] entry is required")
        raw_edges = []
    seen: set[str] = set()
    period = scalars["package_period"]
    for i, e in enumerate(raw_edges):
        if not isinstance(e, Mapping):
            errors.append(f"edges[{i}] must be a table")
            continue
        for k in sorted(set(e) - {"edge_id", "package_period_seconds", "source"}):
            errors.append(f"unknown key edges[{i}].{k}")
        source = e.get("source")
        if source is not None and not isinstance(source, str):
            errors.append(f"edges[{i}].source must be a string")
            source = None
        cfg = EdgeConfig(
            str(e.get("edge_id", "")),
            e.get("package_period_seconds", period),
            None if source is None else str(base / source),
            broker if broker != INPROCESS else None,
        )
        try:
            cfg.validate()
        except ValueError as exc:
            errors.append(f"edges[{i}]: {exc}")
            continue
        if cfg.edge_id in seen:
            errors.append(f"edges[{i}]: duplicate edge_id {cfg.edge_id!r}")
        seen.add(cfg.edge_id)
        edges.append(cfg)

    if _is_int(scalars["fog_count"]) and edges and scalars["fog_count"] > len(edges):
        errors.append(f"fog_count {scalars['fog_count']} exceeds the {len(edges)} configured edges")

    corruption = obj.get("corruption")
    if corruption is not None:
        if not isinstance(corruption, Mapping):
            errors.append("corruption must be a table")
        elif "rng_seed" in corruption:
            errors.append("corruption.rng_seed is not allowed; the top-level seed is used")
        else:
            try:
                CorruptionPlan.from_dict({**corruption, "rng_seed": 0})
            except (InvalidPlan, TypeError) as exc:
                errors.append(f"corruption: {exc}")

    if errors:
        raise ConfigError(errors)
    assert resolved["feed"] is not None and resolved["schedule"] is not None
    return TopologyConfig(
        edges=tuple(edges),
        paths=Paths(resolved["feed"], resolved["schedule"], out_dir, quarantine),
        broker=broker,
        corruption=None if corruption is None else dict(corruption),
        **scalars,
    )


def load_config(path: PathLike, env: Optional[Mapping[str, str]] = None) -> TopologyConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read {p}: {exc.strerror}"]) from exc
    return parse_config(load_toml_text(text), p.parent, env)
