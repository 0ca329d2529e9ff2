"""Builders shared by the test modules."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Optional

from fogstream.config import parse_config
from fogstream.feedgen import Schedule, build_schedule, write_csv


def small_schedule(counts: Optional[dict] = None, *, hours: float = 1.0, trip_seconds: int = 600) -> Schedule:
    return build_schedule(counts or {"10": 2, "20": 1}, service_hours=hours, trip_seconds=trip_seconds)


def _toml(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    return json.dumps(str(v))


def write_topology(tmp_path: Path, schedule: Schedule, feed, *, edges: int = 1, **settings) -> Path:
    """Write schedule, feed and a TOML topology config; returns the config path.

    Keyword settings become top-level keys; dict values become tables.
    """
    schedule.dump(tmp_path / "schedule.json")
    write_csv(feed, tmp_path / "feed.csv")
    lines = [f"{k} = {_toml(v)}" for k, v in settings.items() if not isinstance(v, dict)]
    lines += ["[paths]", 'feed = "feed.csv"', 'schedule = "schedule.json"', 'out_dir = "out"']
    for k, v in settings.items():
        if isinstance(v, dict):
            lines.append(f"[{k}]")
            lines += [f"{kk} = {_toml(vv)}" for kk, vv in v.items()]
    for i in range(edges):
        lines += ["[[edges]]", f'edge_id = "edge-{i + 1}"']
    cfg = tmp_path / "topology.toml"
    cfg.write_text("\n".join(lines) + "\n")
    return cfg


def topology(base: Path, *, edges: int = 1, **settings):
    obj = {
        "paths": {"feed": "feed.csv", "schedule": "schedule.json", "out_dir": "out"},
        "edges": [{"edge_id": f"edge-{i + 1}"} for i in range(edges)],
        **settings,
    }
    return parse_config(obj, base, env={})
