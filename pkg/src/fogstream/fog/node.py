"""The fog node life cycle.

Each package is acquired (parsed, malformed records quarantined) and tagged
with node-unique IDs as it arrives.  When a package for a later window shows
up, the open window is closed: cleaned, sorted, stored as a table, leveraged,
uploaded to ``cloud/upload`` and marked uploaded.  Alarms go to ``alarms``.
"""

from __future__ import annotations

import enum
import json
import logging
import threading
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Protocol, Sequence, Union

from fogstream.broker import (
    ALARMS,
    CLOUD_UPLOAD,
    Envelope,
    SeqDeduper,
    aggregate,
    control_topic,
    packages_topic,
)
from fogstream.broker.core import Ack, Delivery
from fogstream.edge import END_OF_STREAM
from fogstream.fog.database import DEFAULT_RETENTION, StreamDatabase, handle_late
from fogstream.fog.rules import (
    DEFAULT_CADENCE,
    DEFAULT_SLACK,
    CleanResult,
    DedupIndex,
    IdCounter,
    TripIndex,
    assign_ids,
    clean,
)
from fogstream.model import (
    AlarmEvent,
    DropCode,
    MalformedRecord,
    RawTuple,
    StreamPackage,
    parse_raw_record,
)

log = logging.getLogger(__name__)

UPLOAD_TABLE = "table"


class Client(Protocol):
    def publish(self, topic: str, payload: bytes) -> Ack: ...
    def subscribe(self, patterns) -> None: ...
    def poll(self) -> Optional[Delivery]: ...
    def get(self, timeout: Optional[float] = None) -> Optional[Delivery]: ...
    def ack(self, delivery: Delivery) -> None: ...


class PipelineInvariantError(RuntimeError):
    pass


class UnknownCommand(ValueError):
    pass


class Task(str, enum.Enum):
    TRANSPORTATION = "Transportation"
    PROCESSING = "Processing"
    ACQUISITION = "Acquisition"
    STORAGE = "Storage"
    LEVERAGE = "Leverage"
    CONTROL = "Control"


@dataclass(frozen=True)
class TaskStatus:
    task: Task
    tuples_in: int = 0
    tuples_out: int = 0
    tuples_dropped: dict[str, int] = field(default_factory=dict)
    alarms_emitted: int = 0
    last_completed_window: Optional[int] = None

    @property
    def dropped_total(self) -> int:
        return sum(self.tuples_dropped.values())

    @property
    def conserved(self) -> bool:
        return self.tuples_in == self.tuples_out + self.dropped_total

    def to_dict(self) -> dict:
        return {
            "task": self.task.value,
            "tuples_in": self.tuples_in,
            "tuples_out": self.tuples_out,
            "tuples_dropped": dict(sorted(self.tuples_dropped.items())),
            "alarms_emitted": self.alarms_emitted,
            "last_completed_window": self.last_completed_window,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TaskStatus":
        return cls(
            Task(obj["task"]),
            obj["tuples_in"],
            obj["tuples_out"],
            dict(obj["tuples_dropped"]),
            obj["alarms_emitted"],
            obj["last_completed_window"],
        )


class AdminCommand(str, enum.Enum):
    PAUSE = "Pause"
    RESUME = "Resume"
    FLUSH = "Flush"
    SET_RETENTION = "SetRetention"


@dataclass(frozen=True)
class AdminAck:
    command: AdminCommand
    detail: str = ""


@dataclass(frozen=True)
class FogConfig:
    fog_id: str = "fog-1"
    edges: tuple[str, ...] = ()
    cadence: int = DEFAULT_CADENCE
    slack: int = DEFAULT_SLACK
    period: int = 300
    retention_ttl: float = DEFAULT_RETENTION
    upload_max_bytes: int = 1 << 20
    chunk_tuples: int = 512
    dedup_horizon: int = 2
    quarantine_dir: Optional[Union[str, Path]] = None

    def validate(self) -> None:
        if not self.fog_id or "/" in self.fog_id:
            raise ValueError(f"invalid fog_id {self.fog_id!r}")
        for name in ("cadence", "period", "chunk_tuples", "upload_max_bytes", "dedup_horizon"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.slack < 0 or self.retention_ttl < 0:
            raise ValueError("slack and retention_ttl must be non-negative")


class _Counters:
    def __init__(self) -> None:
        self.tin: dict[Task, int] = defaultdict(int)
        self.tout: dict[Task, int] = defaultdict(int)
        self.dropped: dict[Task, dict[str, int]] = defaultdict(lambda: defaultdict(int))
        self.alarms = 0
        self.last_window: Optional[int] = None

    def snapshot(self) -> tuple[TaskStatus, ...]:
        return tuple(
            TaskStatus(
                task,
                self.tin[task],
                self.tout[task],
                dict(self.dropped[task]),
                self.alarms if task is Task.PROCESSING else 0,
                self.last_window,
            )
            for task in Task
        )


def acquire(pkg: StreamPackage) -> tuple[list[RawTuple], list[MalformedRecord]]:
    """Parse a package's records; malformed ones are returned, not raised."""
    good: list[RawTuple] = []
    bad: list[MalformedRecord] = []
    for i, rec in enumerate(pkg.records):
        try:
            good.append(parse_raw_record(rec))
        except MalformedRecord as exc:
            bad.append(MalformedRecord(exc.reason, i + 1, rec))
    return good, bad


def upload_payloads(fog_id: str, window_id: int, rows: Sequence[list], chunk: int) -> list[bytes]:
    parts = [rows[i : i + chunk] for i in range(0, len(rows), chunk)] or [[]]
    return [
        json.dumps(
            {
                "type": UPLOAD_TABLE,
                "fog": fog_id,
                "window_id": window_id,
                "part": n,
                "parts": len(parts),
                "tuples": part,
            },
            separators=(",", ":"),
        ).encode()
        for n, part in enumerate(parts)
    ]


def eos_upload_payload(fog_id: str, snapshot: Sequence[TaskStatus], windows: int) -> bytes:
    return json.dumps(
        {
            "type": END_OF_STREAM,
            "fog": fog_id,
            "windows": windows,
            "snapshot": [s.to_dict() for s in snapshot],
        },
        separators=(",", ":"),
    ).encode()


class FogNode:
    """One fog node's life-cycle loop.  Not thread-safe: drive it from one thread."""

    def __init__(
        self,
        cfg: FogConfig,
        client: Client,
        *,
        on_window: Optional[Callable[[dict], None]] = None,
    ):
        cfg.validate()
        self.cfg = cfg
        self.client = client
        self.on_window = on_window
        self.db = StreamDatabase(cfg.retention_ttl, cfg.period)
        self.ids = IdCounter()
        self.dedup = DedupIndex(cfg.dedup_horizon)
        self.trips = TripIndex()
        self.seen = SeqDeduper()
        self._c = _Counters()
        self._pending: list[tuple[int, RawTuple]] = []
        self._open: Optional[int] = None
        self._last_closed: Optional[int] = None
        self._eos: dict[str, int] = {}
        self._pkg_high: dict[str, int] = {}
        self._edge_end: dict[str, int] = {}
        self.now = 0
        self.paused = False
        self.finished = False
        self.windows_closed = 0
        self.alarms: list[AlarmEvent] = []
        # Drops keyed by str(DropReason), e.g. "WrongAttributeValue(lat)".
        self.drop_reasons: Counter[str] = Counter()
        self.quarantined: list[tuple[int, MalformedRecord]] = []
        self._snapshot_lock = threading.Lock()
        self._snapshot: tuple[TaskStatus, ...] = self._c.snapshot()
        if cfg.edges:
            patterns = [p for e in cfg.edges for p in (packages_topic(e), control_topic(e))]
        else:
            patterns = ["packages/*", "control/*"]
        client.subscribe(patterns)

    # -- intake ----------------------------------------------------------------

    def step(self, limit: Optional[int] = None) -> int:
        """Handle queued deliveries without blocking; returns how many."""
        n = 0
        while not self.paused and (limit is None or n < limit):
            d = self.client.poll()
            if d is None:
                break
            self.handle(d)
            self.client.ack(d)
            n += 1
        return n

    def run(self, stop: Optional[threading.Event] = None, poll_timeout: float = 0.1) -> None:
        """Blocking loop for threaded deployments; returns once finished or stopped."""
        while not self.finished and not (stop is not None and stop.is_set()):
            if self.paused:
                if stop is not None:
                    stop.wait(poll_timeout)
                continue
            d = self.client.get(poll_timeout)
            if d is None:
                continue
            self.handle(d)
            self.client.ack(d)

    def handle(self, d: Delivery) -> None:
        env = d.envelope
        if not self.seen.accept(d.producer, env):
            return
        if env.topic.startswith("packages/"):
            self.on_package(StreamPackage.from_bytes(env.payload))
        elif env.topic.startswith("control/"):
            self.on_control(json.loads(env.payload))
        self._publish_snapshot()

    def on_package(self, pkg: StreamPackage) -> None:
        self.now = max(self.now, pkg.window_end)
        self._edge_end[pkg.edge_id] = max(self._edge_end.get(pkg.edge_id, 0), pkg.window_end)
        prev_high = self._pkg_high.get(pkg.edge_id, 0)
        self._pkg_high[pkg.edge_id] = max(prev_high, pkg.seq)
        if self._open is None:
            floor = -1 if self._last_closed is None else self._last_closed
            self._open = pkg.window_start if pkg.window_start > floor else floor + 1
            self.dedup.advance(self._open)
        elif pkg.window_start > self._open:
            self._close_open()
            self._open = pkg.window_start
            self.dedup.advance(self._open)
        window_id = self._open

        raws, bad = acquire(pkg)
        c = self._c
        c.tin[Task.ACQUISITION] += len(pkg.records)
        c.tout[Task.ACQUISITION] += len(raws)
        if bad:
            c.dropped[Task.ACQUISITION][DropCode.MALFORMED_RECORD.value] += len(bad)
            self._quarantine(window_id, bad)
        self._pending.extend(assign_ids(raws, self.ids))
        self._maybe_finish()

    def on_control(self, msg: dict) -> None:
        if msg.get("type") == END_OF_STREAM:
            self._eos[msg["edge_id"]] = int(msg["packages"])
            self._maybe_finish()

    def _maybe_finish(self) -> None:
        if self.finished or not self.cfg.edges:
            return
        for e in self.cfg.edges:
            if e not in self._eos or self._pkg_high.get(e, 0) < self._eos[e]:
                return
        self.finish()

    def finish(self) -> None:
        """Close the open window and tell the cloud this node is done."""
        if self.finished:
            return
        self.flush()
        self.finished = True
        snap = self.monitor_snapshot()
        for s in snap:
            if not s.conserved:
                raise PipelineInvariantError(f"{self.cfg.fog_id}: {s.task.value} counters not conserved: {s}")
        self.client.publish(CLOUD_UPLOAD, eos_upload_payload(self.cfg.fog_id, snap, self.windows_closed))

    def _quarantine(self, window_id: int, bad: list[MalformedRecord]) -> None:
        self.quarantined.extend((window_id, b) for b in bad)
        qdir = self.cfg.quarantine_dir
        if qdir is not None:
            path = Path(qdir) / f"{window_id}.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "a", encoding="utf-8", newline="") as fh:
                fh.writelines(b.text + "\n" for b in bad)

    # -- window close ----------------------------------------------------------

    def flush(self) -> None:
        if self._open is not None:
            self._close_open()

    def _close_open(self) -> None:
        window_id = self._open
        assert window_id is not None
        pending, self._pending = self._pending, []
        self._open = None
        self._last_closed = window_id
        c = self._c

        res: CleanResult = clean(
            pending,
            self.dedup,
            self.trips,
            cadence=self.cfg.cadence,
            slack=self.cfg.slack,
            emitted_at=self.now,
        )
        survivors = [handle_late(t, self.db) for t in res.survivors]
        drops = res.drop_counts()
        c.tin[Task.PROCESSING] += len(pending)
        c.tout[Task.PROCESSING] += len(survivors)
        for code, n in drops.items():
            c.dropped[Task.PROCESSING][code.value] += n
        self.drop_reasons.update(str(r) for _, r in res.drops)
        c.alarms += len(res.alarms)
        if len(pending) != len(survivors) + sum(drops.values()):
            raise PipelineInvariantError(f"window {window_id}: processing lost tuples")

        table = self.db.store_table(window_id, survivors)
        c.tin[Task.STORAGE] += len(survivors)
        c.tout[Task.STORAGE] += table.size

        rows = [t.to_row() for t in self.db.leverage(window_id)]
        c.tin[Task.LEVERAGE] += table.size
        c.tout[Task.LEVERAGE] += len(rows)

        c.tin[Task.TRANSPORTATION] += len(rows)
        self._upload(window_id, rows)
        c.tout[Task.TRANSPORTATION] += len(rows)
        self.db.mark_uploaded(window_id, self.now)
        self.db.evict_expired(self.now)
        low = self.low_watermark()
        if low is not None:
            self.trips.prune(low - self.cfg.slack - 2 * self.cfg.period)

        for a in res.alarms:
            self.client.publish(ALARMS, a.to_json().encode())
        self.alarms.extend(res.alarms)
        c.last_window = window_id
        self.windows_closed += 1
        if self.on_window is not None:
            self.on_window(
                {
                    "event": "window_closed",
                    "fog": self.cfg.fog_id,
                    "window_id": window_id,
                    "tuples_in": len(pending),
                    "survivors": len(survivors),
                    "late": sum(1 for t in survivors if t.late),
                    "dropped": {k.value: v for k, v in sorted(drops.items(), key=lambda kv: kv[0].value)},
                    "alarms": len(res.alarms),
                    "emitted_at": self.now,
                }
            )

    def low_watermark(self) -> Optional[int]:
        """Latest window end every still-running edge has reached.

        Edges publish independently, so one can be several windows behind
        another; trip state is only forgotten once the slowest has moved on.
        """
        if not self.cfg.edges:
            return self.now
        running = [e for e in self.cfg.edges if e not in self._eos]
        if not running:
            return self.now
        if any(e not in self._edge_end for e in running):
            return None
        return min(self._edge_end[e] for e in running)

    def _upload(self, window_id: int, rows: list[list]) -> None:
        payloads = upload_payloads(self.cfg.fog_id, window_id, rows, self.cfg.chunk_tuples)
        envs = [Envelope(CLOUD_UPLOAD, i + 1, p) for i, p in enumerate(payloads)]
        for batch in aggregate(envs, self.cfg.upload_max_bytes):
            self.client.publish(CLOUD_UPLOAD, batch.payload)

    # -- monitor / administrator -------------------------------------------------

    def _publish_snapshot(self) -> None:
        snap = self._c.snapshot()
        with self._snapshot_lock:
            self._snapshot = snap

    def monitor_snapshot(self) -> tuple[TaskStatus, ...]:
        """Immutable copy of the six task statuses as of the last handled message."""
        self._publish_snapshot()
        with self._snapshot_lock:
            return self._snapshot

    def admin_command(self, cmd: Union[AdminCommand, str], value: Any = None) -> AdminAck:
        try:
            command = AdminCommand(cmd)
        except ValueError:
            self._c.tin[Task.CONTROL] += 1
            self._c.dropped[Task.CONTROL]["UnknownCommand"] += 1
            raise UnknownCommand(f"unknown admin command {cmd!r}") from None
        self._c.tin[Task.CONTROL] += 1
        detail = ""
        if command is AdminCommand.PAUSE:
            self.paused = True
        elif command is AdminCommand.RESUME:
            self.paused = False
        elif command is AdminCommand.FLUSH:
            open_window = self._open
            self.flush()
            detail = f"flushed window {open_window}" if open_window is not None else "nothing open"
        elif command is AdminCommand.SET_RETENTION:
            if value is None or float(value) < 0:
                self._c.dropped[Task.CONTROL]["InvalidArgument"] += 1
                raise ValueError("SetRetention needs a non-negative number of seconds")
            self.db.retention_ttl = float(value)
            detail = f"retention {float(value):g}s"
        self._c.tout[Task.CONTROL] += 1
        self._publish_snapshot()
        return AdminAck(command, detail)


def status_by_task(snapshot: Sequence[TaskStatus]) -> dict[Task, TaskStatus]:
    return {s.task: s for s in snapshot}
