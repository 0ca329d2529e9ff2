"""Cloud sink: append-only batch store plus keyed map/reduce reports."""

from __future__ import annotations

import json
import os
from collections import defaultdict
from dataclasses import dataclass, field
from itertools import groupby
from operator import itemgetter
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Optional, Sequence, Union

from fogstream.broker import CLOUD_UPLOAD, SeqDeduper, decompose
from fogstream.broker.core import Delivery
from fogstream.edge import END_OF_STREAM
from fogstream.feedgen import Schedule
from fogstream.fog.node import UPLOAD_TABLE, Client, Task, TaskStatus
from fogstream.model import CanonicalTuple, DropCode, TripReportRow, TupleKey

PathLike = Union[str, os.PathLike]

UNSCHEDULED = "(unscheduled)"
TRIPS_CSV_HEADER = "route_id_rta,scheduled,performed,percent"


class DecodeError(ValueError):
    pass


class InconsistentSnapshots(RuntimeError):
    pass


@dataclass(frozen=True)
class StoredBatch:
    fog: str
    window_id: int
    first_id: int
    last_id: int
    tuples: tuple[CanonicalTuple, ...]


class CloudStore:
    """Append-only store with a global TupleKey dedup set.

    A tuple whose key is already stored is ignored.  If it carries the same
    ``(fog, fog_id)`` as the stored copy it is a broker redelivery; otherwise
    it is a duplicate that slipped past the fog's dedup horizon and is counted
    in ``rejected_duplicates``.
    """

    def __init__(self) -> None:
        self.batches: list[StoredBatch] = []
        self._keys: dict[TupleKey, tuple[str, int]] = {}
        self.redelivered = 0
        self.rejected_duplicates = 0
        self._raw: list[bytes] = []

    def __len__(self) -> int:
        return len(self._keys)

    def ingest_batch(self, payload: bytes) -> Optional[StoredBatch]:
        """Store the new tuples of one upload payload; None if nothing was new."""
        try:
            obj = json.loads(payload)
        except ValueError as exc:
            raise DecodeError(f"undecodable upload payload: {exc}") from exc
        return self._ingest(obj, payload)

    def _ingest(self, obj, payload: bytes) -> Optional[StoredBatch]:
        try:
            if not isinstance(obj, dict) or obj.get("type") != UPLOAD_TABLE:
                raise DecodeError("not a table payload")
            fog = str(obj["fog"])
            window_id = int(obj["window_id"])
            tuples = [CanonicalTuple.from_row(r) for r in obj["tuples"]]
        except DecodeError:
            raise
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            raise DecodeError(f"undecodable upload payload: {exc}") from exc
        fresh = []
        keys = self._keys
        for t in tuples:
            origin = keys.get(t.key)
            if origin is None:
                keys[t.key] = (fog, t.fog_id)
                fresh.append(t)
            elif origin == (fog, t.fog_id):
                self.redelivered += 1
            else:
                self.rejected_duplicates += 1
        self._raw.append(payload)
        if not fresh:
            return None
        ids = [t.fog_id for t in fresh]
        batch = StoredBatch(fog, window_id, min(ids), max(ids), tuple(fresh))
        self.batches.append(batch)
        return batch

    def tuples(self) -> Iterator[CanonicalTuple]:
        for b in self.batches:
            yield from b.tuples

    def dump(self, path: PathLike) -> None:
        """Write every ingested payload, in arrival order, one per line."""
        with open(path, "wb") as fh:
            for p in self._raw:
                fh.write(p.rstrip(b"\n") + b"\n")

    @classmethod
    def load(cls, path: PathLike) -> "CloudStore":
        store = cls()
        with open(path, "rb") as fh:
            for line in fh:
                if line.strip():
                    store.ingest_batch(line)
        return store


# --- map / reduce ------------------------------------------------------------------


def map_phase(tuples: Iterable[CanonicalTuple]) -> Iterator[tuple[tuple[str, str], int]]:
    for t in tuples:
        yield (t.key.route_id_rta, t.key.trip_id_br), 1


def shuffle(pairs: Iterable[tuple[tuple[str, str], int]]) -> Iterator[tuple[tuple[str, str], list[int]]]:
    for k, group in groupby(sorted(pairs, key=itemgetter(0)), key=itemgetter(0)):
        yield k, [v for _, v in group]


def reduce_phase(groups: Iterable[tuple[tuple[str, str], list[int]]]) -> dict[tuple[str, str], int]:
    return {k: sum(vs) for k, vs in groups}


def trip_tuple_counts(store: CloudStore) -> dict[tuple[str, str], int]:
    return reduce_phase(shuffle(map_phase(store.tuples())))


def map_reduce_trips(
    store: CloudStore, schedule: Schedule, min_tuples_per_trip: int = 1
) -> list[TripReportRow]:
    """Scheduled vs performed trips per route.

    A trip counts as performed when at least ``min_tuples_per_trip`` of its
    tuples are stored.  Trips missing from the schedule are reported in a
    trailing ``(unscheduled)`` row.
    """
    if min_tuples_per_trip < 1:
        raise ValueError("min_tuples_per_trip must be >= 1")
    counts = trip_tuple_counts(store)
    scheduled = {(r.route_id_rta, t.trip_id_br) for r in schedule.routes for t in r.trips}
    rows = []
    for route in sorted(schedule.routes, key=lambda r: r.route_id_rta):
        performed = sum(
            1 for t in route.trips if counts.get((route.route_id_rta, t.trip_id_br), 0) >= min_tuples_per_trip
        )
        rows.append(TripReportRow(route.route_id_rta, route.trip_count, performed))
    extra = [k for k, n in counts.items() if k not in scheduled and n >= min_tuples_per_trip]
    if extra:
        rows.append(TripReportRow(UNSCHEDULED, 0, len(extra)))
    return rows


def trips_csv(rows: Sequence[TripReportRow]) -> str:
    return TRIPS_CSV_HEADER + "\n" + "".join(",".join(r.csv_fields()) + "\n" for r in rows)


def render_trips_table(rows: Sequence[TripReportRow]) -> str:
    head = ("Bus Route", "Scheduled trips", "Performed trips", "(%)")
    body = [r.csv_fields() for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(head)]
    fmt = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths))  # noqa: E731
    lines = [fmt(head), fmt(["-" * w for w in widths])] + [fmt(b) for b in body]
    return "\n".join(lines) + "\n"


# --- totals ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Totals:
    received: int
    deleted: int
    arrived: int
    quarantined: int = 0
    deleted_by_reason: Mapping[str, int] = field(default_factory=dict)

    @property
    def consistent(self) -> bool:
        return self.received == self.deleted + self.arrived + self.quarantined

    def check(self) -> "Totals":
        if not self.consistent:
            raise InconsistentSnapshots(
                f"received {self.received} != deleted {self.deleted} + arrived {self.arrived}"
                f" + quarantined {self.quarantined}"
            )
        return self

    @classmethod
    def from_counts(cls, received: int, deleted: int, quarantined: int = 0) -> "Totals":
        """Derive the arrived count from received and deleted figures."""
        arrived = received - deleted - quarantined
        if arrived < 0:
            raise InconsistentSnapshots("more tuples deleted than received")
        return cls(received, deleted, arrived, quarantined)

    def render(self) -> str:
        lines = [
            f"received_at_fog={self.received}",
            f"deleted_at_fog={self.deleted}",
            f"quarantined_at_fog={self.quarantined}",
            f"arrived_at_cloud={self.arrived}",
        ]
        lines += [f"deleted.{k}={v}" for k, v in sorted(self.deleted_by_reason.items())]
        lines.append(f"identity={'ok' if self.consistent else 'VIOLATED'}")
        share = f"{100 * self.deleted / self.received:.2f}%" if self.received else "n/a"
        lines += [
            "",
            f"{'Received at fog':<22}{self.received:>14,}",
            f"{'Deleted at fog':<22}{self.deleted:>14,}  ({share})",
            f"{'Quarantined at fog':<22}{self.quarantined:>14,}",
            f"{'Arrived at cloud':<22}{self.arrived:>14,}",
        ]
        return "\n".join(lines) + "\n"


def totals(store: CloudStore, fog_snapshots: Iterable[Sequence[TaskStatus]]) -> Totals:
    """Pipeline-wide counts from the final fog snapshots and the cloud store.

    Duplicates the cloud rejects count as deleted.  Raises
    InconsistentSnapshots unless received == deleted + arrived + quarantined.
    """
    received = quarantined = 0
    by_reason: dict[str, int] = defaultdict(int)
    for snap in fog_snapshots:
        for s in snap:
            if s.task is Task.ACQUISITION:
                received += s.tuples_in
                quarantined += s.tuples_dropped.get(DropCode.MALFORMED_RECORD.value, 0)
            elif s.task is Task.PROCESSING:
                for k, v in s.tuples_dropped.items():
                    by_reason[k] += v
    if store.rejected_duplicates:
        by_reason[DropCode.DUPLICATE_TUPLE.value] += store.rejected_duplicates
    deleted = sum(by_reason.values())
    return Totals(received, deleted, len(store), quarantined, dict(by_reason)).check()


# --- node -------------------------------------------------------------------------------


class CloudNode:
    """Subscribes ``cloud/upload`` and ingests until every expected fog has finished."""

    def __init__(self, client: Client, *, expected_fogs: Sequence[str] = ()):
        self.client = client
        self.store = CloudStore()
        self.expected = tuple(expected_fogs)
        self.snapshots: dict[str, tuple[TaskStatus, ...]] = {}
        self.seen = SeqDeduper()
        client.subscribe([CLOUD_UPLOAD])

    @property
    def finished(self) -> bool:
        return bool(self.expected) and all(f in self.snapshots for f in self.expected)

    def handle(self, d: Delivery) -> None:
        if not self.seen.accept(d.producer, d.envelope):
            return
        for inner in decompose(d.envelope):
            try:
                obj = json.loads(inner.payload)
            except ValueError as exc:
                raise DecodeError(f"undecodable upload payload: {exc}") from exc
            if isinstance(obj, dict) and obj.get("type") == END_OF_STREAM:
                self.snapshots[obj["fog"]] = tuple(TaskStatus.from_dict(s) for s in obj["snapshot"])
            else:
                self.store._ingest(obj, inner.payload)

    def step(self) -> int:
        n = 0
        while True:
            d = self.client.poll()
            if d is None:
                return n
            self.handle(d)
            self.client.ack(d)
            n += 1

    def run(self, stop=None, poll_timeout: float = 0.1) -> None:
        while not self.finished and not (stop is not None and stop.is_set()):
            d = self.client.get(poll_timeout)
            if d is None:
                continue
            self.handle(d)
            self.client.ack(d)

    def totals(self) -> Totals:
        return totals(self.store, self.snapshots.values())


def write_reports(
    out_dir: PathLike,
    rows: Sequence[TripReportRow],
    tot: Totals,
) -> tuple[Path, Path]:
    report = Path(out_dir) / "report"
    report.mkdir(parents=True, exist_ok=True)
    trips_path = report / "trips.csv"
    totals_path = report / "totals.txt"
    trips_path.write_text(trips_csv(rows))
    totals_path.write_text(tot.render())
    return trips_path, totals_path
