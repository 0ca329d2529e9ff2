"""Synthetic transit feeds with a known schedule and controlled defects.

The generated feed is the ground truth for the fog cleaning rules: every
defect :func:`corrupt_feed` injects is written to a ledger, so drop and alarm
counts downstream can be checked exactly.

Manifest lines (JSON, one per trip)::

    {"route_id_rta", "trip_id_br", "vehicle_id_vlr", "trip_start", "trip_finish", "tuples"}

Defect ledger lines (JSON, one per injected defect)::

    {"kind": "duplicate" | "drop" | "blank" | "wrong_value",
     "index": <position in the clean feed>, "field": <name or null>,
     "route_id_rta", "trip_id_br", "vehicle_id_vlr", "timestamp"}

``timestamp`` in the ledger is the tuple's original (clean) value in epoch seconds.
"""

from __future__ import annotations

import enum
import json
import math
import os
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, Mapping, Optional, Sequence, Union

from fogstream.model import (
    FIELDS,
    HEADER_LINE,
    MalformedRecord,
    RawTuple,
    TupleKey,
    format_timestamp,
    is_header,
    parse_raw_record,
    parse_timestamp,
    serialize_record,
)
from fogstream.rng import SplitMix64

PathLike = Union[str, os.PathLike]

# Greater Moncton, roughly.
DEFAULT_BBOX = (46.05, -64.90, 46.15, -64.70)  # (lat_min, lng_min, lat_max, lng_max)

# Scheduled trips per route on the reference service day.
REFERENCE_DAY_SCHEDULED: dict[str, int] = {
    "50": 31, "51": 65, "52": 65, "60": 31, "61": 32, "62": 31, "63": 32, "64": 32,
    "65": 31, "70": 13, "71": 14, "80": 13, "81": 13, "93": 22, "94": 32, "95": 21,
}
# Trips whose tuples reached the cloud on that day, and the printed percentages.
REFERENCE_DAY_PERFORMED: dict[str, int] = {
    "50": 2, "51": 6, "52": 5, "60": 2, "61": 19, "62": 19, "63": 3, "64": 19,
    "65": 19, "70": 1, "71": 2, "80": 1, "81": 1, "93": 1, "94": 3, "95": 1,
}
REFERENCE_DAY_PERCENT: dict[str, str] = {
    "50": "6.45", "51": "9.23", "52": "7.69", "60": "6.45", "61": "59.38", "62": "61.29",
    "63": "9.38", "64": "59.38", "65": "61.29", "70": "7.69", "71": "14.29", "80": "7.69",
    "81": "7.69", "93": "4.55", "94": "9.38", "95": "4.76",
}

# Fields the fog inspects for missing values, in schema order.
CHECKED_FIELDS: tuple[str, ...] = (
    "route_id_rta",
    "trip_id_br",
    "trip_start",
    "trip_finish",
    "vehicle_id_vlr",
    "lat",
    "lng",
    "timestamp",
)
WRONG_VALUE_FIELDS: tuple[str, ...] = ("lat", "timestamp")


class InvalidSchedule(ValueError):
    pass


class InvalidPlan(ValueError):
    pass


@dataclass(frozen=True)
class Trip:
    trip_id_br: str
    trip_start: int
    trip_finish: int
    vehicle_id_vlr: str


@dataclass(frozen=True)
class Route:
    route_id_rta: str
    trips: tuple[Trip, ...]
    route_name: str = ""

    @property
    def trip_count(self) -> int:
        return len(self.trips)


@dataclass(frozen=True)
class Schedule:
    routes: tuple[Route, ...] = ()
    cadence_seconds: int = 5

    def validate(self) -> None:
        errors = []
        if not isinstance(self.cadence_seconds, int) or self.cadence_seconds <= 0:
            errors.append("cadence_seconds must be a positive integer")
        seen_routes = set()
        for route in self.routes:
            if not route.route_id_rta:
                errors.append("route with empty route_id_rta")
            if route.route_id_rta in seen_routes:
                errors.append(f"route {route.route_id_rta}: listed twice")
            seen_routes.add(route.route_id_rta)
            trip_ids = set()
            for trip in route.trips:
                if not trip.trip_start < trip.trip_finish:
                    errors.append(f"route {route.route_id_rta} trip {trip.trip_id_br}: start >= finish")
                if trip.trip_id_br in trip_ids:
                    errors.append(f"route {route.route_id_rta}: duplicate trip_id_br {trip.trip_id_br}")
                if not trip.trip_id_br or not trip.vehicle_id_vlr:
                    errors.append(f"route {route.route_id_rta}: trip with empty id or vehicle")
                trip_ids.add(trip.trip_id_br)
        if errors:
            raise InvalidSchedule("; ".join(errors))

    def trip_counts(self) -> dict[str, int]:
        return {r.route_id_rta: r.trip_count for r in self.routes}

    def to_dict(self) -> dict:
        return {
            "cadence_seconds": self.cadence_seconds,
            "routes": [
                {
                    "route_id_rta": r.route_id_rta,
                    "route_name": r.route_name,
                    "trips": [
                        {
                            "trip_id_br": t.trip_id_br,
                            "trip_start": format_timestamp(t.trip_start),
                            "trip_finish": format_timestamp(t.trip_finish),
                            "vehicle_id_vlr": t.vehicle_id_vlr,
                        }
                        for t in r.trips
                    ],
                }
                for r in self.routes
            ],
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "Schedule":
        """Accepts either an explicit trip list or a ``synthetic`` block for :func:`build_schedule`."""
        try:
            if "synthetic" in obj:
                syn = dict(obj["synthetic"])
                counts = {str(k): int(v) for k, v in syn.pop("routes").items()}
                return build_schedule(counts, cadence_seconds=obj.get("cadence_seconds", 5), **syn)
            routes = []
            for r in obj.get("routes", []):
                trips = tuple(
                    Trip(
                        str(t["trip_id_br"]),
                        _as_seconds(t["trip_start"]),
                        _as_seconds(t["trip_finish"]),
                        str(t["vehicle_id_vlr"]),
                    )
                    for t in r["trips"]
                )
                routes.append(Route(str(r["route_id_rta"]), trips, str(r.get("route_name", ""))))
            sched = cls(tuple(routes), obj.get("cadence_seconds", 5))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidSchedule(f"bad schedule document: {exc}") from exc
        sched.validate()
        return sched

    @classmethod
    def load(cls, path: PathLike) -> "Schedule":
        text = Path(path).read_text()
        if str(path).endswith(".toml"):
            from fogstream.config import load_toml_text

            return cls.from_dict(load_toml_text(text))
        return cls.from_dict(json.loads(text))

    def dump(self, path: PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


def _as_seconds(value) -> int:
    if isinstance(value, int):
        return value
    return parse_timestamp(str(value))


def build_schedule(
    route_trip_counts: Mapping[str, int],
    *,
    service_day: str = "2017-04-15",
    service_start: str = "06:00:00",
    service_hours: float = 16.0,
    trip_seconds: int = 1800,
    cadence_seconds: int = 5,
) -> Schedule:
    """Spread each route's trips evenly over the service span.

    Vehicles are reused across trips of a route, but never for two trips that
    overlap in time.
    """
    day0 = parse_timestamp(f"{service_day} {service_start}")
    span = int(service_hours * 3600)
    routes = []
    for route_id, n in route_trip_counts.items():
        if n < 0:
            raise InvalidSchedule(f"route {route_id}: negative trip count")
        headway = max(span // n, 1) if n else span
        fleet = math.ceil(trip_seconds / headway) + 1
        trips = tuple(
            Trip(
                trip_id_br=f"{route_id}-{i + 1:03d}",
                trip_start=day0 + i * headway,
                trip_finish=day0 + i * headway + trip_seconds,
                vehicle_id_vlr=f"V{route_id}{i % fleet + 1:02d}",
            )
            for i in range(n)
        )
        routes.append(Route(str(route_id), trips, f"Route {route_id}"))
    sched = Schedule(tuple(routes), cadence_seconds)
    sched.validate()
    return sched


def reference_day_schedule(**kwargs) -> Schedule:
    return build_schedule(REFERENCE_DAY_SCHEDULED, **kwargs)


# --- clean feed -----------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    route_id_rta: str
    trip_id_br: str
    vehicle_id_vlr: str
    trip_start: int
    trip_finish: int
    tuples: int


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ManifestEntry, ...] = ()

    @property
    def total(self) -> int:
        return sum(e.tuples for e in self.entries)

    def per_trip(self) -> dict[tuple[str, str], int]:
        return {(e.route_id_rta, e.trip_id_br): e.tuples for e in self.entries}

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(e), separators=(",", ":")) + "\n" for e in self.entries)

    @classmethod
    def from_jsonl(cls, text: str) -> "Manifest":
        return cls(tuple(ManifestEntry(**json.loads(line)) for line in text.splitlines() if line.strip()))


def _route_path(route_id: str, bbox: Sequence[float]) -> tuple[float, float, float, float]:
    lat0, lng0, lat1, lng1 = bbox
    rng = SplitMix64(zlib.crc32(route_id.encode()))
    pts = [
        (lat0 + (lat1 - lat0) * rng.random(), lng0 + (lng1 - lng0) * rng.random()) for _ in range(2)
    ]
    return pts[0][0], pts[0][1], pts[1][0], pts[1][1]


def generate_clean_feed(
    schedule: Schedule, *, bbox: Sequence[float] = DEFAULT_BBOX
) -> tuple[list[RawTuple], Manifest]:
    """One tuple per cadence tick of every trip, merged into timestamp order.

    Each trip reports at ``trip_start + k * cadence`` for every tick not after
    ``trip_finish``.  Positions run along a fixed per-route segment inside
    ``bbox`` (alternating direction by trip), so the output depends only on
    the schedule.
    """
    schedule.validate()
    cadence = schedule.cadence_seconds
    ticks: list[tuple[int, int, int]] = []
    entries = []
    trip_info = []
    for r_idx, route in enumerate(schedule.routes):
        a_lat, a_lng, b_lat, b_lng = _route_path(route.route_id_rta, bbox)
        nickname = f"R{route.route_id_rta}"
        name = route.route_name or f"Route {route.route_id_rta}"
        for t_idx, trip in enumerate(route.trips):
            n = (trip.trip_finish - trip.trip_start) // cadence + 1
            entries.append(
                ManifestEntry(
                    route.route_id_rta, trip.trip_id_br, trip.vehicle_id_vlr,
                    trip.trip_start, trip.trip_finish, n,
                )
            )
            if t_idx % 2:
                path = (b_lat, b_lng, a_lat, a_lng)
            else:
                path = (a_lat, a_lng, b_lat, b_lng)
            v = trip.vehicle_id_vlr
            # Every attribute except vlr_id, position and timestamp is fixed per trip.
            static = (
                f"{route.route_id_rta}0",
                name,
                route.route_id_rta,
                nickname,
                trip.trip_id_br,
                "1",
                f"TTA-{trip.trip_id_br}",
                format_timestamp(trip.trip_start),
                format_timestamp(trip.trip_finish),
                f"Y{v}",
                v,
                f"Bus {v}",
                "40ft low-floor",
            )
            trip_id = len(trip_info)
            trip_info.append((trip, path, static))
            for k in range(n):
                ticks.append((trip.trip_start + k * cadence, trip_id, k))
    ticks.sort()

    feed = []
    for i, (ts, trip_id, _k) in enumerate(ticks):
        trip, (lat_a, lng_a, lat_b, lng_b), static = trip_info[trip_id]
        frac = (ts - trip.trip_start) / (trip.trip_finish - trip.trip_start)
        lat = lat_a + (lat_b - lat_a) * frac
        lng = lng_a + (lng_b - lng_a) * frac
        feed.append(RawTuple(str(i + 1), *static, f"{lat:.6f}", f"{lng:.6f}", format_timestamp(ts)))
    return feed, Manifest(tuple(entries))


# --- corruption -------------------------------------------------------------------


class DefectKind(str, enum.Enum):
    DUPLICATE = "duplicate"
    DROP = "drop"
    BLANK = "blank"
    WRONG_VALUE = "wrong_value"


@dataclass(frozen=True)
class CorruptionPlan:
    """Per-tuple defect probabilities.

    With ``exclusive`` (the default) each tuple receives at most one defect and
    the rates must sum to at most 1, which keeps the ledger an exact oracle.
    Otherwise each defect is drawn independently and may stack on one tuple.
    """

    duplicate_rate: float = 0.0
    drop_rate: float = 0.0
    blank_field_rate: float = 0.0
    wrong_value_rate: float = 0.0
    shuffle_window: int = 0
    rng_seed: int = 0
    slack_seconds: int = 120
    exclusive: bool = True

    def validate(self) -> None:
        rates = (self.duplicate_rate, self.drop_rate, self.blank_field_rate, self.wrong_value_rate)
        errors = []
        if any(not 0.0 <= r <= 1.0 for r in rates):
            errors.append("rates must lie in [0, 1]")
        if self.exclusive and sum(rates) > 1.0 + 1e-12:
            errors.append("exclusive plans need rates summing to at most 1")
        if self.shuffle_window < 0:
            errors.append("shuffle_window must be non-negative")
        if not 0 <= self.rng_seed < 2**64:
            errors.append("rng_seed must be an unsigned 64-bit integer")
        if self.slack_seconds < 0:
            errors.append("slack_seconds must be non-negative")
        if errors:
            raise InvalidPlan("; ".join(errors))

    @classmethod
    def from_dict(cls, obj: Mapping) -> "CorruptionPlan":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise InvalidPlan(f"unknown plan keys: {sorted(unknown)}")
        plan = cls(**obj)
        plan.validate()
        return plan


@dataclass(frozen=True)
class Defect:
    kind: DefectKind
    index: int
    key: TupleKey
    field: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "index": self.index,
            "field": self.field,
            "route_id_rta": self.key.route_id_rta,
            "trip_id_br": self.key.trip_id_br,
            "vehicle_id_vlr": self.key.vehicle_id_vlr,
            "timestamp": self.key.timestamp,
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "Defect":
        key = TupleKey(obj["vehicle_id_vlr"], obj["route_id_rta"], obj["trip_id_br"], obj["timestamp"])
        return cls(DefectKind(obj["kind"]), obj["index"], key, obj["field"])


def ledger_to_jsonl(ledger: Iterable[Defect]) -> str:
    return "".join(json.dumps(d.to_dict(), separators=(",", ":")) + "\n" for d in ledger)


def ledger_from_jsonl(text: str) -> list[Defect]:
    return [Defect.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]


def _clean_key(t: RawTuple) -> TupleKey:
    return TupleKey(t.vehicle_id_vlr, t.route_id_rta, t.trip_id_br, parse_timestamp(t.timestamp))


def _wrong_value(t: RawTuple, clean: RawTuple, fld: str, rng: SplitMix64, slack: int) -> RawTuple:
    if fld == "lat":
        return t._replace(lat=f"{90.0 + 0.5 + 89.0 * rng.random():.6f}")
    # Always before the trip: pushing timestamps into the future would also
    # drag the replay clock forward.
    # `clean` supplies trip_start, which a stacked blank may have erased from `t`.
    bad = parse_timestamp(clean.trip_start) - slack - 1 - rng.below(3600)
    return t._replace(timestamp=format_timestamp(bad))


def corrupt_feed(feed: Sequence[RawTuple], plan: CorruptionPlan) -> tuple[list[RawTuple], list[Defect]]:
    """Inject defects into a clean feed and scramble arrival order.

    Duplicates are emitted directly after their original with a fresh
    ``vlr_id``.  Scrambling sorts by ``index + U{0..shuffle_window}``, so no
    tuple moves more than ``shuffle_window`` positions past another.
    """
    plan.validate()
    rng = SplitMix64(plan.rng_seed)
    out: list[RawTuple] = []
    ledger: list[Defect] = []
    c_dup = plan.duplicate_rate
    c_drop = c_dup + plan.drop_rate
    c_blank = c_drop + plan.blank_field_rate
    c_wrong = c_blank + plan.wrong_value_rate
    any_defect = c_wrong > 0.0
    dup_serial = 0

    for i, t in enumerate(feed):
        if not any_defect:
            out.append(t)
            continue
        if plan.exclusive:
            u = rng.random()
            picks = (
                (DefectKind.DUPLICATE,) if u < c_dup
                else (DefectKind.DROP,) if u < c_drop
                else (DefectKind.BLANK,) if u < c_blank
                else (DefectKind.WRONG_VALUE,) if u < c_wrong
                else ()
            )
        else:
            draws = [rng.random() for _ in range(4)]
            picks = tuple(
                kind
                for kind, rate, u in zip(
                    (DefectKind.BLANK, DefectKind.WRONG_VALUE, DefectKind.DUPLICATE, DefectKind.DROP),
                    (plan.blank_field_rate, plan.wrong_value_rate, plan.duplicate_rate, plan.drop_rate),
                    draws,
                )
                if u < rate
            )
        if not picks:
            out.append(t)
            continue
        key = _clean_key(t)
        clean = t
        dropped = duplicated = False
        for kind in picks:
            fld = None
            if kind is DefectKind.BLANK:
                fld = CHECKED_FIELDS[rng.below(len(CHECKED_FIELDS))]
                t = t._replace(**{fld: ""})
            elif kind is DefectKind.WRONG_VALUE:
                fld = WRONG_VALUE_FIELDS[rng.below(len(WRONG_VALUE_FIELDS))]
                t = _wrong_value(t, clean, fld, rng, plan.slack_seconds)
            elif kind is DefectKind.DUPLICATE:
                duplicated = True
            else:
                dropped = True
            ledger.append(Defect(kind, i, key, fld))
        if dropped:
            continue
        out.append(t)
        if duplicated:
            dup_serial += 1
            out.append(t._replace(vlr_id=f"{t.vlr_id}d{dup_serial}"))

    if plan.shuffle_window > 0:
        w = plan.shuffle_window + 1
        order = sorted(range(len(out)), key=lambda j: (j + rng.below(w), j))
        out = [out[j] for j in order]
    return out, ledger


# --- CSV files -------------------------------------------------------------------


def write_csv(feed: Iterable[Sequence[str]], path: PathLike, *, header: bool = True) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if header:
            fh.write(HEADER_LINE + "\n")
        fh.writelines(serialize_record(t) + "\n" for t in feed)


def iter_records(fh: IO[str]) -> Iterator[tuple[int, str]]:
    """Yield ``(line_no, record_text)`` for each CSV record, header skipped.

    A quoted field may contain a newline, so physical lines are joined until
    the quote count balances.  ``record_text`` is the record verbatim, minus
    its line terminator.
    """
    pending: list[str] = []
    start = 0
    first = True
    for line_no, line in enumerate(fh, 1):
        if not pending:
            start = line_no
        pending.append(line)
        if sum(p.count('"') for p in pending) % 2:
            continue
        text = "".join(pending).rstrip("\r\n")
        pending = []
        if first:
            first = False
            if is_header(text):
                continue
        yield start, text
    if pending:
        yield start, "".join(pending).rstrip("\r\n")


def read_csv(path: PathLike) -> list[RawTuple]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for line_no, text in iter_records(fh):
            try:
                out.append(parse_raw_record(text))
            except MalformedRecord as exc:
                raise MalformedRecord(exc.reason, line_no, text) from None
    return out


def partition_by_route(feed: Iterable[RawTuple], n: int) -> list[list[RawTuple]]:
    """Split a feed across ``n`` edge nodes, keeping each route on one edge."""
    parts: list[list[RawTuple]] = [[] for _ in range(n)]
    for t in feed:
        parts[zlib.crc32(t.route_id_rta.encode()) % n].append(t)
    return parts


__all__ = [
    "CHECKED_FIELDS",
    "CorruptionPlan",
    "Defect",
    "DefectKind",
    "FIELDS",
    "InvalidPlan",
    "InvalidSchedule",
    "Manifest",
    "ManifestEntry",
    "Route",
    "Schedule",
    "REFERENCE_DAY_PERCENT",
    "REFERENCE_DAY_PERFORMED",
    "REFERENCE_DAY_SCHEDULED",
    "Trip",
    "build_schedule",
    "corrupt_feed",
    "generate_clean_feed",
    "iter_records",
    "ledger_from_jsonl",
    "ledger_to_jsonl",
    "partition_by_route",
    "read_csv",
    "reference_day_schedule",
    "write_csv",
]
