"""Shared domain types for the transit tuple pipeline.

A raw vehicle-location record carries 17 positional string attributes.  The
fog node projects survivors of its cleaning rules onto :class:`CanonicalTuple`,
which is the unit that travels on to the cloud.
"""

from __future__ import annotations

import csv
import datetime as _dt
import enum
import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from functools import lru_cache
from typing import NamedTuple, Optional, Sequence, Union

FIELDS: tuple[str, ...] = (
    "vlr_id",
    "route_id_vlr",
    "route_name",
    "route_id_rta",
    "route_nickname",
    "trip_id_br",
    "transit_authority_service_time_id",
    "trip_id_tta",
    "trip_start",
    "trip_finish",
    "vehicle_id_yab",
    "vehicle_id_vlr",
    "vehicle_id_vlr_ta",
    "bdescription",
    "lat",
    "lng",
    "timestamp",
)
FIELD_INDEX = {name: i for i, name in enumerate(FIELDS)}
HEADER_LINE = ",".join(FIELDS)

# Components of the duplicate relation, listed in schema order.
KEY_FIELDS: tuple[str, ...] = ("route_id_rta", "trip_id_br", "vehicle_id_vlr", "timestamp")

# Columns removed when a raw record is projected to a CanonicalTuple.
REDUNDANT_FIELDS: tuple[str, ...] = (
    "vlr_id",
    "route_id_vlr",
    "route_nickname",
    "transit_authority_service_time_id",
    "trip_id_tta",
    "vehicle_id_yab",
    "vehicle_id_vlr_ta",
    "bdescription",
)


class MalformedRecord(ValueError):
    """A CSV record that cannot be a RawTuple (wrong field count or bad quoting)."""

    def __init__(self, reason: str, line_no: Optional[int] = None, text: str = ""):
        self.reason = reason
        self.line_no = line_no
        self.text = text
        where = f"line {line_no}: " if line_no is not None else ""
        super().__init__(f"{where}{reason}")


class AttributeDefect(ValueError):
    field_name: str

    def __init__(self, field_name: str, detail: str = ""):
        self.field_name = field_name
        super().__init__(f"{field_name}{': ' + detail if detail else ''}")


class MissingAttributeValue(AttributeDefect):
    pass


class WrongAttributeValue(AttributeDefect):
    pass


class RawTuple(NamedTuple):
    """One 17-attribute record as received.  Every field is kept as text."""

    vlr_id: str
    route_id_vlr: str
    route_name: str
    route_id_rta: str
    route_nickname: str
    trip_id_br: str
    transit_authority_service_time_id: str
    trip_id_tta: str
    trip_start: str
    trip_finish: str
    vehicle_id_yab: str
    vehicle_id_vlr: str
    vehicle_id_vlr_ta: str
    bdescription: str
    lat: str
    lng: str
    timestamp: str


class TupleKey(NamedTuple):
    vehicle_id_vlr: str
    route_id_rta: str
    trip_id_br: str
    timestamp: int


class CanonicalTuple(NamedTuple):
    fog_id: int
    key: TupleKey
    route_name: str
    trip_start: int
    trip_finish: int
    lat: float
    lng: float
    late: bool = False

    @property
    def sort_key(self) -> tuple[str, str, int, int]:
        k = self.key
        return (k.route_id_rta, k.trip_id_br, k.timestamp, self.fog_id)

    def to_row(self) -> list:
        k = self.key
        return [
            self.fog_id,
            k.vehicle_id_vlr,
            k.route_id_rta,
            k.trip_id_br,
            k.timestamp,
            self.route_name,
            self.trip_start,
            self.trip_finish,
            self.lat,
            self.lng,
            self.late,
        ]

    @classmethod
    def from_row(cls, row: Sequence) -> "CanonicalTuple":
        (fog_id, vehicle, route, trip, ts, route_name, start, finish, lat, lng, late) = row
        return cls(
            int(fog_id),
            TupleKey(str(vehicle), str(route), str(trip), int(ts)),
            str(route_name),
            int(start),
            int(finish),
            float(lat),
            float(lng),
            bool(late),
        )


def to_raw(t: CanonicalTuple) -> RawTuple:
    """Re-expand a canonical tuple to the 17-field layout (projected columns left empty)."""
    k = t.key
    values = dict.fromkeys(FIELDS, "")
    values.update(
        route_name=t.route_name,
        route_id_rta=k.route_id_rta,
        trip_id_br=k.trip_id_br,
        trip_start=format_timestamp(t.trip_start),
        trip_finish=format_timestamp(t.trip_finish),
        vehicle_id_vlr=k.vehicle_id_vlr,
        lat=repr(t.lat),
        lng=repr(t.lng),
        timestamp=format_timestamp(k.timestamp),
    )
    return RawTuple(**values)


@dataclass(frozen=True)
class StreamPackage:
    """Records collected by one edge node during one arrival-time window."""

    edge_id: str
    window_start: int
    window_end: int
    seq: int
    records: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.window_start < self.window_end:
            raise ValueError("window_start must precede window_end")
        if self.seq < 0:
            raise ValueError("seq must be non-negative")

    def to_bytes(self) -> bytes:
        return json.dumps(
            {
                "edge_id": self.edge_id,
                "window_start": self.window_start,
                "window_end": self.window_end,
                "seq": self.seq,
                "records": list(self.records),
            },
            separators=(",", ":"),
        ).encode()

    @classmethod
    def from_bytes(cls, data: bytes) -> "StreamPackage":
        obj = json.loads(data)
        return cls(
            obj["edge_id"], obj["window_start"], obj["window_end"], obj["seq"], tuple(obj["records"])
        )


class AlarmKind(str, enum.Enum):
    MISSING_TUPLES = "MissingTuples"
    DUPLICATE_TUPLES = "DuplicateTuples"


@dataclass(frozen=True)
class MissingDetail:
    gap_start: int
    gap_end: int
    estimated_missing: int


@dataclass(frozen=True)
class DuplicateDetail:
    key: TupleKey
    duplicate_count: int


@dataclass(frozen=True)
class AlarmEvent:
    kind: AlarmKind
    key_scope: tuple[str, str, str]  # (route_id_rta, trip_id_br, vehicle_id_vlr)
    detail: Union[MissingDetail, DuplicateDetail]
    emitted_at: int

    def __post_init__(self) -> None:
        if self.kind is AlarmKind.MISSING_TUPLES:
            if not isinstance(self.detail, MissingDetail) or self.detail.estimated_missing < 1:
                raise ValueError("MissingTuples alarm needs estimated_missing >= 1")
        elif not isinstance(self.detail, DuplicateDetail) or self.detail.duplicate_count < 1:
            raise ValueError("DuplicateTuples alarm needs duplicate_count >= 1")

    def to_dict(self) -> dict:
        route, trip, vehicle = self.key_scope
        out = {
            "kind": self.kind.value,
            "route_id_rta": route,
            "trip_id_br": trip,
            "vehicle_id_vlr": vehicle,
        }
        d = self.detail
        if isinstance(d, MissingDetail):
            out.update(gap_start=d.gap_start, gap_end=d.gap_end, estimated_missing=d.estimated_missing)
        else:
            out.update(timestamp=d.key.timestamp, duplicate_count=d.duplicate_count)
        out["emitted_at"] = self.emitted_at
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, obj: dict) -> "AlarmEvent":
        scope = (obj["route_id_rta"], obj["trip_id_br"], obj["vehicle_id_vlr"])
        kind = AlarmKind(obj["kind"])
        detail: Union[MissingDetail, DuplicateDetail]
        if kind is AlarmKind.MISSING_TUPLES:
            detail = MissingDetail(obj["gap_start"], obj["gap_end"], obj["estimated_missing"])
        else:
            key = TupleKey(scope[2], scope[0], scope[1], obj["timestamp"])
            detail = DuplicateDetail(key, obj["duplicate_count"])
        return cls(kind, scope, detail, obj["emitted_at"])


class DropCode(str, enum.Enum):
    MISSING_ATTRIBUTE_VALUE = "MissingAttributeValue"
    DUPLICATE_TUPLE = "DuplicateTuple"
    WRONG_ATTRIBUTE_VALUE = "WrongAttributeValue"
    MALFORMED_RECORD = "MalformedRecord"


@dataclass(frozen=True)
class DropReason:
    code: DropCode
    field_name: Optional[str] = None

    def __post_init__(self) -> None:
        if self.code is DropCode.MALFORMED_RECORD and self.field_name is not None:
            raise ValueError("MalformedRecord drops carry no field name")

    def __str__(self) -> str:
        return f"{self.code.value}({self.field_name})" if self.field_name else self.code.value


_CENT = Decimal("0.01")


def trip_percent(performed: int, scheduled: int) -> Decimal:
    """Share of performed trips, in percent, rounded half-up to two decimals."""
    if scheduled <= 0:
        return Decimal("0.00")
    return (Decimal(100 * performed) / Decimal(scheduled)).quantize(_CENT, rounding=ROUND_HALF_UP)


@dataclass(frozen=True)
class TripReportRow:
    route_id_rta: str
    scheduled_trips: int
    performed_trips: int
    percent: Decimal = field(init=False)

    def __post_init__(self) -> None:
        if self.performed_trips < 0 or self.scheduled_trips < 0:
            raise ValueError("trip counts must be non-negative")
        object.__setattr__(self, "percent", trip_percent(self.performed_trips, self.scheduled_trips))

    def csv_fields(self) -> list[str]:
        return [self.route_id_rta, str(self.scheduled_trips), str(self.performed_trips), f"{self.percent:.2f}"]


# --- timestamps -------------------------------------------------------------

_EPOCH_ORDINAL = _dt.date(1970, 1, 1).toordinal()


@lru_cache(maxsize=4096)
def _day_seconds(date_text: str) -> int:
    y, m, d = int(date_text[0:4]), int(date_text[5:7]), int(date_text[8:10])
    return (_dt.date(y, m, d).toordinal() - _EPOCH_ORDINAL) * 86400


def parse_timestamp(text: str) -> int:
    """Parse ``YYYY-MM-DD HH:MM:SS`` (UTC) or integer epoch seconds.

    Raises ValueError on anything else, including the empty string.
    """
    s = text.strip()
    if s.isdigit() or (s[:1] == "-" and s[1:].isdigit()):
        return int(s)
    if len(s) != 19 or s[4] != "-" or s[7] != "-" or s[10] != " " or s[13] != ":" or s[16] != ":":
        raise ValueError(f"unrecognised timestamp {text!r}")
    try:
        hh, mm, ss = int(s[11:13]), int(s[14:16]), int(s[17:19])
        base = _day_seconds(s[:10])
    except ValueError:
        raise ValueError(f"unrecognised timestamp {text!r}") from None
    if hh > 23 or mm > 59 or ss > 59:
        raise ValueError(f"unrecognised timestamp {text!r}")
    return base + hh * 3600 + mm * 60 + ss


@lru_cache(maxsize=4096)
def _day_text(day: int) -> str:
    return _dt.date.fromordinal(day + _EPOCH_ORDINAL).isoformat()


def format_timestamp(seconds: int) -> str:
    day, rem = divmod(int(seconds), 86400)
    hh, rem = divmod(rem, 3600)
    mm, ss = divmod(rem, 60)
    return f"{_day_text(day)} {hh:02d}:{mm:02d}:{ss:02d}"


# --- CSV wire format ----------------------------------------------------------

_NEEDS_QUOTING = frozenset(',"\r\n')


def _quote(value: str) -> str:
    if _NEEDS_QUOTING.isdisjoint(value):
        return value
    return '"' + value.replace('"', '""') + '"'


def serialize_record(t: Sequence[str]) -> str:
    """One CSV record (no line terminator), quoting only where required."""
    return ",".join(map(_quote, t))


def split_record(line: str) -> list[str]:
    line = line.rstrip("\r\n")
    if '"' not in line:
        return line.split(",")
    try:
        rows = list(csv.reader([line], strict=True))
    except csv.Error as exc:
        raise MalformedRecord(f"bad quoting ({exc})", text=line) from None
    if len(rows) != 1:
        raise MalformedRecord("record spans multiple rows", text=line)
    return rows[0]


def parse_raw_record(line: str) -> RawTuple:
    """Split one CSV record into a RawTuple; values stay unvalidated text."""
    fields = split_record(line)
    if len(fields) != len(FIELDS):
        raise MalformedRecord(f"expected {len(FIELDS)} fields, got {len(fields)}", text=line)
    return RawTuple._make(fields)


def is_header(line: str) -> bool:
    return line.split(",", 1)[0].strip('"') == "vlr_id"


def normalize_record(line: str) -> str:
    return serialize_record(parse_raw_record(line))


def tuple_key(t: RawTuple) -> TupleKey:
    """The duplicate-relation key of a raw tuple.

    Raises MissingAttributeValue naming the first empty key component in schema
    order, or WrongAttributeValue when the timestamp does not parse.
    """
    for name in KEY_FIELDS:
        if not getattr(t, name):
            raise MissingAttributeValue(name)
    try:
        ts = parse_timestamp(t.timestamp)
    except ValueError:
        raise WrongAttributeValue("timestamp", t.timestamp) from None
    return TupleKey(t.vehicle_id_vlr, t.route_id_rta, t.trip_id_br, ts)
