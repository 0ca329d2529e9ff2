"""Fog processing rules: ID assignment, cleaning, alarms and sorting."""

from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from fogstream.model import (
    AlarmEvent,
    AlarmKind,
    CanonicalTuple,
    DropCode,
    DropReason,
    DuplicateDetail,
    MissingDetail,
    RawTuple,
    TupleKey,
    parse_timestamp,
)

DEFAULT_CADENCE = 5
DEFAULT_SLACK = 120

# Rule (a) inspects these, reporting the first empty one in schema order.
REQUIRED_FIELDS: tuple[str, ...] = (
    "route_id_rta",
    "trip_id_br",
    "trip_start",
    "trip_finish",
    "vehicle_id_vlr",
    "lat",
    "lng",
    "timestamp",
)

_MISSING = {f: DropReason(DropCode.MISSING_ATTRIBUTE_VALUE, f) for f in REQUIRED_FIELDS}
_WRONG = {
    f: DropReason(DropCode.WRONG_ATTRIBUTE_VALUE, f)
    for f in ("trip_start", "trip_finish", "lat", "lng", "timestamp")
}
DUPLICATE = DropReason(DropCode.DUPLICATE_TUPLE)

Scope = tuple[str, str, str]  # (route_id_rta, trip_id_br, vehicle_id_vlr)


class IdCounter:
    """Monotone per-node sequence; the first ID handed out is 1."""

    def __init__(self, last: int = 0):
        self.value = last

    def take(self, n: int) -> range:
        start = self.value + 1
        self.value += n
        return range(start, self.value + 1)


def assign_ids(ts: Sequence[RawTuple], counter: IdCounter) -> list[tuple[int, RawTuple]]:
    return list(zip(counter.take(len(ts)), ts))


class DedupIndex:
    """TupleKeys seen in the last ``horizon`` windows (current one included)."""

    def __init__(self, horizon: int = 2) -> None:
        if horizon < 1:
            raise ValueError("horizon must be at least one window")
        self._windows: deque[set[TupleKey]] = deque([set()], maxlen=horizon)
        self.window_id: Optional[int] = None

    def advance(self, window_id: int) -> None:
        if window_id == self.window_id:
            return
        if self.window_id is not None:
            self._windows.append(set())
        self.window_id = window_id

    def __contains__(self, key: TupleKey) -> bool:
        for w in self._windows:
            if key in w:
                return True
        return False

    def add(self, key: TupleKey) -> None:
        self._windows[-1].add(key)

    def __len__(self) -> int:
        return sum(map(len, self._windows))


class TripIndex:
    """Last surviving timestamp per (route, trip, vehicle)."""

    def __init__(self) -> None:
        self._last: dict[Scope, tuple[int, int]] = {}

    def last(self, scope: Scope) -> Optional[int]:
        got = self._last.get(scope)
        return None if got is None else got[0]

    def update(self, scope: Scope, ts: int, trip_finish: int) -> None:
        self._last[scope] = (ts, trip_finish)

    def prune(self, before: int) -> int:
        """Forget trips that finished before ``before``; returns how many."""
        stale = [s for s, (_, finish) in self._last.items() if finish < before]
        for s in stale:
            del self._last[s]
        return len(stale)

    def __len__(self) -> int:
        return len(self._last)


@dataclass
class CleanResult:
    survivors: list[CanonicalTuple] = field(default_factory=list)
    drops: list[tuple[RawTuple, DropReason]] = field(default_factory=list)
    alarms: list[AlarmEvent] = field(default_factory=list)

    def drop_counts(self) -> dict[DropCode, int]:
        out: dict[DropCode, int] = defaultdict(int)
        for _, reason in self.drops:
            out[reason.code] += 1
        return dict(out)


def clean(
    ts: Iterable[tuple[int, RawTuple]],
    dedup_index: DedupIndex,
    trip_index: TripIndex,
    *,
    cadence: int = DEFAULT_CADENCE,
    slack: int = DEFAULT_SLACK,
    emitted_at: int = 0,
) -> CleanResult:
    """Apply the five defect rules to one window of ID-tagged raw tuples.

    Per tuple, in order: missing value in a required field, wrong value
    (coordinates out of range, unreadable times, timestamp outside the trip
    window widened by ``slack``), duplicate TupleKey (first occurrence
    survives).  Survivors are projected to CanonicalTuple.  Then, per
    (route, trip, vehicle), consecutive surviving timestamps ``g`` seconds
    apart with ``g >= 2 * cadence`` raise a MissingTuples alarm estimating
    ``g // cadence - 1`` lost tuples.  Timestamps at or before the trip's
    last seen survivor are not rescanned.

    Both indexes are updated in place.
    """
    res = CleanResult()
    survivors = res.survivors
    drops = res.drops
    dup_counts: dict[TupleKey, int] = {}
    lo_slack = slack
    # Trip bounds repeat for every tuple of a trip; parse each text once.
    bounds: dict[str, int] = {}

    def bound(text: str) -> int:
        v = bounds.get(text)
        if v is None:
            v = bounds[text] = parse_timestamp(text)
        return v

    for fog_id, t in ts:
        # (a) missing attribute values
        if not (
            t.route_id_rta and t.trip_id_br and t.trip_start and t.trip_finish
            and t.vehicle_id_vlr and t.lat and t.lng and t.timestamp
        ):
            for name in REQUIRED_FIELDS:
                if not getattr(t, name):
                    drops.append((t, _MISSING[name]))
                    break
            continue
        # (b) wrong attribute values, checked in schema order
        bad = None
        try:
            start = bound(t.trip_start)
        except ValueError:
            bad = "trip_start"
        if bad is None:
            try:
                finish = bound(t.trip_finish)
                if finish < start:
                    raise ValueError
            except ValueError:
                bad = "trip_finish"
        if bad is None:
            try:
                lat = float(t.lat)
                if not -90.0 <= lat <= 90.0:
                    raise ValueError
            except ValueError:
                bad = "lat"
        if bad is None:
            try:
                lng = float(t.lng)
                if not -180.0 <= lng <= 180.0:
                    raise ValueError
            except ValueError:
                bad = "lng"
        if bad is None:
            try:
                when = parse_timestamp(t.timestamp)
                if not start - lo_slack <= when <= finish + slack:
                    raise ValueError
            except ValueError:
                bad = "timestamp"
        if bad is not None:
            drops.append((t, _WRONG[bad]))
            continue
        # (c) duplicates
        key = TupleKey(t.vehicle_id_vlr, t.route_id_rta, t.trip_id_br, when)
        if key in dedup_index:
            drops.append((t, DUPLICATE))
            dup_counts[key] = dup_counts.get(key, 0) + 1
            continue
        dedup_index.add(key)
        # (d) projection drops the redundant columns
        survivors.append(CanonicalTuple(fog_id, key, t.route_name, start, finish, lat, lng, False))

    for key, n in dup_counts.items():
        res.alarms.append(
            AlarmEvent(
                AlarmKind.DUPLICATE_TUPLES,
                (key.route_id_rta, key.trip_id_br, key.vehicle_id_vlr),
                DuplicateDetail(key, n),
                emitted_at,
            )
        )
    res.alarms.extend(scan_gaps(survivors, trip_index, cadence=cadence, emitted_at=emitted_at))
    return res


def scan_gaps(
    survivors: Iterable[CanonicalTuple],
    trip_index: TripIndex,
    *,
    cadence: int = DEFAULT_CADENCE,
    emitted_at: int = 0,
) -> list[AlarmEvent]:
    by_scope: dict[Scope, list[int]] = defaultdict(list)
    finish: dict[Scope, int] = {}
    for c in survivors:
        k = c.key
        scope = (k.route_id_rta, k.trip_id_br, k.vehicle_id_vlr)
        by_scope[scope].append(k.timestamp)
        finish[scope] = c.trip_finish
    alarms = []
    threshold = 2 * cadence
    for scope in sorted(by_scope):
        prev = trip_index.last(scope)
        for ts in sorted(by_scope[scope]):
            if prev is not None and ts <= prev:
                continue
            if prev is not None and ts - prev >= threshold:
                alarms.append(
                    AlarmEvent(
                        AlarmKind.MISSING_TUPLES,
                        scope,
                        MissingDetail(prev, ts, (ts - prev) // cadence - 1),
                        emitted_at,
                    )
                )
            prev = ts
        assert prev is not None
        trip_index.update(scope, prev, finish[scope])
    return alarms


def sort_window(ts: Iterable[CanonicalTuple]) -> list[CanonicalTuple]:
    """Sort by (route_id_rta, trip_id_br, timestamp); ties keep fog_id order."""
    return sorted(ts, key=CanonicalTuple.sort_key.fget)  # type: ignore[attr-defined]


def is_sorted(ts: Sequence[CanonicalTuple]) -> bool:
    prev = None
    for t in ts:
        k = (t.key.route_id_rta, t.key.trip_id_br, t.key.timestamp)
        if prev is not None and k < prev:
            return False
        prev = k
    return True
