"""Edge node emulator.

An edge node batches records into fixed-period packages by *arrival* time
and publishes them on ``packages/<edge_id>``.  It never parses, cleans or
reorders what it forwards; that is the fog's job.
"""

from __future__ import annotations

import json
import logging
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Optional, Protocol, Sequence

from fogstream.broker import BrokerError, control_topic, packages_topic
from fogstream.broker.core import Ack
from fogstream.model import FIELD_INDEX, MalformedRecord, StreamPackage, parse_timestamp, split_record

log = logging.getLogger(__name__)

END_OF_STREAM = "end_of_stream"
MAX_BACKOFF = 30.0


class Publisher(Protocol):
    def publish(self, topic: str, payload: bytes) -> Ack: ...


class SimClock:
    """Manually advanced clock; call it to read the time."""

    def __init__(self, start: float = 0.0):
        self.now = start

    def __call__(self) -> float:
        return self.now

    def advance_to(self, t: float) -> None:
        if t > self.now:
            self.now = t

    def sleep(self, seconds: float) -> None:
        self.now += seconds


@dataclass(frozen=True)
class EdgeConfig:
    edge_id: str
    package_period_seconds: int = 300
    source: Optional[str] = None
    broker_endpoint: Optional[str] = None

    def validate(self) -> None:
        if not self.edge_id or "/" in self.edge_id or self.edge_id.startswith("$"):
            raise ValueError(f"invalid edge_id {self.edge_id!r}")
        if not isinstance(self.package_period_seconds, int) or self.package_period_seconds < 1:
            raise ValueError("package_period_seconds must be an integer >= 1")


def eos_payload(edge_id: str, packages: int, records: int) -> bytes:
    return json.dumps(
        {"type": END_OF_STREAM, "edge_id": edge_id, "packages": packages, "records": records},
        separators=(",", ":"),
    ).encode()


def replay(records: Sequence[str]) -> list[tuple[int, str]]:
    """Pair each record with a simulated arrival time.

    Arrival time is the running maximum of the record timestamps seen so far,
    so a scrambled record arrives "now" rather than at its own timestamp.
    Records whose timestamp cannot be read arrive at the current clock;
    leading ones take the first readable timestamp.
    """
    ts_idx = FIELD_INDEX["timestamp"]
    clock: Optional[int] = None
    times: list[Optional[int]] = []
    for rec in records:
        try:
            fields = split_record(rec)
            ts = parse_timestamp(fields[ts_idx]) if len(fields) > ts_idx else None
        except (MalformedRecord, ValueError):
            ts = None
        if ts is not None and (clock is None or ts > clock):
            clock = ts
        times.append(clock)
    first = next((t for t in times if t is not None), 0)
    return [(first if t is None else t, rec) for t, rec in zip(times, records)]


class EdgeNode:
    """One edge node's sequential batching loop, driven by an external clock.

    ``offer`` and ``tick`` return the packages published during the call.
    Publishes that fail with a broker error stay in an outbox and are retried
    with exponential backoff (1 s doubling up to 30 s of clock time).
    """

    def __init__(self, cfg: EdgeConfig, client: Publisher):
        cfg.validate()
        self.cfg = cfg
        self.client = client
        self.period = cfg.package_period_seconds
        self._window: Optional[int] = None
        self._records: list[str] = []
        self._seq = 0
        self._outbox: deque[tuple[str, bytes, Optional[StreamPackage]]] = deque()
        self._next_retry: Optional[float] = None
        self._backoff = 1.0
        self.records_in = 0
        self.packages_published = 0
        self.records_published = 0
        self.retries = 0
        self.closed = False

    @property
    def topic(self) -> str:
        return packages_topic(self.cfg.edge_id)

    @property
    def drained(self) -> bool:
        return not self._outbox

    @property
    def next_retry(self) -> Optional[float]:
        return self._next_retry

    def offer(self, arrival: int, record: str) -> list[StreamPackage]:
        if self.closed:
            raise RuntimeError("edge node already closed")
        out = self._roll(arrival)
        if self._window is None:
            self._window = arrival - arrival % self.period
        self._records.append(record)
        self.records_in += 1
        out += self._flush(arrival)
        return out

    def tick(self, now: float) -> list[StreamPackage]:
        self._roll(now)
        return self._flush(now)

    def close(self, now: float) -> list[StreamPackage]:
        """Ship the last partial package, then the end-of-stream marker."""
        if not self.closed:
            self._roll(now)
            if self._window is not None and self._records:
                self._package(self._window + self.period)
            self._window = None
            self._outbox.append(
                (control_topic(self.cfg.edge_id), eos_payload(self.cfg.edge_id, self._seq, self.records_in), None)
            )
            self.closed = True
        return self._flush(now, force=True)

    def retry(self, now: float) -> list[StreamPackage]:
        return self._flush(now)

    def _roll(self, now: float) -> list[StreamPackage]:
        # Close every window that ended at or before `now`; windows stay contiguous.
        while self._window is not None and now >= self._window + self.period:
            end = self._window + self.period
            self._package(end)
            self._window = end
        return []

    def _package(self, end: int) -> None:
        assert self._window is not None
        self._seq += 1
        pkg = StreamPackage(self.cfg.edge_id, self._window, end, self._seq, tuple(self._records))
        self._records = []
        self._outbox.append((self.topic, pkg.to_bytes(), pkg))

    def _flush(self, now: float, force: bool = False) -> list[StreamPackage]:
        sent = []
        if not force and self._next_retry is not None and now < self._next_retry:
            return sent
        while self._outbox:
            topic, payload, pkg = self._outbox[0]
            try:
                self.client.publish(topic, payload)
            except BrokerError as exc:
                self.retries += 1
                self._next_retry = now + self._backoff
                log.debug("edge %s publish failed (%s); retry in %.0fs", self.cfg.edge_id, exc, self._backoff)
                self._backoff = min(self._backoff * 2, MAX_BACKOFF)
                break
            self._outbox.popleft()
            self._next_retry = None
            self._backoff = 1.0
            if pkg is not None:
                self.packages_published += 1
                self.records_published += len(pkg.records)
                sent.append(pkg)
        return sent


def run_edge(
    cfg: EdgeConfig,
    source: Iterable[tuple[int, str]],
    client: Publisher,
    *,
    sleep: Callable[[float], None] = time.sleep,
    clock: Optional[SimClock] = None,
) -> Iterator[StreamPackage]:
    """Drive an :class:`EdgeNode` over ``(arrival_time, record)`` pairs.

    Yields each package once it has been published.  After the source is
    exhausted the final partial package and the end-of-stream marker are
    sent, retrying (via ``sleep``) until the broker accepts them.
    """
    node = EdgeNode(cfg, client)
    now = 0.0
    for arrival, record in source:
        now = max(now, arrival)
        if clock is not None:
            clock.advance_to(now)
        yield from node.offer(arrival, record)
    yield from node.close(now)
    while not node.drained:
        wait = max((node.next_retry or now) - now, 0.0) or node._backoff
        sleep(wait)
        now += wait
        if clock is not None:
            clock.advance_to(now)
        yield from node.retry(now)
