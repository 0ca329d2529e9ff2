"""In-process topic broker.

Every consumer owns one session holding its subscription patterns and a
single delivery queue.  A delivery stays in flight until the consumer acks
it; if the consumer disconnects first, in-flight deliveries return to the
head of its queue and are delivered again (at-least-once).  Consumers drop
the repeats with :class:`SeqDeduper`.
"""

from __future__ import annotations

import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Optional

from fogstream.broker.frames import BrokerError, Envelope, TopicInvalid, check_topic

Clock = Callable[[], float]

DEFAULT_RETAINED_TTL = 3600.0


class ConnectionLost(BrokerError):
    pass


class BrokerUnavailable(BrokerError):
    pass


class Backpressure(BrokerError):
    """Publish timed out waiting for a subscriber queue to drain."""


class Ack(NamedTuple):
    topic: str
    seq: int


class Delivery(NamedTuple):
    delivery_id: int
    producer: str
    envelope: Envelope


def check_pattern(pattern: str) -> None:
    if not isinstance(pattern, str) or not pattern:
        raise TopicInvalid("pattern must be a non-empty string")
    star = pattern.find("*")
    if star != -1 and (star != len(pattern) - 1 or not pattern.endswith("/*") or len(pattern) < 3):
        raise TopicInvalid(f"pattern {pattern!r}: only a trailing '/*' wildcard is allowed")


def topic_matches(pattern: str, topic: str) -> bool:
    """Exact match, or ``prefix/*`` matching any topic below ``prefix/``."""
    if pattern.endswith("/*"):
        prefix = pattern[:-1]
        return topic.startswith(prefix) and len(topic) > len(prefix)
    return pattern == topic


class SeqDeduper:
    """Consumer-side filter for redelivered messages.

    Relies on per-producer, per-topic FIFO: anything at or below the highest
    seq already accepted from that ``(producer, topic)`` is a repeat.
    """

    def __init__(self) -> None:
        self._high: dict[tuple[str, str], int] = {}
        self.repeats = 0

    def accept(self, producer: str, envelope: Envelope) -> bool:
        k = (producer, envelope.topic)
        if envelope.seq <= self._high.get(k, -1):
            self.repeats += 1
            return False
        self._high[k] = envelope.seq
        return True


@dataclass
class _Retained:
    producer: str
    envelope: Envelope
    at: float


class Session:
    """A consumer's view of the broker.  Use from one thread at a time."""

    def __init__(self, broker: "Broker", consumer: str):
        self._broker = broker
        self.consumer = consumer
        self.patterns: list[str] = []
        self._queue: deque[tuple[str, Envelope]] = deque()
        self._inflight: deque[Delivery] = deque()
        self._next_delivery = 1
        self.connected = True
        self.owner: object = None

    def matches(self, topic: str) -> bool:
        return any(topic_matches(p, topic) for p in self.patterns)

    @property
    def pending(self) -> int:
        return len(self._queue)

    @property
    def inflight(self) -> int:
        return len(self._inflight)

    def poll(self) -> Optional[Delivery]:
        """Next delivery, or None if the queue is empty.  Never blocks."""
        with self._broker._cond:
            return self._take()

    def get(
        self,
        timeout: Optional[float] = None,
        *,
        owner: object = None,
        max_inflight: Optional[int] = None,
    ) -> Optional[Delivery]:
        """Next delivery, waiting up to ``timeout`` seconds (forever if None).

        ``owner`` lets a transport connection detect that a newer connection
        has taken over the session; ``max_inflight`` holds back deliveries
        while that many are unacknowledged.
        """
        cond = self._broker._cond
        deadline = None if timeout is None else time.monotonic() + timeout
        with cond:
            while True:
                if owner is not None and self.owner is not owner:
                    raise ConnectionLost(f"session {self.consumer!r} was taken over")
                d = None
                if max_inflight is None or len(self._inflight) < max_inflight:
                    d = self._take()
                if d is not None:
                    return d
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return None
                cond.wait(remaining)

    def _take(self) -> Optional[Delivery]:
        if not self.connected:
            raise ConnectionLost(f"session {self.consumer!r} is disconnected")
        if not self._queue:
            return None
        producer, env = self._queue.popleft()
        d = Delivery(self._next_delivery, producer, env)
        self._next_delivery += 1
        self._inflight.append(d)
        self._broker._cond.notify_all()
        return d

    def ack(self, upto: Optional[int] = None) -> None:
        """Acknowledge in-flight deliveries up to ``upto`` (all of them if None)."""
        with self._broker._cond:
            while self._inflight and (upto is None or self._inflight[0].delivery_id <= upto):
                self._inflight.popleft()

    def _requeue_inflight(self) -> None:
        while self._inflight:
            d = self._inflight.pop()
            self._queue.appendleft((d.producer, d.envelope))


class Broker:
    """Thread-safe topic broker with per-producer FIFO delivery.

    Messages that match no session are retained (up to ``retained_ttl``
    seconds of ``clock`` time) and handed to the first session that
    subscribes to a matching pattern.  With ``high_water_mark`` set, publish
    blocks while any target session has that many queued messages.
    """

    def __init__(
        self,
        *,
        clock: Clock = time.monotonic,
        retained_ttl: float = DEFAULT_RETAINED_TTL,
        high_water_mark: Optional[int] = None,
    ):
        self.clock = clock
        self.retained_ttl = retained_ttl
        self.high_water_mark = high_water_mark
        self._cond = threading.Condition()
        self._sessions: dict[str, Session] = {}
        self._retained: deque[_Retained] = deque()
        self._last_seq: dict[tuple[str, str], int] = {}
        self.available = True
        self.published = 0

    # -- producers -------------------------------------------------------------

    def publish(
        self,
        producer: str,
        topic: str,
        payload: bytes,
        *,
        seq: Optional[int] = None,
        timeout: Optional[float] = None,
    ) -> Ack:
        """Enqueue ``payload`` for every session subscribed to ``topic``.

        The broker assigns the next per-(producer, topic) seq unless ``seq``
        is given.  A given seq at or below the last accepted one is treated
        as a resend: it is acknowledged but not enqueued again.
        """
        if topic.startswith("$"):
            raise TopicInvalid("topics starting with '$' are reserved for the wire protocol")
        check_topic(topic)
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            if not self.available:
                raise BrokerUnavailable("broker is not accepting publishes")
            k = (producer, topic)
            last = self._last_seq.get(k, 0)
            if seq is not None and seq <= last:
                return Ack(topic, seq)
            self._wait_for_room(topic, deadline)
            # seq is assigned after any wait so concurrent publishes stay ordered.
            last = self._last_seq.get(k, 0)
            if seq is None:
                seq = last + 1
            elif seq <= last:
                return Ack(topic, seq)
            self._last_seq[k] = seq
            env = Envelope(topic, seq, payload)
            targets = [s for s in self._sessions.values() if s.matches(topic)]
            self._expire_retained()
            if targets:
                for s in targets:
                    s._queue.append((producer, env))
            else:
                self._retained.append(_Retained(producer, env, self.clock()))
            self.published += 1
            self._cond.notify_all()
            return Ack(topic, seq)

    def _wait_for_room(self, topic: str, deadline: Optional[float]) -> None:
        hwm = self.high_water_mark
        if hwm is None:
            return
        while any(len(s._queue) >= hwm for s in self._sessions.values() if s.matches(topic)):
            remaining = None if deadline is None else deadline - time.monotonic()
            if remaining is not None and remaining <= 0:
                raise Backpressure(f"subscriber queue at high-water mark {hwm}")
            self._cond.wait(remaining)

    # -- consumers -------------------------------------------------------------

    def subscribe(self, consumer: str, pattern: str) -> Session:
        check_pattern(pattern)
        with self._cond:
            s = self._sessions.get(consumer)
            if s is None:
                s = self._sessions[consumer] = Session(self, consumer)
            if not s.connected:
                self._reconnect(s)
            if pattern not in s.patterns:
                s.patterns.append(pattern)
                self._hand_over_retained(s)
            self._cond.notify_all()
            return s

    def session(self, consumer: str) -> Session:
        with self._cond:
            s = self._sessions.get(consumer)
            if s is None:
                s = self._sessions[consumer] = Session(self, consumer)
            return s

    def reconnect(self, consumer: str) -> Session:
        with self._cond:
            s = self._sessions.get(consumer)
            if s is None:
                raise KeyError(consumer)
            self._reconnect(s)
            return s

    def _reconnect(self, s: Session) -> None:
        s._requeue_inflight()
        s.connected = True
        self._cond.notify_all()

    def disconnect(self, consumer: str) -> None:
        """Drop a consumer's connection; unacked deliveries will be redelivered."""
        with self._cond:
            s = self._sessions.get(consumer)
            if s is not None:
                s.connected = False
                s._requeue_inflight()
                self._cond.notify_all()

    def takeover(self, consumer: str, owner: object) -> Session:
        """Attach a transport connection to ``consumer``'s session.

        Any earlier connection loses the session; its unacked deliveries are
        queued again.
        """
        with self._cond:
            s = self._sessions.get(consumer)
            if s is None:
                s = self._sessions[consumer] = Session(self, consumer)
            s._requeue_inflight()
            s.connected = True
            s.owner = owner
            self._cond.notify_all()
            return s

    def release(self, consumer: str, owner: object) -> None:
        """Detach ``owner`` if it still holds the session (a dead connection)."""
        with self._cond:
            s = self._sessions.get(consumer)
            if s is not None and s.owner is owner:
                s.connected = False
                s.owner = None
                s._requeue_inflight()
                self._cond.notify_all()

    def close_session(self, consumer: str) -> None:
        with self._cond:
            self._sessions.pop(consumer, None)
            self._cond.notify_all()

    # -- retention -------------------------------------------------------------

    def _expire_retained(self) -> None:
        cutoff = self.clock() - self.retained_ttl
        r = self._retained
        while r and r[0].at <= cutoff:
            r.popleft()

    def _hand_over_retained(self, s: Session) -> None:
        self._expire_retained()
        keep: deque[_Retained] = deque()
        for item in self._retained:
            if s.matches(item.envelope.topic):
                s._queue.append((item.producer, item.envelope))
            else:
                keep.append(item)
        self._retained = keep

    @property
    def retained(self) -> int:
        with self._cond:
            self._expire_retained()
            return len(self._retained)

    def set_available(self, flag: bool) -> None:
        with self._cond:
            self.available = flag


class LocalClient:
    """Binds a client id to an in-process broker.

    Exposes the same calls as the TCP client so nodes can run against
    either transport.
    """

    def __init__(self, broker: Broker, client_id: str):
        self.broker = broker
        self.client_id = client_id
        self._session: Optional[Session] = None

    def publish(self, topic: str, payload: bytes) -> Ack:
        return self.broker.publish(self.client_id, topic, payload)

    def subscribe(self, patterns: Iterable[str] | str) -> None:
        if isinstance(patterns, str):
            patterns = [patterns]
        for p in patterns:
            self._session = self.broker.subscribe(self.client_id, p)

    def _sess(self) -> Session:
        if self._session is None:
            self._session = self.broker.session(self.client_id)
        return self._session

    def poll(self) -> Optional[Delivery]:
        return self._sess().poll()

    def get(self, timeout: Optional[float] = None) -> Optional[Delivery]:
        return self._sess().get(timeout)

    def ack(self, delivery: Delivery) -> None:
        self._sess().ack(delivery.delivery_id)

    def reconnect(self) -> None:
        self._session = self.broker.reconnect(self.client_id)

    def close(self) -> None:
        pass
