import json

import pytest
from hypothesis import given, settings, strategies as st

from fogstream.broker import Broker, BrokerUnavailable, LocalClient
from fogstream.broker.core import Ack
from fogstream.edge import END_OF_STREAM, EdgeConfig, EdgeNode, SimClock, replay, run_edge
from fogstream.feedgen import generate_clean_feed
from fogstream.model import StreamPackage, serialize_record
from helpers import small_schedule


class Recorder:
    """Publisher that keeps everything and can be told to fail."""

    def __init__(self):
        self.sent = []
        self.down = False
        self.attempts = []

    def publish(self, topic, payload):
        self.attempts.append(topic)
        if self.down:
            raise BrokerUnavailable("down")
        self.sent.append((topic, payload))
        return Ack(topic, len(self.sent))

    def packages(self):
        return [StreamPackage.from_bytes(p) for t, p in self.sent if t.startswith("packages/")]

    def controls(self):
        return [json.loads(p) for t, p in self.sent if t.startswith("control/")]


def test_config_validation():
    with pytest.raises(ValueError):
        EdgeConfig("e", 0).validate()
    with pytest.raises(ValueError):
        EdgeConfig("a/b").validate()
    EdgeConfig("e", 1).validate()


def test_hundred_tuples_over_two_periods():
    src = [(i * 6, f"rec{i}") for i in range(100)]  # arrivals 0..594 s
    rec = Recorder()
    pkgs = list(run_edge(EdgeConfig("e1", 300), src, rec))
    assert len(pkgs) == 2
    assert sum(len(p.records) for p in pkgs) == 100
    assert [(p.window_start, p.window_end) for p in pkgs] == [(0, 300), (300, 600)]
    assert rec.controls() == [{"type": END_OF_STREAM, "edge_id": "e1", "packages": 2, "records": 100}]


def test_empty_source_sends_only_end_of_stream():
    rec = Recorder()
    assert list(run_edge(EdgeConfig("e1"), [], rec)) == []
    assert rec.packages() == []
    assert [c["packages"] for c in rec.controls()] == [0]


def test_late_record_rides_in_arrival_window():
    feed, _ = generate_clean_feed(small_schedule({"1": 1}))
    lines = [serialize_record(t) for t in feed[:120]]  # 600 s of one trip
    # Move the record stamped in the first window to arrive during the second.
    late = lines.pop(10)
    lines.insert(70, late)
    rec = Recorder()
    pkgs = list(run_edge(EdgeConfig("e1", 300), replay(lines), rec))
    holder = [p for p in pkgs if late in p.records]
    assert len(holder) == 1 and holder[0].seq == 2


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.integers(0, 5000), max_size=200),
    st.integers(1, 900),
)
def test_conservation_seq_and_contiguity(gaps, period):
    t, src = 0, []
    for i, g in enumerate(gaps):
        t += g % 97
        src.append((t, f"r{i},{g}"))
    rec = Recorder()
    pkgs = list(run_edge(EdgeConfig("e", period), src, rec))
    assert [r for p in pkgs for r in p.records] == [r for _, r in src]  # verbatim, in order
    assert [p.seq for p in pkgs] == list(range(1, len(pkgs) + 1))
    for a, b in zip(pkgs, pkgs[1:]):
        assert a.window_end == b.window_start
    assert all(p.window_start % period == 0 and p.window_end - p.window_start == period for p in pkgs)


def test_retry_with_capped_exponential_backoff():
    rec = Recorder()
    node = EdgeNode(EdgeConfig("e", 10), rec)
    node.offer(0, "a")
    rec.down = True
    node.offer(10, "b")  # closes window [0, 10)
    waits = []
    now = 10.0
    for _ in range(8):
        waits.append(node.next_retry - now)
        now = node.next_retry
        node.retry(now)
    assert waits == [1, 2, 4, 8, 16, 30, 30, 30]
    rec.down = False
    assert node.retry(now) == []  # still inside the last backoff
    assert len(node.retry(node.next_retry)) == 1
    node.close(20)
    assert node.drained and [len(p.records) for p in rec.packages()] == [1, 1]


def test_run_edge_against_in_process_broker_with_outage():
    clock = SimClock()
    broker = Broker(clock=clock)
    sink = LocalClient(broker, "fog")
    sink.subscribe(["packages/*", "control/*"])
    broker.set_available(False)
    slept = []

    def sleep(s):
        slept.append(s)
        if len(slept) == 3:
            broker.set_available(True)

    pkgs = list(run_edge(EdgeConfig("e", 60), [(0, "x"), (5, "y")], LocalClient(broker, "e"), sleep=sleep, clock=clock))
    assert [p.records for p in pkgs] == [("x", "y")]
    assert slept[:3] == [1.0, 2.0, 4.0]
