import itertools
import threading

import pytest

from fogstream.broker import (
    Backpressure,
    Broker,
    BrokerUnavailable,
    ConnectionLost,
    Envelope,
    LocalClient,
    SeqDeduper,
    TopicInvalid,
    topic_matches,
)
from fogstream.edge import SimClock


def drain(client):
    out = []
    while (d := client.poll()) is not None:
        out.append(d)
        client.ack(d)
    return out


def test_acks_carry_consecutive_seqs():
    b = Broker()
    assert b.publish("p", "t", b"1").seq == 1
    assert b.publish("p", "t", b"2").seq == 2
    assert b.publish("q", "t", b"x").seq == 1
    with pytest.raises(TopicInvalid):
        b.publish("p", "", b"")
    with pytest.raises(TopicInvalid):
        b.publish("p", "$msg", b"")


def test_pattern_matching():
    assert topic_matches("packages/*", "packages/edge1")
    assert not topic_matches("packages/*", "control/edge1")
    assert not topic_matches("packages/*", "packages/")
    assert topic_matches("alarms", "alarms")


def test_retained_until_first_subscriber_or_ttl():
    clock = SimClock()
    b = Broker(clock=clock, retained_ttl=3600)
    b.publish("p", "t", b"early")
    assert b.retained == 1
    c = LocalClient(b, "c")
    c.subscribe("t")
    assert [d.envelope.payload for d in drain(c)] == [b"early"]
    b.publish("p", "u", b"stale")
    clock.advance_to(3600)
    assert b.retained == 0
    c.subscribe("u")
    assert drain(c) == []


def test_fifo_one_producer():
    b = Broker()
    c = LocalClient(b, "c")
    c.subscribe("t")
    for i in range(5):
        b.publish("p", "t", bytes([i]))
    assert [d.envelope.seq for d in drain(c)] == [1, 2, 3, 4, 5]


def test_every_interleaving_of_two_producers_keeps_each_order():
    for slots in itertools.combinations(range(6), 3):
        b = Broker()
        c = LocalClient(b, "c")
        c.subscribe("t")
        order = ["a" if i in slots else "b" for i in range(6)]
        for p in order:
            b.publish(p, "t", p.encode())
        got = drain(c)
        for p in "ab":
            assert [d.envelope.seq for d in got if d.producer == p] == [1, 2, 3]


def test_fifo_under_four_concurrent_producers():
    b = Broker(high_water_mark=64)
    c = LocalClient(b, "c")
    c.subscribe("t")
    n = 1000

    def produce(name):
        for i in range(n):
            b.publish(name, "t", str(i).encode())

    threads = [threading.Thread(target=produce, args=(f"p{k}",)) for k in range(4)]
    for t in threads:
        t.start()
    got = []
    while len(got) < 4 * n:
        d = c.get(5.0)
        assert d is not None
        got.append(d)
        c.ack(d)
    for t in threads:
        t.join()
    for k in range(4):
        mine = [d for d in got if d.producer == f"p{k}"]
        assert [d.envelope.seq for d in mine] == list(range(1, n + 1))
        assert [d.envelope.payload for d in mine] == [str(i).encode() for i in range(n)]


def test_disconnect_redelivers_unacked_and_dedup_filters():
    b = Broker()
    c = LocalClient(b, "c")
    c.subscribe("t")
    for i in range(3):
        b.publish("p", "t", bytes([i]))
    first = c.poll()
    c.ack(first)
    second = c.poll()
    assert second.envelope.seq == 2
    b.disconnect("c")
    with pytest.raises(ConnectionLost):
        c.poll()
    c.reconnect()
    again = drain(c)
    assert [d.envelope.seq for d in again] == [2, 3]
    dedup = SeqDeduper()
    seen = [d for d in [first, second, *again] if dedup.accept(d.producer, d.envelope)]
    assert [d.envelope.seq for d in seen] == [1, 2, 3] and dedup.repeats == 1


def test_resend_with_known_seq_is_not_enqueued_twice():
    b = Broker()
    c = LocalClient(b, "c")
    c.subscribe("t")
    b.publish("p", "t", b"x", seq=1)
    b.publish("p", "t", b"x", seq=1)
    assert len(drain(c)) == 1


def test_backpressure_blocks_then_times_out():
    b = Broker(high_water_mark=2)
    c = LocalClient(b, "c")
    c.subscribe("t")
    b.publish("p", "t", b"1")
    b.publish("p", "t", b"2")
    with pytest.raises(Backpressure):
        b.publish("p", "t", b"3", timeout=0.05)
    drain(c)
    assert b.publish("p", "t", b"3", timeout=0.05).seq == 3


def test_unavailable_broker_rejects_publish():
    b = Broker()
    b.set_available(False)
    with pytest.raises(BrokerUnavailable):
        b.publish("p", "t", b"")
    b.set_available(True)
    b.publish("p", "t", b"")


def test_seq_deduper_keys_by_producer_and_topic():
    d = SeqDeduper()
    assert d.accept("a", Envelope("t", 1))
    assert d.accept("b", Envelope("t", 1))
    assert d.accept("a", Envelope("u", 1))
    assert not d.accept("a", Envelope("t", 1))
