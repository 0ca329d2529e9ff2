import socket
import threading

import pytest

from fogstream.broker import Envelope, FrameDecoder, SeqDeduper, TopicInvalid, encode_frame
from fogstream.broker.tcp import BrokerClient, BrokerServer, parse_address


@pytest.fixture
def server():
    with BrokerServer() as s:
        yield s


def collect(client, n, timeout=10.0):
    out = []
    while len(out) < n:
        d = client.get(timeout)
        assert d is not None, f"only {len(out)} of {n} deliveries arrived"
        out.append(d)
        client.ack(d)
    return out


def test_parse_address():
    assert parse_address("127.0.0.1:7878") == ("127.0.0.1", 7878)
    assert parse_address("tcp://localhost:0") == ("localhost", 0)
    with pytest.raises(ValueError):
        parse_address("nohost")


def test_publish_subscribe_over_loopback(server):
    sub = BrokerClient(server.address, "sub")
    sub.subscribe(["packages/*"])
    pub = BrokerClient(server.address, "edge-1")
    acks = [pub.publish("packages/edge-1", bytes([i])) for i in range(20)]
    assert [a.seq for a in acks] == list(range(1, 21))
    got = collect(sub, 20)
    assert [(d.producer, d.envelope.seq, d.envelope.payload) for d in got] == [
        ("edge-1", i + 1, bytes([i])) for i in range(20)
    ]
    with pytest.raises(TopicInvalid):
        pub.publish("$msg", b"")
    pub.close()
    sub.close()


def test_wire_bytes_follow_frame_layout(server):
    # Talk to the broker with a bare socket and hand-built frames.
    s = socket.create_connection(server.address)
    s.sendall(encode_frame(Envelope("$hello", 0, b"raw")))
    s.sendall(bytes.fromhex("0000000C" "0001" "74" "0000000000000001" "41"))
    dec = FrameDecoder()
    got = []
    while not got:
        got = dec.feed(s.recv(4096))
    assert got[0] == Envelope("$ack", 1, b"t")
    s.close()


def test_forced_disconnect_is_at_least_once_and_dedup_is_exact(server):
    sub = BrokerClient(server.address, "sub")
    sub.subscribe("t")
    pub = BrokerClient(server.address, "p")
    n = 300
    errors = []

    def produce():
        try:
            for i in range(n):
                pub.publish("t", str(i).encode())
                if i == n // 2:
                    pub.force_disconnect()
        except Exception as exc:  # pragma: no cover - surfaced below
            errors.append(exc)

    t = threading.Thread(target=produce)
    t.start()
    dedup = SeqDeduper()
    kept = []
    while len(kept) < n:
        d = sub.get(10.0)
        assert d is not None
        if len(kept) == n // 3 and sub.reconnects == 0:
            sub.force_disconnect()  # unacked deliveries will come again
            continue
        if dedup.accept(d.producer, d.envelope):
            kept.append(d.envelope.payload)
        sub.ack(d)
    t.join()
    assert not errors
    assert kept == [str(i).encode() for i in range(n)]
    assert pub.reconnects >= 1 and sub.reconnects >= 1
    pub.close()
    sub.close()
