"""Broker over TCP using the envelope frame format.

Control traffic travels in ordinary frames on reserved ``$`` topics:

client to broker
    ``$hello``   payload = client id (first frame on a connection)
    ``$sub``     payload = topic pattern; answered by ``$suback`` with the same seq
    ``$ackd``    seq = highest delivery id the client has processed
    ``$bye``     orderly close
    any other topic is a publish; seq is the client's per-topic counter and
    the broker answers ``$ack`` (same seq, payload = topic) or ``$err``

broker to client
    ``$msg``     seq = delivery id; payload = u16 producer length, producer
                 id, then the original envelope as a complete frame

A client that reconnects with the same id resumes its session: deliveries it
had not acked are sent again and publishes it had not seen acked are resent
(the broker ignores seqs it already accepted).
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
import time
from collections import deque
from typing import Iterable, Optional

from fogstream.broker.core import (
    Ack,
    Broker,
    BrokerUnavailable,
    ConnectionLost,
    Delivery,
    check_pattern,
)
from fogstream.broker.frames import (
    DEFAULT_MAX_FRAME,
    BrokerError,
    Envelope,
    FrameDecoder,
    FrameError,
    TopicInvalid,
    decode_frame,
    encode_frame,
)

log = logging.getLogger(__name__)

_U16 = struct.Struct(">H")
MAX_INFLIGHT = 512
_RECV = 65536


def parse_address(text: str) -> tuple[str, int]:
    """``host:port``, optionally prefixed with ``tcp://``."""
    if text.startswith("tcp://"):
        text = text[len("tcp://"):]
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host, int(port)


def _pack_delivery(producer: str, env: Envelope) -> bytes:
    p = producer.encode()
    return _U16.pack(len(p)) + p + encode_frame(env)


def _unpack_delivery(payload: bytes) -> tuple[str, Envelope]:
    (n,) = _U16.unpack_from(payload, 0)
    producer = payload[2 : 2 + n].decode()
    got = decode_frame(payload[2 + n :])
    if got is None or got[1]:
        raise FrameError("malformed $msg payload")
    return producer, got[0]


class _Connection:
    def __init__(self, broker: Broker, sock: socket.socket, max_frame: int):
        self.broker = broker
        self.sock = sock
        self.max_frame = max_frame
        self.client_id: Optional[str] = None
        self._send_lock = threading.Lock()
        self._closed = threading.Event()

    def send(self, env: Envelope) -> None:
        data = encode_frame(env, max_frame=self.max_frame)
        with self._send_lock:
            self.sock.sendall(data)

    def run(self) -> None:
        decoder = FrameDecoder(self.max_frame)
        pump: Optional[threading.Thread] = None
        try:
            while not self._closed.is_set():
                data = self.sock.recv(_RECV)
                if not data:
                    break
                for env in decoder.feed(data):
                    if self.client_id is None:
                        if env.topic != "$hello":
                            raise FrameError("first frame must be $hello")
                        self.client_id = env.payload.decode()
                        self.broker.takeover(self.client_id, self)
                        pump = threading.Thread(target=self._pump, daemon=True)
                        pump.start()
                    elif not self._handle(env):
                        return
        except (OSError, FrameError) as exc:
            log.debug("connection %s ended: %s", self.client_id, exc)
        finally:
            self._closed.set()
            if self.client_id is not None:
                self.broker.release(self.client_id, self)
            try:
                self.sock.close()
            except OSError:
                pass

    def _handle(self, env: Envelope) -> bool:
        cid = self.client_id
        assert cid is not None
        if env.topic == "$ackd":
            self.broker.session(cid).ack(env.seq)
        elif env.topic == "$sub":
            try:
                self.broker.subscribe(cid, env.payload.decode())
                self.send(Envelope("$suback", env.seq))
            except TopicInvalid as exc:
                self.send(Envelope("$err", env.seq, str(exc).encode()))
        elif env.topic == "$bye":
            return False
        elif env.topic.startswith("$"):
            self.send(Envelope("$err", env.seq, f"unknown control topic {env.topic}".encode()))
        else:
            try:
                self.broker.publish(cid, env.topic, env.payload, seq=env.seq)
            except BrokerUnavailable:
                # No ack: the client keeps the message and resends it.
                return True
            except BrokerError as exc:
                self.send(Envelope("$err", env.seq, f"{env.topic}\n{exc}".encode()))
                return True
            self.send(Envelope("$ack", env.seq, env.topic.encode()))
        return True

    def _pump(self) -> None:
        cid = self.client_id
        assert cid is not None
        session = self.broker.session(cid)
        try:
            while not self._closed.is_set():
                d = session.get(0.2, owner=self, max_inflight=MAX_INFLIGHT)
                if d is None:
                    continue
                self.send(Envelope("$msg", d.delivery_id, _pack_delivery(d.producer, d.envelope)))
        except (ConnectionLost, OSError):
            pass
        finally:
            self._closed.set()
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass


class _Handler(socketserver.BaseRequestHandler):
    server: "_Server"

    def handle(self) -> None:
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        _Connection(self.server.broker, self.request, self.server.max_frame).run()


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    broker: Broker
    max_frame: int


class BrokerServer:
    """TCP listener in front of a :class:`Broker`."""

    def __init__(
        self,
        broker: Optional[Broker] = None,
        address: tuple[str, int] = ("127.0.0.1", 0),
        *,
        max_frame: int = DEFAULT_MAX_FRAME,
    ):
        self.broker = broker or Broker()
        self._server = _Server(address, _Handler)
        self._server.broker = self.broker
        self._server.max_frame = max_frame
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        host, port = self._server.server_address[:2]
        return host, port

    def start(self) -> "BrokerServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> "BrokerServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


class BrokerClient:
    """Reconnecting TCP client with the same surface as :class:`LocalClient`.

    ``publish`` blocks until the broker acks.  If the connection drops, the
    next call reconnects with exponential backoff (capped at ``max_backoff``
    seconds, giving up after ``connect_deadline``), resends unacked publishes
    and resubscribes.
    """

    def __init__(
        self,
        address: tuple[str, int],
        client_id: str,
        *,
        max_backoff: float = 30.0,
        connect_deadline: float = 60.0,
        ack_timeout: float = 30.0,
        max_frame: int = DEFAULT_MAX_FRAME,
    ):
        self.address = address
        self.client_id = client_id
        self.max_backoff = max_backoff
        self.connect_deadline = connect_deadline
        self.ack_timeout = ack_timeout
        self.max_frame = max_frame
        self._cond = threading.Condition()
        self._send_lock = threading.Lock()
        self._sock: Optional[socket.socket] = None
        self._gen = 0
        self._broken = True
        self._patterns: list[str] = []
        self._seq: dict[str, int] = {}
        self._unacked: dict[tuple[str, int], bytes] = {}
        self._errors: dict[tuple[str, int], str] = {}
        self._subacks: set[int] = set()
        self._ctl_seq = 0
        self._inbox: deque[Delivery] = deque()
        self.reconnects = -1
        self._connect()

    # -- connection management -------------------------------------------------

    def _connect(self) -> None:
        deadline = time.monotonic() + self.connect_deadline
        delay = 0.05
        while True:
            try:
                sock = socket.create_connection(self.address, timeout=5.0)
                break
            except OSError as exc:
                if time.monotonic() + delay > deadline:
                    raise BrokerUnavailable(f"cannot reach broker at {self.address}: {exc}") from exc
                time.sleep(delay)
                delay = min(delay * 2, self.max_backoff)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        with self._cond:
            self._sock = sock
            self._gen += 1
            gen = self._gen
            self._broken = False
            self._inbox.clear()
            self.reconnects += 1
        threading.Thread(target=self._reader, args=(sock, gen), daemon=True).start()
        self._raw_send(Envelope("$hello", 0, self.client_id.encode()))
        for p in self._patterns:
            self._send_sub(p)
        with self._cond:
            resend = sorted(self._unacked.items(), key=lambda kv: (kv[0][1], kv[0][0]))
        for (topic, seq), payload in resend:
            self._raw_send(Envelope(topic, seq, payload))

    def _ensure(self) -> None:
        if self._broken:
            self._drop()
            self._connect()

    def _drop(self) -> None:
        with self._cond:
            sock, self._sock = self._sock, None
            self._broken = True
            self._cond.notify_all()
        if sock is not None:
            try:
                sock.close()
            except OSError:
                pass

    def force_disconnect(self) -> None:
        """Cut the connection abruptly (for fault-injection tests)."""
        with self._cond:
            sock = self._sock
        if sock is not None:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass

    def _raw_send(self, env: Envelope) -> None:
        data = encode_frame(env, max_frame=self.max_frame)
        sock = self._sock
        if sock is None:
            raise ConnectionLost("not connected")
        try:
            with self._send_lock:
                sock.sendall(data)
        except OSError as exc:
            with self._cond:
                self._broken = True
                self._cond.notify_all()
            raise ConnectionLost(str(exc)) from exc

    def _reader(self, sock: socket.socket, gen: int) -> None:
        decoder = FrameDecoder(self.max_frame)
        try:
            while True:
                data = sock.recv(_RECV)
                if not data:
                    break
                for env in decoder.feed(data):
                    self._dispatch(env, gen)
        except (OSError, FrameError):
            pass
        with self._cond:
            if self._gen == gen:
                self._broken = True
            self._cond.notify_all()

    def _dispatch(self, env: Envelope, gen: int) -> None:
        with self._cond:
            if gen != self._gen:
                return
            if env.topic == "$msg":
                producer, inner = _unpack_delivery(env.payload)
                self._inbox.append(Delivery(env.seq, producer, inner))
            elif env.topic == "$ack":
                self._unacked.pop((env.payload.decode(), env.seq), None)
            elif env.topic == "$suback":
                self._subacks.add(env.seq)
            elif env.topic == "$err":
                topic, _, msg = env.payload.decode().partition("\n")
                self._errors[(topic, env.seq)] = msg
                self._unacked.pop((topic, env.seq), None)
            self._cond.notify_all()

    # -- public surface ----------------------------------------------------------

    def publish(self, topic: str, payload: bytes) -> Ack:
        if not topic or topic.startswith("$"):
            raise TopicInvalid(f"invalid topic {topic!r}")
        with self._cond:
            seq = self._seq.get(topic, 0) + 1
            self._seq[topic] = seq
            self._unacked[(topic, seq)] = payload
        k = (topic, seq)
        deadline = time.monotonic() + self.ack_timeout
        sent_gen = -1
        while True:
            self._ensure()
            with self._cond:
                gen = self._gen
            if sent_gen != gen:
                sent_gen = gen
                try:
                    # A fresh connection already resent everything unacked.
                    if k in self._unacked and gen == self._gen:
                        self._raw_send(Envelope(topic, seq, payload))
                except ConnectionLost:
                    continue
            with self._cond:
                while k in self._unacked and not self._broken:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise BrokerUnavailable(f"no ack for {topic}#{seq} within {self.ack_timeout}s")
                    self._cond.wait(min(remaining, 0.5))
                if k not in self._unacked:
                    err = self._errors.pop(k, None)
                    if err is not None:
                        raise TopicInvalid(err)
                    return Ack(topic, seq)

    def _send_sub(self, pattern: str) -> int:
        with self._cond:
            self._ctl_seq += 1
            n = self._ctl_seq
        self._raw_send(Envelope("$sub", n, pattern.encode()))
        return n

    def subscribe(self, patterns: Iterable[str] | str) -> None:
        if isinstance(patterns, str):
            patterns = [patterns]
        for p in patterns:
            check_pattern(p)
            if p in self._patterns:
                continue
            self._patterns.append(p)
            while True:
                self._ensure()
                try:
                    n = self._send_sub(p)
                except ConnectionLost:
                    continue
                with self._cond:
                    deadline = time.monotonic() + self.ack_timeout
                    while n not in self._subacks and not self._broken:
                        if time.monotonic() > deadline:
                            raise BrokerUnavailable("no $suback")
                        self._cond.wait(0.5)
                    if n in self._subacks:
                        break

    def get(self, timeout: Optional[float] = None) -> Optional[Delivery]:
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            self._ensure()
            with self._cond:
                while not self._inbox and not self._broken:
                    remaining = None if deadline is None else deadline - time.monotonic()
                    if remaining is not None and remaining <= 0:
                        return None
                    self._cond.wait(remaining if remaining is not None else 0.5)
                if self._inbox:
                    return self._inbox.popleft()

    def poll(self) -> Optional[Delivery]:
        return self.get(0)

    def ack(self, delivery: Delivery) -> None:
        try:
            self._raw_send(Envelope("$ackd", delivery.delivery_id))
        except ConnectionLost:
            pass  # redelivered after reconnect

    def close(self) -> None:
        try:
            self._raw_send(Envelope("$bye", 0))
        except (ConnectionLost, BrokerError):
            pass
        self._drop()
