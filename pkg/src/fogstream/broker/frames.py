"""Envelope wire format and message aggregation.

Frame layout (all integers big-endian)::

    u32 N | u16 topic_len | topic (UTF-8) | u64 seq | payload

``N`` counts every byte after itself, so a frame is ``4 + N`` bytes long.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Optional

DEFAULT_MAX_FRAME = 16 * 1024 * 1024
MAX_TOPIC_BYTES = 0xFFFF
MAX_SEQ = 2**64 - 1

_LEN = struct.Struct(">I")
_TOPIC_LEN = struct.Struct(">H")
_SEQ = struct.Struct(">Q")
_MIN_BODY = _TOPIC_LEN.size + _SEQ.size

# Marks an aggregated envelope; the rest of the payload is a run of frames.
BATCH_MAGIC = b"\x00\xffFOGBATCH\x01"


class BrokerError(Exception):
    pass


class TopicInvalid(BrokerError):
    pass


class FrameError(BrokerError):
    pass


class FrameTooLarge(FrameError):
    pass


class BadTopicLength(FrameError):
    pass


class TruncatedFrame(FrameError):
    pass


class MixedTopics(BrokerError):
    pass


def check_topic(topic: str) -> bytes:
    if not isinstance(topic, str) or not topic:
        raise TopicInvalid("topic must be a non-empty string")
    raw = topic.encode("utf-8")
    if len(raw) > MAX_TOPIC_BYTES:
        raise TopicInvalid(f"topic is {len(raw)} bytes, limit {MAX_TOPIC_BYTES}")
    return raw


@dataclass(frozen=True)
class Envelope:
    topic: str
    seq: int
    payload: bytes = b""

    def __post_init__(self) -> None:
        check_topic(self.topic)
        if not 0 <= self.seq <= MAX_SEQ:
            raise ValueError("seq must fit in an unsigned 64-bit integer")
        if not isinstance(self.payload, bytes):
            object.__setattr__(self, "payload", bytes(self.payload))

    @property
    def frame_size(self) -> int:
        return 4 + _MIN_BODY + len(self.topic.encode("utf-8")) + len(self.payload)


def encode_frame(e: Envelope, *, max_frame: int = DEFAULT_MAX_FRAME) -> bytes:
    topic = e.topic.encode("utf-8")
    n = _MIN_BODY + len(topic) + len(e.payload)
    if n > max_frame:
        raise FrameTooLarge(f"frame body of {n} bytes exceeds cap {max_frame}")
    return b"".join((_LEN.pack(n), _TOPIC_LEN.pack(len(topic)), topic, _SEQ.pack(e.seq), e.payload))


def decode_frame(
    buf: bytes, *, max_frame: int = DEFAULT_MAX_FRAME
) -> Optional[tuple[Envelope, bytes]]:
    """Decode the first frame in ``buf``.

    Returns ``(envelope, remainder)``, or ``None`` when ``buf`` does not yet
    hold a whole frame.  Nothing is consumed in the ``None`` case.
    """
    got = _decode_at(memoryview(buf), 0, max_frame)
    if got is None:
        return None
    env, end = got
    return env, bytes(buf[end:])


def _decode_at(view: memoryview, pos: int, max_frame: int) -> Optional[tuple[Envelope, int]]:
    if len(view) - pos < _LEN.size:
        return None
    (n,) = _LEN.unpack_from(view, pos)
    if n > max_frame:
        raise FrameTooLarge(f"declared frame body of {n} bytes exceeds cap {max_frame}")
    if n < _MIN_BODY:
        raise TruncatedFrame(f"declared frame body of {n} bytes is shorter than the fixed header")
    end = pos + _LEN.size + n
    if len(view) < end:
        return None
    (tlen,) = _TOPIC_LEN.unpack_from(view, pos + 4)
    if tlen == 0 or tlen > n - _MIN_BODY:
        raise BadTopicLength(f"topic length {tlen} does not fit a {n}-byte frame body")
    t0 = pos + 6
    try:
        topic = str(view[t0 : t0 + tlen], "utf-8")
    except UnicodeDecodeError as exc:
        raise FrameError(f"topic is not valid UTF-8: {exc}") from None
    (seq,) = _SEQ.unpack_from(view, t0 + tlen)
    payload = bytes(view[t0 + tlen + _SEQ.size : end])
    return Envelope(topic, seq, payload), end


class FrameDecoder:
    """Incremental decoder for a byte stream of frames."""

    def __init__(self, max_frame: int = DEFAULT_MAX_FRAME):
        self.max_frame = max_frame
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Envelope]:
        self._buf += data
        out = []
        view = memoryview(self._buf)
        pos = 0
        try:
            while True:
                got = _decode_at(view, pos, self.max_frame)
                if got is None:
                    break
                env, pos = got
                out.append(env)
        finally:
            view.release()
        del self._buf[:pos]
        return out

    @property
    def buffered(self) -> int:
        return len(self._buf)

    def close(self) -> None:
        """Call at end of stream; leftover bytes mean the last frame was cut short."""
        if self._buf:
            n = len(self._buf)
            self._buf.clear()
            raise TruncatedFrame(f"stream ended inside a frame ({n} bytes pending)")


def _batch_size(topic_bytes: int, inner: int) -> int:
    return 4 + _MIN_BODY + topic_bytes + len(BATCH_MAGIC) + inner


def aggregate(messages: Iterable[Envelope], max_bytes: int) -> list[Envelope]:
    """Pack consecutive envelopes into batch envelopes of at most ``max_bytes`` (framed).

    Order is preserved.  A message that cannot share a batch within the limit
    is passed through unwrapped, as is a lone message.  The exception is a
    payload that starts with the batch marker: it is always wrapped, even past
    ``max_bytes``, so :func:`decompose` cannot misread it.  A batch takes the seq of its first
    message.
    """
    messages = list(messages)
    if not messages:
        return []
    topic = messages[0].topic
    if any(m.topic != topic for m in messages):
        raise MixedTopics("aggregate() needs messages that share one topic")
    tbytes = len(topic.encode("utf-8"))

    out: list[Envelope] = []
    group: list[Envelope] = []
    frames: list[bytes] = []
    size = 0

    def flush() -> None:
        nonlocal size
        if not group:
            return
        if len(group) == 1 and not group[0].payload.startswith(BATCH_MAGIC):
            out.append(group[0])
        else:
            out.append(Envelope(topic, group[0].seq, BATCH_MAGIC + b"".join(frames)))
        group.clear()
        frames.clear()
        size = 0

    for m in messages:
        f = encode_frame(m, max_frame=2**32 - 1)
        if _batch_size(tbytes, size + len(f)) > max_bytes:
            flush()
            if _batch_size(tbytes, len(f)) > max_bytes:
                # Oversized: alone, unwrapped, unless it needs the disguise.
                if m.payload.startswith(BATCH_MAGIC):
                    out.append(Envelope(topic, m.seq, BATCH_MAGIC + f))
                else:
                    out.append(m)
                continue
        group.append(m)
        frames.append(f)
        size += len(f)
    flush()
    return out


def decompose(e: Envelope) -> list[Envelope]:
    """Inverse of :func:`aggregate` for one output envelope."""
    if not e.payload.startswith(BATCH_MAGIC):
        return [e]
    view = memoryview(e.payload)
    pos = len(BATCH_MAGIC)
    out = []
    try:
        while pos < len(view):
            got = _decode_at(view, pos, 2**32 - 1)
            if got is None:
                raise TruncatedFrame("batch payload ends inside a frame")
            inner, pos = got
            if inner.topic != e.topic:
                raise MixedTopics("batch holds a message for another topic")
            out.append(inner)
    finally:
        view.release()
    return out
