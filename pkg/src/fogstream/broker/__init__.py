"""Topic publish/subscribe broker: in-process core, wire frames, TCP transport."""

from fogstream.broker.core import (
    Ack,
    Backpressure,
    Broker,
    BrokerUnavailable,
    ConnectionLost,
    Delivery,
    LocalClient,
    SeqDeduper,
    Session,
    check_pattern,
    topic_matches,
)
from fogstream.broker.frames import (
    BATCH_MAGIC,
    DEFAULT_MAX_FRAME,
    BadTopicLength,
    BrokerError,
    Envelope,
    FrameDecoder,
    FrameError,
    FrameTooLarge,
    MixedTopics,
    TopicInvalid,
    TruncatedFrame,
    aggregate,
    decode_frame,
    decompose,
    encode_frame,
)

# Topic conventions between tiers.
PACKAGES = "packages"
CONTROL = "control"
CLOUD_UPLOAD = "cloud/upload"
ALARMS = "alarms"


def packages_topic(edge_id: str) -> str:
    return f"{PACKAGES}/{edge_id}"


def control_topic(edge_id: str) -> str:
    return f"{CONTROL}/{edge_id}"


__all__ = [
    "ALARMS",
    "Ack",
    "BATCH_MAGIC",
    "Backpressure",
    "BadTopicLength",
    "Broker",
    "BrokerError",
    "BrokerUnavailable",
    "CLOUD_UPLOAD",
    "CONTROL",
    "ConnectionLost",
    "DEFAULT_MAX_FRAME",
    "Delivery",
    "Envelope",
    "FrameDecoder",
    "FrameError",
    "FrameTooLarge",
    "LocalClient",
    "MixedTopics",
    "PACKAGES",
    "SeqDeduper",
    "Session",
    "TopicInvalid",
    "TruncatedFrame",
    "aggregate",
    "check_pattern",
    "control_topic",
    "decode_frame",
    "decompose",
    "encode_frame",
    "packages_topic",
    "topic_matches",
]
