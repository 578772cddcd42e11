"""Wire protocol of the exchange bus: envelopes, line framing, topic matching, routing.

Every frame travels as one UTF-8 JSON line. The flat object uses the fixed key
set ``v, kind, topic, pattern, sender, ts_ms, headers, payload``; optional
fields that are absent are omitted from the line rather than written as null.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable

from .errors import PlugsimError

PROTOCOL_VERSION = 1
MAX_FRAME_BYTES = 1 << 20

_TOPIC_RE = re.compile(r"[A-Za-z0-9_.\-]+(?:/[A-Za-z0-9_.\-]+)*")


class ProtocolError(PlugsimError):
    """Base class for frame-level failures."""


class InvalidEnvelope(ProtocolError):
    """Envelope contents violate an invariant (bad topic, missing field...)."""


class MalformedFrame(ProtocolError):
    """The byte sequence is not a parseable frame."""


class UnsupportedVersion(ProtocolError):
    """The frame declares a protocol version other than 1."""


class InvalidTopic(InvalidEnvelope):
    """A topic or pattern string violates the topic grammar."""


def error_label(exc: ProtocolError) -> str:
    """Canonical wire name for a frame-level failure (three-value taxonomy)."""
    if isinstance(exc, UnsupportedVersion):
        return "UnsupportedVersion"
    if isinstance(exc, InvalidEnvelope):
        return "InvalidEnvelope"
    return "MalformedFrame"


class FrameKind(str, Enum):
    PUB = "PUB"
    SUB = "SUB"
    UNSUB = "UNSUB"
    PING = "PING"
    PONG = "PONG"
    ERR = "ERR"


def valid_topic(s: str) -> bool:
    """True iff *s* matches the topic grammar (also used for patterns)."""
    return isinstance(s, str) and _TOPIC_RE.fullmatch(s) is not None


@dataclass(frozen=True, eq=True)
class MessageEnvelope:
    """One bus message; also the in-memory form of every control frame."""

    kind: FrameKind
    sender: str
    ts_ms: int = 0
    topic: str | None = None
    pattern: str | None = None
    headers: dict[str, str] = field(default_factory=dict)
    payload: Any = None
    version: int = PROTOCOL_VERSION

    def validate(self) -> None:
        if self.version != PROTOCOL_VERSION:
            raise UnsupportedVersion(f"version {self.version!r} not supported")
        if not isinstance(self.kind, FrameKind):
            raise InvalidEnvelope(f"unknown frame kind {self.kind!r}")
        if not isinstance(self.sender, str) or not self.sender:
            raise InvalidEnvelope("sender must be a non-empty string")
        if not isinstance(self.ts_ms, int) or isinstance(self.ts_ms, bool):
            raise InvalidEnvelope("ts_ms must be an integer")
        if self.kind is FrameKind.PUB:
            if not self.topic or not valid_topic(self.topic):
                raise InvalidTopic(f"PUB topic {self.topic!r} violates topic grammar")
        elif self.topic is not None:
            raise InvalidEnvelope(f"{self.kind.value} frame must not carry a topic")
        if self.kind in (FrameKind.SUB, FrameKind.UNSUB):
            if not self.pattern or not valid_topic(self.pattern):
                raise InvalidTopic(f"{self.kind.value} pattern {self.pattern!r} violates topic grammar")
        elif self.pattern is not None:
            raise InvalidEnvelope(f"{self.kind.value} frame must not carry a pattern")
        if not isinstance(self.headers, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in self.headers.items()
        ):
            raise InvalidEnvelope("headers must map strings to strings")


@dataclass(frozen=True)
class Subscription:
    """A live (pattern, subscriber) pair held by the broker."""

    pattern: str
    subscriber: str

    def validate(self) -> None:
        if not valid_topic(self.pattern):
            raise InvalidTopic(f"pattern {self.pattern!r} violates topic grammar")


def encode_frame(msg: MessageEnvelope) -> bytes:
    """Serialize an envelope to its canonical newline-terminated line.

    Raises InvalidEnvelope if the envelope violates its invariants or the
    payload is not representable (non-finite numbers included).
    """
    msg.validate()
    obj: dict[str, Any] = {"v": msg.version, "kind": msg.kind.value}
    if msg.topic is not None:
        obj["topic"] = msg.topic
    if msg.pattern is not None:
        obj["pattern"] = msg.pattern
    obj["sender"] = msg.sender
    obj["ts_ms"] = msg.ts_ms
    if msg.headers:
        obj["headers"] = msg.headers
    if msg.payload is not None:
        obj["payload"] = msg.payload
    try:
        line = json.dumps(obj, ensure_ascii=False, separators=(",", ":"), allow_nan=False)
    except (TypeError, ValueError) as exc:
        raise InvalidEnvelope(f"payload not serializable: {exc}") from exc
    data = line.encode("utf-8") + b"\n"
    if len(data) > MAX_FRAME_BYTES:
        raise InvalidEnvelope(f"frame of {len(data)} bytes exceeds {MAX_FRAME_BYTES}")
    return data


def decode_frame(data: bytes | str) -> MessageEnvelope:
    """Parse one newline-terminated line back into an envelope.

    Unknown keys are ignored. Raises MalformedFrame for syntax-level damage,
    UnsupportedVersion for a foreign protocol version, and InvalidEnvelope
    when the frame parses but violates envelope invariants.
    """
    if isinstance(data, str):
        data = data.encode("utf-8")
    if not data.endswith(b"\n"):
        raise MalformedFrame("frame not newline-terminated (truncated?)")
    body = data[:-1]
    if b"\n" in body:
        raise MalformedFrame("frame contains embedded newline")
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFrame(f"not a JSON line: {exc}") from exc
    if not isinstance(obj, dict):
        raise MalformedFrame("frame is not a JSON object")

    version = obj.get("v")
    if not isinstance(version, int) or isinstance(version, bool):
        raise MalformedFrame("missing or non-integer 'v'")
    if version != PROTOCOL_VERSION:
        raise UnsupportedVersion(f"version {version} not supported")

    kind_raw = obj.get("kind")
    try:
        kind = FrameKind(kind_raw)
    except ValueError:
        raise InvalidEnvelope(f"unknown kind {kind_raw!r}") from None

    sender = obj.get("sender")
    if not isinstance(sender, str):
        raise MalformedFrame("missing or non-string 'sender'")
    ts_ms = obj.get("ts_ms", 0)
    topic = obj.get("topic")
    pattern = obj.get("pattern")
    headers = obj.get("headers", {})
    if topic is not None and not isinstance(topic, str):
        raise MalformedFrame("'topic' must be a string")
    if pattern is not None and not isinstance(pattern, str):
        raise MalformedFrame("'pattern' must be a string")
    if not isinstance(headers, dict):
        raise MalformedFrame("'headers' must be an object")
    if not isinstance(ts_ms, int) or isinstance(ts_ms, bool):
        raise MalformedFrame("'ts_ms' must be an integer")

    env = MessageEnvelope(
        kind=kind,
        sender=sender,
        ts_ms=ts_ms,
        topic=topic,
        pattern=pattern,
        headers=headers,
        payload=obj.get("payload"),
        version=version,
    )
    env.validate()
    return env


def topic_matches(pattern: str, topic: str) -> bool:
    """Whole-segment prefix match: the pattern must equal a leading run of
    the topic's segments. ``a/b`` matches ``a/b`` and ``a/b/c`` but not
    ``a/bc``."""
    p = pattern.split("/")
    t = topic.split("/")
    return len(p) <= len(t) and t[: len(p)] == p


def route(
    publish: MessageEnvelope, subs: Iterable[Subscription]
) -> list[tuple[str, MessageEnvelope]]:
    """Compute the delivery list for one PUB frame.

    Each distinct subscriber with at least one matching pattern appears
    exactly once (in first-match order); the delivered envelope is the
    published one, unchanged. Self-delivery is allowed.
    """
    if publish.kind is not FrameKind.PUB:
        raise InvalidEnvelope("route() requires a PUB frame")
    assert publish.topic is not None
    out: list[tuple[str, MessageEnvelope]] = []
    seen: set[str] = set()
    for sub in subs:
        if sub.subscriber in seen:
            continue
        if topic_matches(sub.pattern, publish.topic):
            seen.add(sub.subscriber)
            out.append((sub.subscriber, publish))
    return out
