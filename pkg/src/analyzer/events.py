"""Analyzer events and the JSON-lines sink they are written to.

Every line is one object carrying ``schema``, ``type``, ``ts_mono`` (seconds
on the gateway's monotonic clock) and ``ts_wall`` (ISO-8601 UTC) plus the
fields of its event type.
"""

import json
import logging
import sys
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import IO, Any, ClassVar, Dict, List, Optional, Type, Union

logger = logging.getLogger("flowtap.analyzer.events")

SCHEMA_VERSION = 1
FLUSH_INTERVAL = 0.1
MAX_PENDING = 10_000


class SinkFull(RuntimeError):
    """Too many events are waiting to be written."""


@dataclass
class AnalyzerEvent:
    event_type: ClassVar[str] = "event"

    ts_mono: float
    ts_wall: float

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["ts_wall"] = datetime.fromtimestamp(self.ts_wall, tz=timezone.utc).isoformat()
        return {"schema": SCHEMA_VERSION, "type": self.event_type, **data}


@dataclass
class FlowOpened(AnalyzerEvent):
    event_type: ClassVar[str] = "flow_opened"

    flow_id: int = 0
    key: Dict[str, Any] = field(default_factory=dict)
    process: Optional[str] = None
    pid: Optional[int] = None
    hostname: Optional[str] = None
    organization: Optional[str] = None


@dataclass
class DnsTransaction(AnalyzerEvent):
    event_type: ClassVar[str] = "dns"

    flow_id: int = 0
    qname: str = ""
    qtype: str = ""
    rcode: str = "NOERROR"
    answers: List[Dict[str, Any]] = field(default_factory=list)
    rtt_ms: Optional[float] = None


@dataclass
class HttpTransaction(AnalyzerEvent):
    event_type: ClassVar[str] = "http"

    flow_id: int = 0
    direction: str = "outbound"
    method: Optional[str] = None
    host: Optional[str] = None
    path: Optional[str] = None
    status: Optional[int] = None
    content_encoding: Optional[str] = None
    body_bytes: int = 0
    body_truncated: bool = False


@dataclass
class TlsMetadata(AnalyzerEvent):
    event_type: ClassVar[str] = "tls"

    flow_id: int = 0
    sni: Optional[str] = None
    client_version: Optional[str] = None
    max_version: Optional[str] = None
    cipher_suites: List[int] = field(default_factory=list)
    alpn: List[str] = field(default_factory=list)
    outcome: Optional[str] = None
    reason: Optional[str] = None


@dataclass
class LeakDetected(AnalyzerEvent):
    event_type: ClassVar[str] = "leak"

    flow_id: int = 0
    pattern_name: str = ""
    where: str = "body"  # url | header | body | query
    encoding: str = "plain"  # plain | gzip | base64 | urlencoded
    offset: int = 0
    hostname: Optional[str] = None
    process: Optional[str] = None


@dataclass
class FlowClosed(AnalyzerEvent):
    event_type: ClassVar[str] = "flow_closed"

    flow_id: int = 0
    bytes_up: int = 0
    bytes_down: int = 0
    protocol: str = "other"  # dns | http | tls | other
    duration_s: float = 0.0
    gaps: int = 0


EVENT_TYPES: Dict[str, Type[AnalyzerEvent]] = {
    cls.event_type: cls
    for cls in (FlowOpened, DnsTransaction, HttpTransaction, TlsMetadata, LeakDetected, FlowClosed)
}


def event_from_dict(data: Dict[str, Any]) -> AnalyzerEvent:
    """Rebuild an event from its JSON form."""
    if data.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"unsupported event schema {data.get('schema')!r}")
    cls = EVENT_TYPES[data["type"]]
    kwargs = {f.name: data[f.name] for f in fields(cls) if f.name in data}
    kwargs["ts_wall"] = datetime.fromisoformat(data["ts_wall"]).timestamp()
    return cls(**kwargs)


class EventSink:
    """Buffered JSONL writer; ``flush`` runs at most every 100 ms on its own."""

    def __init__(
        self,
        target: Union[str, Path, IO[str], None] = None,
        flush_interval: float = FLUSH_INTERVAL,
        max_pending: int = MAX_PENDING,
    ):
        self.flush_interval = flush_interval
        self.max_pending = max_pending
        self._owns_stream = False
        if target is None or target == "-":
            self._stream: IO[str] = sys.stdout
        elif isinstance(target, (str, Path)):
            # opening eagerly turns a bad path into a startup error
            self._stream = open(Path(target).expanduser(), "a", encoding="utf-8")
            self._owns_stream = True
        else:
            self._stream = target
        self._pending: List[str] = []
        self._lock = threading.Lock()
        self._last_flush = time.monotonic()
        self.written = 0

    def emit(self, event: AnalyzerEvent) -> None:
        line = json.dumps(event.to_dict(), default=str, separators=(",", ":"))
        with self._lock:
            if len(self._pending) >= self.max_pending:
                raise SinkFull(f"{len(self._pending)} events pending")
            self._pending.append(line)
            due = time.monotonic() - self._last_flush >= self.flush_interval
        if due:
            self.flush()

    def flush(self) -> int:
        with self._lock:
            lines, self._pending = self._pending, []
            self._last_flush = time.monotonic()
            if not lines:
                return 0
            try:
                self._stream.write("\n".join(lines) + "\n")
                self._stream.flush()
            except (OSError, ValueError):
                self._pending = lines + self._pending
                logger.exception("Event sink write failed; %d events kept", len(lines))
                return 0
            self.written += len(lines)
            return len(lines)

    @property
    def pending(self) -> int:
        with self._lock:
            return len(self._pending)

    def close(self) -> None:
        self.flush()
        if self._owns_stream:
            self._stream.close()


def read_events(path: Path) -> List[AnalyzerEvent]:
    events = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                events.append(event_from_dict(json.loads(line)))
    return events
