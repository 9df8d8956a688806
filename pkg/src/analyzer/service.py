"""The off-path analyzer: one consumer thread turning flow copies into events."""

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional

from src.analyzer.attribution import ProcAttribution, ProcessInfo
from src.analyzer.dns import DnsCache, DnsParseError, PendingQueries, parse_dns
from src.analyzer.entities import OrganizationMap
from src.analyzer.events import (
    AnalyzerEvent,
    DnsTransaction,
    EventSink,
    FlowClosed,
    FlowOpened,
    HttpTransaction,
    LeakDetected,
    SinkFull,
    TlsMetadata,
)
from src.analyzer.http import DEFAULT_MAX_BODY, HttpMessage, HttpStreamParser, NotHttp
from src.analyzer.leaks import PatternSet, scan_for_leaks
from src.analyzer.mirror_queue import (
    FlowClose,
    FlowCopy,
    FlowOpen,
    MirrorQueue,
    MirrorRecord,
    TlsMetaRecord,
)
from src.analyzer.sampling import FlowSampler
from src.packet_codec import PROTO_TCP, PROTO_UDP, Direction, FlowKey
from src.tls_gate.client_hello import (
    NotTls,
    TlsFlowMeta,
    TlsOutcome,
    TlsTruncated,
    detect_client_hello,
)

logger = logging.getLogger("flowtap.analyzer")

DNS_PORT = 53
_HELLO_LIMIT = 32 * 1024

EventListener = Callable[[AnalyzerEvent], None]


@dataclass
class _FlowState:
    flow_id: int
    key: FlowKey
    opened_at: float
    hostname: Optional[str] = None
    process: Optional[ProcessInfo] = None
    excluded: bool = False
    protocol: str = "other"
    last_mono: float = 0.0
    expected: Dict[Direction, int] = field(
        default_factory=lambda: {Direction.OUTBOUND: 0, Direction.INBOUND: 0}
    )
    gaps: int = 0
    tls: Optional[TlsFlowMeta] = None
    tls_checked: bool = False
    hello: bytes = b""
    http: Dict[Direction, HttpStreamParser] = field(default_factory=dict)
    dns_pending: PendingQueries = field(default_factory=PendingQueries)


@dataclass
class AnalyzerStats:
    records: int = 0
    copies: int = 0
    events: int = 0
    events_dropped: int = 0
    parse_errors: int = 0
    gaps: int = 0
    max_queue_delay: float = 0.0

    def snapshot(self) -> dict:
        return dict(self.__dict__)


class Analyzer:
    def __init__(
        self,
        queue: MirrorQueue,
        sink: EventSink,
        patterns: Optional[PatternSet] = None,
        dns_cache: Optional[DnsCache] = None,
        attribution: Optional[ProcAttribution] = None,
        organizations: Optional[OrganizationMap] = None,
        sampler: Optional[FlowSampler] = None,
        max_body_bytes: int = DEFAULT_MAX_BODY,
        dns_ports: Iterable[int] = (DNS_PORT,),
        wall_clock: Callable[[], float] = time.time,
        mono_clock: Callable[[], float] = time.monotonic,
    ):
        self.queue = queue
        self.sink = sink
        self.patterns = patterns or PatternSet()
        self.dns_cache = dns_cache or DnsCache()
        self.attribution = attribution
        self.organizations = organizations or OrganizationMap()
        self.sampler = sampler
        self.max_body_bytes = max_body_bytes
        self.dns_ports = frozenset(dns_ports)
        self.stats = AnalyzerStats()
        self._wall = wall_clock
        self._mono = mono_clock
        self._flows: Dict[int, _FlowState] = {}
        self._listeners: List[EventListener] = []
        self._thread: Optional[threading.Thread] = None
        self._stop = threading.Event()

    # -- lifecycle ----------------------------------------------------------

    def add_listener(self, listener: EventListener) -> None:
        self._listeners.append(listener)

    def remove_listener(self, listener: EventListener) -> None:
        if listener in self._listeners:
            self._listeners.remove(listener)

    def start(self) -> threading.Thread:
        self._stop.clear()
        self._thread = threading.Thread(target=self.run, name="analyzer", daemon=True)
        self._thread.start()
        return self._thread

    def stop(self, timeout: float = 2.0) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout)
        self.sink.flush()

    def run(self) -> None:
        logger.info("Analyzer consumer started")
        while not self._stop.is_set():
            record = self.queue.get(timeout=0.1)
            if record is None:
                continue
            try:
                self.process(record)
            except Exception:
                logger.exception("Analyzer failed on %s", type(record).__name__)
        # drain what is left so FlowClosed events are not lost
        for record in self.queue.drain():
            try:
                self.process(record)
            except Exception:
                logger.exception("Analyzer failed on %s", type(record).__name__)
        logger.info("Analyzer consumer stopped")

    # -- record dispatch ----------------------------------------------------

    def process(self, record: MirrorRecord) -> None:
        self.stats.records += 1
        delay = self._mono() - record.at
        if delay > self.stats.max_queue_delay:
            self.stats.max_queue_delay = delay
        if isinstance(record, FlowCopy):
            self._on_copy(record)
        elif isinstance(record, FlowOpen):
            self._on_open(record)
        elif isinstance(record, TlsMetaRecord):
            self._on_tls_meta(record)
        elif isinstance(record, FlowClose):
            self._on_close(record)

    def _emit(self, state: Optional[_FlowState], event: AnalyzerEvent) -> None:
        if state is not None:
            if state.excluded:
                return
            # per-flow timestamps never go backwards
            event.ts_mono = max(event.ts_mono, state.last_mono)
            state.last_mono = event.ts_mono
        try:
            self.sink.emit(event)
        except SinkFull:
            self.sink.flush()
            try:
                self.sink.emit(event)
            except SinkFull:
                self.stats.events_dropped += 1
                return
        self.stats.events += 1
        for listener in list(self._listeners):
            try:
                listener(event)
            except Exception:
                logger.exception("Event listener failed")

    def _stamp(self, at: float) -> Dict[str, float]:
        return {"ts_mono": at, "ts_wall": self._wall()}

    # -- handlers -----------------------------------------------------------

    def _on_open(self, record: FlowOpen) -> None:
        key = record.key
        state = _FlowState(record.flow_id, key, opened_at=record.at, last_mono=record.at)
        state.hostname = self.dns_cache.lookup(str(key.remote_addr), record.at)
        if self.attribution is not None:
            state.process = self.attribution.attribute_flow(key)
        if self.sampler is not None and not self.sampler.wants_process(
            state.process.name if state.process else None
        ):
            state.excluded = True
        if key.protocol == PROTO_UDP and key.remote_port in self.dns_ports:
            state.protocol = "dns"
        self._flows[record.flow_id] = state
        self._emit(
            state,
            FlowOpened(
                **self._stamp(record.at),
                flow_id=record.flow_id,
                key=key.to_dict(),
                process=state.process.name if state.process else None,
                pid=state.process.pid if state.process else None,
                hostname=state.hostname,
                organization=self.organizations.lookup(state.hostname),
            ),
        )

    def _on_tls_meta(self, record: TlsMetaRecord) -> None:
        state = self._flows.get(record.flow_id)
        if state is None:
            return
        state.tls = record.meta
        state.tls_checked = True
        state.protocol = "tls"
        self._emit_tls(state, record.meta, record.at)

    def _emit_tls(self, state: _FlowState, meta: TlsFlowMeta, at: float) -> None:
        info = meta.to_dict()
        self._emit(
            state,
            TlsMetadata(
                **self._stamp(at),
                flow_id=state.flow_id,
                sni=info["sni"],
                client_version=info["client_version"],
                max_version=info["max_version"],
                cipher_suites=info["cipher_suites"],
                alpn=info["alpn"],
                outcome=info["outcome"],
                reason=info["reason"],
            ),
        )

    def _on_close(self, record: FlowClose) -> None:
        state = self._flows.pop(record.flow_id, None)
        if state is None:
            return
        for parser in state.http.values():
            for msg in parser.close():
                self._on_http(state, msg, record.at)
        self._emit(
            state,
            FlowClosed(
                **self._stamp(record.at),
                flow_id=record.flow_id,
                bytes_up=record.bytes_up,
                bytes_down=record.bytes_down,
                protocol=state.protocol,
                duration_s=max(0.0, record.at - state.opened_at),
                gaps=state.gaps,
            ),
        )

    def _on_copy(self, record: FlowCopy) -> None:
        self.stats.copies += 1
        state = self._flows.get(record.flow_id)
        if state is None or state.excluded:
            return
        direction = record.direction
        gap = record.offset != state.expected[direction]
        state.expected[direction] = record.offset + len(record.data)
        if gap:
            state.gaps += 1
            self.stats.gaps += 1
            parser = state.http.get(direction)
            if parser is not None:
                parser.reset()

        key = state.key
        if key.protocol == PROTO_UDP:
            if key.remote_port in self.dns_ports:
                self._on_dns(state, record)
            else:
                self._scan(state, record.data, "body", "plain", record.at)
            return
        if key.protocol != PROTO_TCP:
            return

        if not state.tls_checked and direction is Direction.OUTBOUND:
            if self._check_tls(state, record):
                return
        if state.tls is not None and state.tls.outcome is not TlsOutcome.INTERCEPTED:
            return  # ciphertext
        self._on_stream(state, record)

    def _check_tls(self, state: _FlowState, record: FlowCopy) -> bool:
        """Report Client Hellos the gate did not intercept; True while deciding."""
        state.hello += record.data
        try:
            meta = detect_client_hello(state.hello)
        except TlsTruncated:
            if len(state.hello) < _HELLO_LIMIT:
                return True
            meta = None
        except NotTls:
            meta = None
        pending, state.hello = state.hello, b""
        state.tls_checked = True
        if meta is None:
            if len(pending) > len(record.data):
                # replay what was held back while deciding
                self._on_stream(
                    state, FlowCopy(record.flow_id, record.direction, pending, 0, record.at)
                )
                return True
            return False
        state.protocol = "tls"
        state.tls = meta.with_outcome(TlsOutcome.BYPASSED, "not intercepted")
        self._emit_tls(state, state.tls, record.at)
        return True

    def _on_dns(self, state: _FlowState, record: FlowCopy) -> None:
        try:
            msg = parse_dns(record.data)
        except DnsParseError as e:
            self.stats.parse_errors += 1
            logger.debug("Bad DNS message on flow %d: %s", state.flow_id, e)
            return
        if not msg.is_response:
            state.dns_pending.query(msg.txid, record.at)
            return
        rtt = state.dns_pending.answer(msg.txid, record.at)
        self.dns_cache.ingest(msg, record.at)
        self._emit(
            state,
            DnsTransaction(
                **self._stamp(record.at),
                flow_id=state.flow_id,
                qname=msg.qname,
                qtype=msg.qtype,
                rcode=msg.rcode,
                answers=[
                    {"name": a.name, "type": a.rtype, "ttl": a.ttl, "value": a.value}
                    for a in msg.answers
                ],
                rtt_ms=rtt,
            ),
        )

    def _on_stream(self, state: _FlowState, record: FlowCopy) -> None:
        parser = state.http.get(record.direction)
        if parser is None:
            parser = HttpStreamParser(record.direction, self.max_body_bytes)
            state.http[record.direction] = parser
        if parser.opaque:
            self._scan(state, record.data, "body", "plain", record.at)
            return
        try:
            messages = parser.feed(record.data)
        except NotHttp:
            self._scan(state, record.data, "body", "plain", record.at)
            return
        for msg in messages:
            self._on_http(state, msg, record.at)

    def _on_http(self, state: _FlowState, msg: HttpMessage, at: float) -> None:
        if state.protocol == "other":
            state.protocol = "http"
        if msg.is_request and msg.host and not state.hostname:
            state.hostname = msg.host.split(":")[0].lower()
        self._emit(
            state,
            HttpTransaction(
                **self._stamp(at),
                flow_id=state.flow_id,
                direction=msg.direction.value,
                method=msg.method,
                host=msg.host,
                path=msg.path,
                status=msg.status,
                content_encoding=msg.content_encoding,
                body_bytes=len(msg.body),
                body_truncated=msg.body_truncated,
            ),
        )
        if msg.uri:
            self._scan(state, (msg.path or "").encode("latin-1", "replace"), "url", "plain", at)
            if msg.query:
                self._scan(state, msg.query.encode("latin-1", "replace"), "query", "plain", at)
        if msg.headers:
            head = msg.header_block().encode("latin-1", "replace")
            self._scan(state, head, "header", "plain", at)
        if msg.body:
            coding = (msg.content_encoding or "").lower()
            encoding = "gzip" if coding in ("gzip", "x-gzip", "deflate") else "plain"
            self._scan(state, msg.body, "body", encoding, at)

    def _scan(self, state: _FlowState, data: bytes, where: str, encoding: str, at: float) -> None:
        if not self.patterns or not data:
            return
        for match in scan_for_leaks(data, self.patterns, encoding):
            self._emit(
                state,
                LeakDetected(
                    **self._stamp(at),
                    flow_id=state.flow_id,
                    pattern_name=match.name,
                    where=where,
                    encoding=match.encoding,
                    offset=match.offset,
                    hostname=state.hostname,
                    process=state.process.name if state.process else None,
                ),
            )

    # -- status -------------------------------------------------------------

    def snapshot(self) -> dict:
        snap = self.stats.snapshot()
        snap["open_flows"] = len(self._flows)
        snap["queue"] = self.queue.snapshot()
        snap["dns_cache"] = len(self.dns_cache)
        return snap
