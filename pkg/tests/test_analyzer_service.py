"""Tests for the analyzer consumer: records in, events out."""

import io
import ipaddress
import json
import ssl
from unittest.mock import MagicMock

import pytest
from dnslib import QTYPE, RR, A, DNSRecord

from src.analyzer.attribution import ProcessInfo
from src.analyzer.events import (
    DnsTransaction,
    EventSink,
    FlowClosed,
    FlowOpened,
    HttpTransaction,
    LeakDetected,
    TlsMetadata,
)
from src.analyzer.leaks import PatternSet
from src.analyzer.mirror_queue import FlowClose, FlowCopy, FlowOpen, MirrorQueue, TlsMetaRecord
from src.analyzer.sampling import FlowSampler
from src.analyzer.service import Analyzer
from src.packet_codec import PROTO_TCP, PROTO_UDP, Direction, FlowKey
from src.tls_gate.client_hello import TlsOutcome, detect_client_hello

OUT = Direction.OUTBOUND
IN = Direction.INBOUND
APP = ipaddress.ip_address("10.7.0.2")
WEB = ipaddress.ip_address("93.184.216.34")
RESOLVER = ipaddress.ip_address("192.0.2.53")

TCP_KEY = FlowKey(PROTO_TCP, APP, 40000, WEB, 80)
TLS_KEY = FlowKey(PROTO_TCP, APP, 40001, WEB, 443)
DNS_KEY = FlowKey(PROTO_UDP, APP, 5353, RESOLVER, 53)

EMAIL = "user@example.com"


def client_hello(server_hostname="example.com"):
    ctx = ssl.create_default_context()
    incoming, outgoing = ssl.MemoryBIO(), ssl.MemoryBIO()
    tls = ctx.wrap_bio(incoming, outgoing, server_hostname=server_hostname)
    with pytest.raises(ssl.SSLWantReadError):
        tls.do_handshake()
    return outgoing.read()


class Harness:
    """An analyzer fed by hand, with every emitted event collected."""

    def __init__(self, **kwargs):
        self.stream = io.StringIO()
        self.queue = MirrorQueue()
        kwargs.setdefault("patterns", PatternSet({"email": EMAIL}))
        self.analyzer = Analyzer(
            self.queue, EventSink(self.stream, flush_interval=3600), **kwargs
        )
        self.events = []
        self.analyzer.add_listener(self.events.append)
        self.offsets = {}

    def open(self, flow_id, key, at=0.0):
        self.analyzer.process(FlowOpen(flow_id, key, at))

    def copy(self, flow_id, direction, data, at=0.0, offset=None):
        slot = (flow_id, direction)
        if offset is None:
            offset = self.offsets.get(slot, 0)
        self.offsets[slot] = offset + len(data)
        self.analyzer.process(FlowCopy(flow_id, direction, data, offset, at))

    def close(self, flow_id, at=1.0, up=0, down=0):
        self.analyzer.process(FlowClose(flow_id, up, down, at))

    def of_type(self, cls):
        return [e for e in self.events if isinstance(e, cls)]


# ---------------------------------------------------------------------------
# DNS
# ---------------------------------------------------------------------------


def test_dns_transaction_and_hostname_for_later_flows():
    h = Harness()
    q = DNSRecord.question("example.com", "A")
    reply = q.reply()
    reply.add_answer(RR("example.com", QTYPE.A, rdata=A(str(WEB)), ttl=300))

    h.open(1, DNS_KEY, at=1.0)
    h.copy(1, OUT, q.pack(), at=1.000)
    h.copy(1, IN, reply.pack(), at=1.020)
    [dns] = h.of_type(DnsTransaction)
    assert dns.qname == "example.com"
    assert dns.qtype == "A"
    assert dns.answers[0]["value"] == str(WEB)
    assert dns.rtt_ms == pytest.approx(20.0)

    h.open(2, TCP_KEY, at=2.0)
    opened = h.of_type(FlowOpened)[-1]
    assert opened.flow_id == 2
    assert opened.hostname == "example.com"

    h.close(1)
    assert h.of_type(FlowClosed)[0].protocol == "dns"


def test_bad_dns_counts_a_parse_error():
    h = Harness()
    h.open(1, DNS_KEY)
    h.copy(1, OUT, b"\x00\x01")
    assert h.analyzer.stats.parse_errors == 1
    assert not h.of_type(DnsTransaction)


# ---------------------------------------------------------------------------
# HTTP and leaks
# ---------------------------------------------------------------------------


def test_http_request_leaks_in_query_header_and_body():
    h = Harness()
    body = b"email=" + EMAIL.encode()
    request = (
        b"POST /collect?who=user%40example.com HTTP/1.1\r\n"
        b"Host: Ads.Example.NET\r\n"
        b"X-User: " + EMAIL.encode() + b"\r\n"
        b"Content-Length: " + str(len(body)).encode() + b"\r\n\r\n" + body
    )
    h.open(1, TCP_KEY)
    h.copy(1, OUT, request[:30])
    h.copy(1, OUT, request[30:])

    [http] = h.of_type(HttpTransaction)
    assert http.method == "POST"
    assert http.path == "/collect"
    assert http.body_bytes == len(body)

    leaks = h.of_type(LeakDetected)
    assert sorted((leak.where, leak.encoding) for leak in leaks) == [
        ("body", "plain"),
        ("header", "plain"),
        ("query", "urlencoded"),
    ]
    assert all(leak.hostname == "ads.example.net" for leak in leaks)

    h.close(1, up=len(request))
    closed = h.of_type(FlowClosed)[0]
    assert closed.protocol == "http"
    assert closed.bytes_up == len(request)


def test_opaque_tcp_stream_is_scanned_as_body():
    h = Harness()
    h.open(1, TCP_KEY)
    h.copy(1, OUT, b"\x00\x07binary " + EMAIL.encode())
    [leak] = h.of_type(LeakDetected)
    assert leak.where == "body"
    assert h.of_type(HttpTransaction) == []


def test_plain_udp_payload_is_scanned():
    h = Harness()
    h.open(1, FlowKey(PROTO_UDP, APP, 6000, WEB, 9999))
    h.copy(1, OUT, b"id=" + EMAIL.encode())
    assert len(h.of_type(LeakDetected)) == 1


def test_offset_gap_is_counted_and_parser_resyncs():
    h = Harness()
    h.open(1, TCP_KEY)
    get = b"GET /a HTTP/1.1\r\nHost: x.example\r\n\r\n"
    h.copy(1, OUT, get[:10])
    # the rest of the first request was dropped from the queue
    h.copy(1, OUT, get, offset=len(get))
    h.close(1)

    assert [m.path for m in h.of_type(HttpTransaction)] == ["/a"]
    assert h.of_type(FlowClosed)[0].gaps == 1
    assert h.analyzer.stats.gaps == 1


def test_response_emitted_when_flow_closes():
    h = Harness()
    h.open(1, TCP_KEY)
    h.copy(1, OUT, b"GET / HTTP/1.0\r\n\r\n")
    h.copy(1, IN, b"HTTP/1.0 200 OK\r\nServer: x\r\n\r\nuntil close")
    assert [e.direction for e in h.of_type(HttpTransaction)] == ["outbound"]
    h.close(1)
    statuses = [e.status for e in h.of_type(HttpTransaction)]
    assert statuses == [None, 200]


# ---------------------------------------------------------------------------
# TLS
# ---------------------------------------------------------------------------


def test_unintercepted_client_hello_reported_as_bypassed():
    h = Harness()
    hello = client_hello("pixel.example")
    h.open(1, TLS_KEY)
    h.copy(1, OUT, hello[:5])
    assert h.of_type(TlsMetadata) == []
    h.copy(1, OUT, hello[5:])
    # ciphertext afterwards is never scanned
    h.copy(1, OUT, EMAIL.encode())
    h.close(1)

    [tls] = h.of_type(TlsMetadata)
    assert tls.sni == "pixel.example"
    assert tls.outcome == "Bypassed"
    assert h.of_type(LeakDetected) == []
    assert h.of_type(FlowClosed)[0].protocol == "tls"


def test_intercepted_flow_is_parsed_as_plaintext():
    h = Harness()
    meta = detect_client_hello(client_hello("api.example")).with_outcome(
        TlsOutcome.INTERCEPTED
    )
    h.open(1, TLS_KEY)
    h.analyzer.process(TlsMetaRecord(1, meta, 0.0))
    h.copy(1, OUT, b"GET /me?mail=" + EMAIL.encode() + b" HTTP/1.1\r\nHost: api.example\r\n\r\n")

    [tls] = h.of_type(TlsMetadata)
    assert tls.outcome == "Intercepted"
    assert len(h.of_type(HttpTransaction)) == 1
    assert [leak.where for leak in h.of_type(LeakDetected)] == ["query"]


def test_tcp_that_is_not_tls_passes_through_detection():
    h = Harness()
    h.open(1, TCP_KEY)
    h.copy(1, OUT, b"GET / HTTP/1.1\r\nHost: a.example\r\n\r\n")
    assert len(h.of_type(HttpTransaction)) == 1
    assert h.of_type(TlsMetadata) == []


# ---------------------------------------------------------------------------
# Attribution, targeting and delivery
# ---------------------------------------------------------------------------


def test_flow_attributed_to_process():
    attribution = MagicMock()
    attribution.attribute_flow.return_value = ProcessInfo(321, "tracker")
    h = Harness(attribution=attribution)
    h.open(1, TCP_KEY)
    opened = h.of_type(FlowOpened)[0]
    assert (opened.pid, opened.process) == (321, "tracker")
    attribution.attribute_flow.assert_called_once_with(TCP_KEY)


def test_untargeted_process_produces_no_events():
    attribution = MagicMock()
    attribution.attribute_flow.return_value = ProcessInfo(5, "browser")
    h = Harness(attribution=attribution, sampler=FlowSampler(targets=["tracker"]))
    h.open(1, TCP_KEY)
    h.copy(1, OUT, b"GET /?e=" + EMAIL.encode() + b" HTTP/1.1\r\n\r\n")
    h.close(1)
    assert h.events == []


def test_timestamps_never_go_backwards_within_a_flow():
    h = Harness()
    h.open(1, TCP_KEY, at=5.0)
    h.copy(1, OUT, b"GET / HTTP/1.1\r\nHost: a.example\r\n\r\n", at=4.0)
    h.close(1, at=3.0)
    stamps = [e.ts_mono for e in h.events]
    assert stamps == sorted(stamps)
    assert stamps[0] == 5.0


def test_failing_listener_does_not_stop_delivery():
    h = Harness()
    h.analyzer.add_listener(MagicMock(side_effect=RuntimeError("boom")))
    h.open(1, TCP_KEY)
    h.close(1)
    assert [e.event_type for e in h.events] == ["flow_opened", "flow_closed"]
    assert h.analyzer.stats.events == 2


def test_records_for_unknown_flows_are_ignored():
    h = Harness()
    h.copy(9, OUT, b"stray")
    h.close(9)
    assert h.events == []
    assert h.analyzer.stats.records == 2


def test_thread_drains_queue_on_stop():
    h = Harness()
    h.queue.open_flow(1, TCP_KEY)
    h.queue.enqueue_copy(1, OUT, b"GET / HTTP/1.1\r\nHost: a.example\r\n\r\n")
    h.queue.close_flow(1, 10, 0)
    h.analyzer.start()
    h.analyzer.stop()

    lines = [json.loads(line) for line in h.stream.getvalue().splitlines()]
    assert [line["type"] for line in lines] == ["flow_opened", "http", "flow_closed"]
    assert h.analyzer.snapshot()["open_flows"] == 0
