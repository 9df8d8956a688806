"""Off-path flow analysis: DNS, HTTP, TLS metadata and leak detection."""

from src.analyzer.attribution import ProcAttribution, ProcessInfo, attribute_flow
from src.analyzer.dns import DnsCache, DnsMessage, DnsParseError, parse_dns
from src.analyzer.entities import OrganizationMap
from src.analyzer.events import (
    SCHEMA_VERSION,
    AnalyzerEvent,
    DnsTransaction,
    EventSink,
    FlowClosed,
    FlowOpened,
    HttpTransaction,
    LeakDetected,
    SinkFull,
    TlsMetadata,
    event_from_dict,
    read_events,
)
from src.analyzer.http import HttpMessage, HttpStreamParser, NotHttp, parse_http
from src.analyzer.leaks import LeakMatch, PatternSet, scan_for_leaks
from src.analyzer.mirror_queue import EnqueueResult, MirrorQueue
from src.analyzer.pcap_replay import CorruptPcap, replay
from src.analyzer.sampling import FlowSampler
from src.analyzer.service import Analyzer

__all__ = [
    "Analyzer",
    "AnalyzerEvent",
    "CorruptPcap",
    "DnsCache",
    "DnsMessage",
    "DnsParseError",
    "DnsTransaction",
    "EnqueueResult",
    "EventSink",
    "FlowClosed",
    "FlowOpened",
    "FlowSampler",
    "HttpMessage",
    "HttpStreamParser",
    "HttpTransaction",
    "LeakDetected",
    "LeakMatch",
    "MirrorQueue",
    "NotHttp",
    "OrganizationMap",
    "PatternSet",
    "ProcAttribution",
    "ProcessInfo",
    "SCHEMA_VERSION",
    "SinkFull",
    "TlsMetadata",
    "attribute_flow",
    "event_from_dict",
    "parse_dns",
    "parse_http",
    "read_events",
    "replay",
    "scan_for_leaks",
]
