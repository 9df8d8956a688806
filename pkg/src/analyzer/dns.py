"""DNS message parsing and the IP -> hostname cache built from answers."""

import ipaddress
import logging
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import dpkt

logger = logging.getLogger("flowtap.analyzer.dns")

QTYPE_NAMES = {
    dpkt.dns.DNS_A: "A",
    dpkt.dns.DNS_NS: "NS",
    dpkt.dns.DNS_CNAME: "CNAME",
    dpkt.dns.DNS_SOA: "SOA",
    dpkt.dns.DNS_PTR: "PTR",
    dpkt.dns.DNS_MX: "MX",
    dpkt.dns.DNS_TXT: "TXT",
    dpkt.dns.DNS_AAAA: "AAAA",
    dpkt.dns.DNS_SRV: "SRV",
    65: "HTTPS",
}

RCODE_NAMES = {0: "NOERROR", 1: "FORMERR", 2: "SERVFAIL", 3: "NXDOMAIN", 4: "NOTIMP", 5: "REFUSED"}


class DnsParseError(ValueError):
    """Malformed DNS message."""


class DnsTruncated(DnsParseError):
    """The message ends before its declared sections."""


@dataclass(frozen=True)
class DnsAnswer:
    name: str
    rtype: str
    ttl: int
    value: str


@dataclass(frozen=True)
class DnsMessage:
    txid: int
    is_response: bool
    qname: str
    qtype: str
    rcode: str
    answers: Tuple[DnsAnswer, ...] = ()

    def addresses(self) -> List[Tuple[str, int]]:
        """(ip, ttl) for every A/AAAA answer."""
        return [(a.value, a.ttl) for a in self.answers if a.rtype in ("A", "AAAA")]


def _qtype_name(code: int) -> str:
    return QTYPE_NAMES.get(code, str(code))


def parse_dns(msg: bytes) -> DnsMessage:
    try:
        dns = dpkt.dns.DNS(msg)
    except (dpkt.NeedData, struct.error) as e:
        raise DnsTruncated(str(e) or "truncated DNS message") from e
    except (dpkt.UnpackError, IndexError, ValueError) as e:
        raise DnsParseError(str(e) or "malformed DNS message") from e
    if not dns.qd:
        raise DnsParseError("no question section")
    q = dns.qd[0]
    answers = []
    for rr in dns.an if dns.qr == dpkt.dns.DNS_R else ():
        if rr.type == dpkt.dns.DNS_A and len(rr.rdata) == 4:
            value = str(ipaddress.IPv4Address(bytes(rr.rdata)))
        elif rr.type == dpkt.dns.DNS_AAAA and len(rr.rdata) == 16:
            value = str(ipaddress.IPv6Address(bytes(rr.rdata)))
        elif rr.type == dpkt.dns.DNS_CNAME:
            value = rr.cname.lower()
        else:
            continue
        answers.append(DnsAnswer(rr.name.lower(), _qtype_name(rr.type), rr.ttl, value))
    return DnsMessage(
        txid=dns.id,
        is_response=dns.qr == dpkt.dns.DNS_R,
        qname=q.name.lower().rstrip("."),
        qtype=_qtype_name(q.type),
        rcode=RCODE_NAMES.get(dns.rcode, str(dns.rcode)),
        answers=tuple(answers),
    )


@dataclass
class _CacheEntry:
    hostname: str
    expires_at: float


class DnsCache:
    """IP -> hostname, expiring with the answer's TTL; the latest answer wins."""

    def __init__(self, min_ttl: float = 0.0):
        self.min_ttl = min_ttl
        self._entries: Dict[str, _CacheEntry] = {}
        self._lock = threading.Lock()

    def put(self, ip: str, hostname: str, ttl: float, now: Optional[float] = None) -> None:
        now = time.monotonic() if now is None else now
        with self._lock:
            self._entries[_norm(ip)] = _CacheEntry(hostname, now + max(ttl, self.min_ttl))

    def lookup(self, ip: str, now: Optional[float] = None) -> Optional[str]:
        now = time.monotonic() if now is None else now
        key = _norm(ip)
        with self._lock:
            entry = self._entries.get(key)
            if entry is None:
                return None
            if now >= entry.expires_at:
                del self._entries[key]
                return None
            return entry.hostname

    def ingest(self, message: DnsMessage, now: Optional[float] = None) -> int:
        """Record every address in a response under the name that was asked."""
        if not message.is_response:
            return 0
        count = 0
        for ip, ttl in message.addresses():
            self.put(ip, message.qname, ttl, now)
            count += 1
        return count

    def purge(self, now: Optional[float] = None) -> int:
        now = time.monotonic() if now is None else now
        with self._lock:
            expired = [k for k, e in self._entries.items() if now >= e.expires_at]
            for k in expired:
                del self._entries[k]
        return len(expired)

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


def _norm(ip: str) -> str:
    return str(ipaddress.ip_address(str(ip)))


@dataclass
class PendingQueries:
    """Outstanding queries per flow, matched to responses by transaction id."""

    sent: Dict[int, float] = field(default_factory=dict)

    def query(self, txid: int, at: float) -> None:
        self.sent[txid] = at

    def answer(self, txid: int, at: float) -> Optional[float]:
        started = self.sent.pop(txid, None)
        if started is None:
            return None
        return (at - started) * 1000.0
