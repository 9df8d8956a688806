"""HTTPS establishment time and goodput, with the interception proxy on and off."""

import hashlib
import logging
import ssl
import tempfile
import time
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

from src.bench.endpoint import Address, InprocGateway
from src.bench.report import BenchReport
from src.bench.servers import HttpsObjectServer
from src.forwarder import ForwarderConfig
from src.tls_gate.ca import CaIdentity
from src.tls_gate.gate import TlsGate

logger = logging.getLogger("flowtap.bench.tls")

SMALL_OBJECT = 1
LARGE_OBJECT = 20 * 1024 * 1024
_READ = 65536


class TlsClient:
    """TLS over any bench connection, through an in-memory ``SSLObject``."""

    def __init__(self, conn, context: ssl.SSLContext, server_hostname: str, timeout: float = 10.0):
        self.conn = conn
        self.timeout = timeout
        self._in = ssl.MemoryBIO()
        self._out = ssl.MemoryBIO()
        self._tls = context.wrap_bio(self._in, self._out, server_hostname=server_hostname)

    def _flush(self) -> None:
        data = self._out.read()
        if data:
            self.conn.sendall(data)

    def _fill(self) -> bool:
        data = self.conn.recv(_READ, self.timeout)
        if not data:
            self._in.write_eof()
            return False
        self._in.write(data)
        return True

    def handshake(self) -> None:
        while True:
            try:
                self._tls.do_handshake()
                self._flush()
                return
            except ssl.SSLWantReadError:
                self._flush()
                if not self._fill():
                    raise ConnectionResetError("closed during TLS handshake")

    def sendall(self, data: bytes) -> None:
        self._tls.write(data)
        self._flush()

    def recv(self, n: int = _READ) -> bytes:
        while True:
            try:
                return self._tls.read(n)
            except ssl.SSLWantReadError:
                if not self._fill():
                    return b""
            except ssl.SSLZeroReturnError:
                return b""

    def close(self) -> None:
        self.conn.close()


def fetch(client: TlsClient, host: str, size: int) -> bytes:
    """GET /bytes/<size>; returns the body."""
    client.sendall(
        f"GET /bytes/{size} HTTP/1.1\r\nHost: {host}\r\nConnection: close\r\n\r\n".encode()
    )
    buf = b""
    while b"\r\n\r\n" not in buf:
        chunk = client.recv()
        if not chunk:
            raise ConnectionResetError("no response head")
        buf += chunk
    head, body = buf.split(b"\r\n\r\n", 1)
    length = 0
    for line in head.split(b"\r\n")[1:]:
        name, _, value = line.partition(b":")
        if name.strip().lower() == b"content-length":
            length = int(value.strip())
    parts = [body]
    got = len(body)
    while got < length:
        chunk = client.recv()
        if not chunk:
            break
        parts.append(chunk)
        got += len(chunk)
    return b"".join(parts)


def _client_context(ca_pem: bytes) -> ssl.SSLContext:
    ctx = ssl.create_default_context(cadata=ca_pem.decode())
    ctx.minimum_version = ssl.TLSVersion.TLSv1_2
    return ctx


def _one_fetch(
    transport, target: Address, ctx: ssl.SSLContext, size: int
) -> Tuple[float, float, bytes]:
    """(establishment ms, transfer seconds, body)."""
    start = time.perf_counter()
    conn = transport.tcp_connect(target)
    client = TlsClient(conn, ctx, target[0])
    try:
        client.handshake()
        established = time.perf_counter()
        body = fetch(client, target[0], size)
        done = time.perf_counter()
    finally:
        client.close()
    return (established - start) * 1000.0, done - established, body


def tls_bench(
    sizes: Sequence[int] = (SMALL_OBJECT, LARGE_OBJECT),
    n: int = 25,
    config: Optional[ForwarderConfig] = None,
    gateway_ca: Optional[CaIdentity] = None,
) -> BenchReport:
    """Establishment time (smallest object) and goodput (largest), proxy on vs off."""
    config = config or ForwarderConfig()
    gateway_ca = gateway_ca or CaIdentity.generate("flowtap bench gateway CA")
    report = BenchReport(
        scenario="tls", config=config.to_dict(), declared_n=n, extra={"sizes": list(sizes)}
    )
    intact: Dict[str, bool] = {}
    with HttpsObjectServer() as server, tempfile.TemporaryDirectory() as tmp:
        origin_ca_file = Path(tmp) / "origin-ca.pem"
        origin_ca_file.write_bytes(server.origin_ca_pem)
        for label, proxy in (("proxy_off", False), ("proxy_on", True)):
            gate = None
            ctx = _client_context(server.origin_ca_pem)
            if proxy:
                gate = TlsGate(enabled=True, ca=gateway_ca, upstream_ca_file=origin_ca_file)
                ctx = _client_context(gateway_ca.cert_pem)
            with InprocGateway(config, tls_gate=gate) as gateway:
                for size in sizes:
                    expected = hashlib.sha256(b"\xa5" * size).hexdigest()
                    ok = True
                    for _ in range(n):
                        est_ms, seconds, body = _one_fetch(
                            gateway.transport, server.address, ctx, size
                        )
                        ok = ok and hashlib.sha256(body).hexdigest() == expected
                        if size == min(sizes):
                            report.add(f"{label}_establish_ms", est_ms)
                        if size == max(sizes) and seconds > 0:
                            report.add(f"{label}_mbps", len(body) * 8 / seconds / 1e6)
                    intact[f"{label}/{size}"] = ok
                if gate is not None:
                    report.extra["tls_outcomes"] = gate.snapshot()["outcomes"]
    report.extra["intact"] = intact
    if "proxy_off_mbps" in report.samples and "proxy_on_mbps" in report.samples:
        off, on = report.mean("proxy_off_mbps"), report.mean("proxy_on_mbps")
        report.extra["throughput_overhead_pct"] = (off - on) / off * 100.0 if off else None
    logger.info("TLS bench done: %s", report.extra)
    return report
