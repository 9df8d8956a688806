"""Servers the benches talk to: echo, speed test, HTTPS objects and a slow resolver.

Everything binds to an ephemeral port by default and runs on daemon
threads, so a bench can start what it needs and stop it afterwards.
"""

import logging
import re
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Dict, List, Optional, Tuple

from dnslib import QTYPE, RR, A, DNSRecord
from dnslib.server import BaseResolver, DNSServer

from src.tls_gate.ca import CaIdentity

logger = logging.getLogger("flowtap.bench.servers")

SPEED_UPLOAD = b"U"
SPEED_DOWNLOAD = b"D"
SPEED_CHUNK = 64 * 1024
_BYTES_PATH = re.compile(r"^/bytes/(\d+)$")


class _Server:
    """Start/stop plumbing shared by the bundled servers."""

    name = "server"

    def __init__(self) -> None:
        self._threads: List[threading.Thread] = []

    def _spawn(self, target: Callable[[], None], suffix: str = "") -> None:
        thread = threading.Thread(target=target, name=f"{self.name}{suffix}", daemon=True)
        thread.start()
        self._threads.append(thread)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def start(self):
        raise NotImplementedError

    def stop(self) -> None:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Echo
# ---------------------------------------------------------------------------


class _TcpEchoHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        while True:
            try:
                data = self.request.recv(65536)
            except OSError:
                return
            if not data:
                return
            self.request.sendall(data)


class _ThreadingTcpServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class EchoServer(_Server):
    """UDP and TCP echo on the same port number."""

    name = "echo"

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        super().__init__()
        self.host = host
        self._tcp = _ThreadingTcpServer((host, port), _TcpEchoHandler)
        self.port = self._tcp.server_address[1]
        self._udp = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._udp.bind((host, self.port))
        self._udp.settimeout(0.2)
        self._running = threading.Event()
        self.udp_echoed = 0

    @property
    def address(self) -> Tuple[str, int]:
        return self.host, self.port

    def start(self) -> "EchoServer":
        self._running.set()
        self._spawn(self._tcp.serve_forever, "-tcp")
        self._spawn(self._serve_udp, "-udp")
        logger.info("Echo server on %s:%d (tcp+udp)", self.host, self.port)
        return self

    def _serve_udp(self) -> None:
        while self._running.is_set():
            try:
                data, peer = self._udp.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                return
            self.udp_echoed += 1
            self._udp.sendto(data, peer)

    def stop(self) -> None:
        self._running.clear()
        self._tcp.shutdown()
        self._tcp.server_close()
        self._udp.close()


# ---------------------------------------------------------------------------
# Speed test
# ---------------------------------------------------------------------------


class _SpeedHandler(socketserver.BaseRequestHandler):
    """First byte picks the direction: ``U`` sinks the upload, ``D`` streams."""

    def handle(self) -> None:
        sock: socket.socket = self.request
        command = sock.recv(1)
        if command == SPEED_UPLOAD:
            total = 0
            while True:
                try:
                    data = sock.recv(SPEED_CHUNK)
                except OSError:
                    break
                if not data:
                    break
                total += len(data)
            try:
                sock.sendall(struct.pack("!Q", total))
            except OSError:
                pass
        elif command == SPEED_DOWNLOAD:
            chunk = b"\x00" * SPEED_CHUNK
            try:
                while True:
                    sock.sendall(chunk)
            except OSError:
                pass


class SpeedServer(_Server):
    name = "speed"

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        super().__init__()
        self.host = host
        self._tcp = _ThreadingTcpServer((host, port), _SpeedHandler)
        self.port = self._tcp.server_address[1]

    @property
    def address(self) -> Tuple[str, int]:
        return self.host, self.port

    def start(self) -> "SpeedServer":
        self._spawn(self._tcp.serve_forever)
        logger.info("Speed server on %s:%d", self.host, self.port)
        return self

    def stop(self) -> None:
        self._tcp.shutdown()
        self._tcp.server_close()


# ---------------------------------------------------------------------------
# HTTPS objects
# ---------------------------------------------------------------------------


class _BytesHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def do_GET(self) -> None:
        match = _BYTES_PATH.match(self.path)
        if not match:
            self.send_error(404)
            return
        size = int(match.group(1))
        self.send_response(200)
        self.send_header("Content-Type", "application/octet-stream")
        self.send_header("Content-Length", str(size))
        self.end_headers()
        chunk = b"\xa5" * SPEED_CHUNK
        remaining = size
        while remaining > 0:
            n = min(remaining, len(chunk))
            self.wfile.write(chunk[:n])
            remaining -= n

    def log_message(self, format: str, *args) -> None:
        logger.debug("https %s", format % args)


class HttpsObjectServer(_Server):
    """``GET /bytes/<n>`` returns ``n`` bytes over TLS.

    The certificate comes from a private origin CA; clients trust
    ``origin_ca_pem`` (and, through the proxy, the gateway CA instead).
    """

    name = "https"

    def __init__(
        self, host: str = "127.0.0.1", port: int = 0, origin_ca: Optional[CaIdentity] = None
    ):
        super().__init__()
        self.host = host
        self.origin_ca = origin_ca or CaIdentity.generate("flowtap bench origin CA")
        self._httpd = ThreadingHTTPServer((host, port), _BytesHandler)
        self._httpd.daemon_threads = True
        context = self.origin_ca.server_context(host)
        self._httpd.socket = context.wrap_socket(self._httpd.socket, server_side=True)
        self.port = self._httpd.server_address[1]

    @property
    def address(self) -> Tuple[str, int]:
        return self.host, self.port

    @property
    def origin_ca_pem(self) -> bytes:
        return self.origin_ca.cert_pem

    def url(self, size: int) -> str:
        return f"https://{self.host}:{self.port}/bytes/{size}"

    def start(self) -> "HttpsObjectServer":
        self._spawn(self._httpd.serve_forever)
        logger.info("HTTPS object server on %s:%d", self.host, self.port)
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()


# ---------------------------------------------------------------------------
# Delaying resolver
# ---------------------------------------------------------------------------


@dataclass
class ResolverStamp:
    """Capture stand-in: when the query arrived and the answer left."""

    qname: str
    received: float
    answered: float


class DelayingResolver(BaseResolver):
    def __init__(self, delay: Callable[[], float], answer: str = "192.0.2.10", ttl: int = 60):
        self.delay = delay
        self.answer = answer
        self.ttl = ttl
        self.stamps: Dict[str, ResolverStamp] = {}
        self._lock = threading.Lock()

    def resolve(self, request: DNSRecord, handler) -> DNSRecord:
        received = time.perf_counter()
        qname = str(request.q.qname).rstrip(".").lower()
        pause = self.delay()
        if pause > 0:
            time.sleep(pause)
        reply = request.reply()
        if request.q.qtype == QTYPE.A:
            reply.add_answer(RR(request.q.qname, QTYPE.A, rdata=A(self.answer), ttl=self.ttl))
        with self._lock:
            # the send happens right after this returns
            self.stamps[qname] = ResolverStamp(qname, received, time.perf_counter())
        return reply


class DnsBenchServer(_Server):
    """dnslib UDP server around a ``DelayingResolver``."""

    name = "dns"

    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = 0,
        delay: Callable[[], float] = lambda: 0.0,
        answer: str = "192.0.2.10",
    ):
        super().__init__()
        self.host = host
        self.resolver = DelayingResolver(delay, answer)
        if port == 0:
            port = _free_udp_port(host)
        self.port = port
        self._server = DNSServer(self.resolver, address=host, port=port, logger=_QuietDnsLogger())

    @property
    def address(self) -> Tuple[str, int]:
        return self.host, self.port

    def start(self) -> "DnsBenchServer":
        self._server.start_thread()
        logger.info("DNS bench resolver on %s:%d", self.host, self.port)
        return self

    def stop(self) -> None:
        self._server.stop()
        self._server.server.server_close()


class _QuietDnsLogger:
    """dnslib logs every request to stdout by default."""

    def log_recv(self, handler, data) -> None:
        pass

    def log_send(self, handler, data) -> None:
        pass

    def log_request(self, handler, request) -> None:
        pass

    def log_reply(self, handler, reply) -> None:
        pass

    def log_truncated(self, handler, reply) -> None:
        pass

    def log_error(self, handler, e) -> None:
        logger.debug("dns bench resolver error: %s", e)

    def log_data(self, dnsobj) -> None:
        pass


def _free_udp_port(host: str) -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        s.bind((host, 0))
        return s.getsockname()[1]
