"""Bench transports: kernel sockets, or a virtual app host over ``MemoryTun``.

The in-process transport runs a real ``Forwarder`` thread against a
``MemoryTun``; the virtual host plays the app side, speaking IP packets to
it with just enough TCP to open, stream and close connections. Both
transports expose the same small client interface so every bench runs over
either one.
"""

import ipaddress
import itertools
import logging
import os
import queue
import random
import socket
import threading
import time
from typing import Dict, Optional, Tuple

from src.analyzer.events import EventSink
from src.analyzer.leaks import PatternSet
from src.analyzer.mirror_queue import MirrorQueue
from src.analyzer.sampling import FlowSampler
from src.analyzer.service import Analyzer
from src.flow_engine import FlowEngine, seq_add, seq_diff
from src.forwarder import Forwarder, ForwarderConfig
from src.packet_codec import (
    IpPacket,
    ParseError,
    TcpFlags,
    build_mss_option,
    make_tcp,
    make_udp,
    parse_packet,
    serialize_packet,
)
from src.tun import MemoryTun

logger = logging.getLogger("flowtap.bench.endpoint")

APP_NETWORK = "10.7.0.0/24"
APP_ADDRESS = "10.7.0.2"
RECV_BUFFER = 0xFFFF
SEND_WINDOW = 256 * 1024

Address = Tuple[str, int]


class TargetUnreachable(ConnectionError):
    """The bench target did not answer."""


# ---------------------------------------------------------------------------
# Kernel transport
# ---------------------------------------------------------------------------


class KernelUdpClient:
    def __init__(self, target: Address):
        self.target = target
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.connect(target)

    def send(self, data: bytes) -> None:
        self.sock.send(data)

    def recv(self, timeout: float) -> Optional[bytes]:
        self.sock.settimeout(timeout)
        try:
            return self.sock.recv(65535)
        except (socket.timeout, ConnectionRefusedError):
            return None

    def close(self) -> None:
        self.sock.close()


class KernelTcpClient:
    def __init__(self, sock: socket.socket):
        self.sock = sock

    def sendall(self, data: bytes) -> None:
        self.sock.sendall(data)

    def recv(self, n: int, timeout: Optional[float] = None) -> bytes:
        self.sock.settimeout(timeout)
        try:
            return self.sock.recv(n)
        except socket.timeout:
            raise TimeoutError("recv timed out") from None

    def shutdown_write(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass

    def close(self) -> None:
        self.sock.close()


class KernelTransport:
    """Plain sockets: the baseline, or the live TUN path when routes send them there."""

    name = "kernel"

    def udp_socket(self, target: Address) -> KernelUdpClient:
        return KernelUdpClient(target)

    def tcp_connect(self, target: Address, timeout: float = 5.0) -> KernelTcpClient:
        try:
            sock = socket.create_connection(target, timeout=timeout)
        except OSError as e:
            raise TargetUnreachable(f"{target[0]}:{target[1]}: {e}") from e
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return KernelTcpClient(sock)


# ---------------------------------------------------------------------------
# Virtual app host
# ---------------------------------------------------------------------------


class VirtualUdpSocket:
    def __init__(self, host: "VirtualHost", port: int, target: Address):
        self.host = host
        self.port = port
        self.target = target
        self._remote = ipaddress.ip_address(target[0])
        self._inbox: "queue.Queue[bytes]" = queue.Queue()

    def send(self, data: bytes) -> None:
        self.host.inject(make_udp(self.host.address, self.port, self._remote, self.target[1], data))

    def deliver(self, packet: IpPacket) -> None:
        self._inbox.put(packet.payload)

    def recv(self, timeout: float) -> Optional[bytes]:
        try:
            return self._inbox.get(timeout=timeout)
        except queue.Empty:
            return None

    def close(self) -> None:
        self.host.unregister(("udp", self.port, self.target))


class VirtualTcpConnection:
    """App-side TCP over the lossless in-memory TUN: no retransmission needed."""

    def __init__(self, host: "VirtualHost", port: int, target: Address):
        self.host = host
        self.port = port
        self.target = target
        self._remote = ipaddress.ip_address(target[0])
        self._cond = threading.Condition()
        self._isn = random.getrandbits(32)
        self.snd_nxt = self._isn
        self.snd_una = self._isn
        self.rcv_nxt = 0
        self.mss = host.mss
        self.established = False
        self.reset = False
        self.eof = False
        self.fin_sent = False
        self._buffer = bytearray()
        self._advertised = RECV_BUFFER

    # -- packet plumbing ----------------------------------------------------

    def _send(self, flags: TcpFlags, payload: bytes = b"", options: bytes = b"") -> None:
        with self._cond:
            window = max(0, RECV_BUFFER - len(self._buffer))
            self._advertised = window
            packet = make_tcp(
                self.host.address,
                self.port,
                self._remote,
                self.target[1],
                self.snd_nxt,
                self.rcv_nxt,
                flags,
                payload=payload,
                window=window,
                options=options,
            )
            self.snd_nxt = seq_add(self.snd_nxt, len(payload))
            if flags & (TcpFlags.SYN | TcpFlags.FIN):
                self.snd_nxt = seq_add(self.snd_nxt, 1)
            self.host.inject(packet)

    def deliver(self, p: IpPacket) -> None:
        reply = False
        with self._cond:
            if p.has(TcpFlags.RST):
                self.reset = True
                self._cond.notify_all()
                return
            if p.has(TcpFlags.ACK) and seq_diff(p.ack, self.snd_una) > 0:
                self.snd_una = p.ack
            if p.has(TcpFlags.SYN):
                if not self.established:
                    self.rcv_nxt = seq_add(p.seq, 1)
                    self.established = True
                reply = True
            elif p.payload or p.has(TcpFlags.FIN):
                if p.seq == self.rcv_nxt:
                    self._buffer += p.payload
                    self.rcv_nxt = seq_add(self.rcv_nxt, len(p.payload))
                    if p.has(TcpFlags.FIN):
                        self.rcv_nxt = seq_add(self.rcv_nxt, 1)
                        self.eof = True
                reply = True
            self._cond.notify_all()
        if reply:
            self._send(TcpFlags.ACK)

    # -- socket-like API ----------------------------------------------------

    def connect(self, timeout: float) -> "VirtualTcpConnection":
        self._send(TcpFlags.SYN, options=build_mss_option(self.mss))
        with self._cond:
            self._cond.wait_for(lambda: self.established or self.reset, timeout)
            if self.reset:
                raise TargetUnreachable(f"{self.target[0]}:{self.target[1]} refused")
            if not self.established:
                raise TargetUnreachable(f"{self.target[0]}:{self.target[1]} timed out")
        return self

    def sendall(self, data: bytes, timeout: float = 30.0) -> None:
        view = memoryview(data)
        deadline = time.monotonic() + timeout
        for start in range(0, len(view), self.mss):
            with self._cond:
                ok = self._cond.wait_for(
                    lambda: self.reset or seq_diff(self.snd_nxt, self.snd_una) < SEND_WINDOW,
                    max(0.0, deadline - time.monotonic()),
                )
                if self.reset:
                    raise ConnectionResetError("reset by gateway")
                if not ok:
                    raise TimeoutError("send window stayed full")
            self._send(TcpFlags.ACK | TcpFlags.PSH, bytes(view[start : start + self.mss]))

    def recv(self, n: int, timeout: Optional[float] = None) -> bytes:
        """Up to ``n`` bytes; b"" once the gateway sent FIN."""
        update = False
        with self._cond:
            ready = self._cond.wait_for(
                lambda: self._buffer or self.eof or self.reset, timeout
            )
            if self._buffer:
                data = bytes(self._buffer[:n])
                del self._buffer[:n]
                update = self._advertised < RECV_BUFFER // 2
            elif self.reset:
                raise ConnectionResetError("reset by gateway")
            elif self.eof:
                return b""
            elif not ready:
                raise TimeoutError("recv timed out")
            else:
                return b""
        if update:
            self._send(TcpFlags.ACK)  # window update
        return data

    def shutdown_write(self) -> None:
        if not self.fin_sent and not self.reset:
            self.fin_sent = True
            self._send(TcpFlags.FIN | TcpFlags.ACK)

    def close(self) -> None:
        self.shutdown_write()
        self.host.unregister(("tcp", self.port, self.target))

    def abort(self) -> None:
        if not self.reset:
            self._send(TcpFlags.RST | TcpFlags.ACK)
        self.host.unregister(("tcp", self.port, self.target))


class VirtualHost:
    """App endpoint on the far side of a ``MemoryTun``."""

    def __init__(self, tun: MemoryTun, address: str = APP_ADDRESS, mtu: int = 1500):
        self.tun = tun
        self.address = ipaddress.ip_address(address)
        self.mtu = mtu
        self.mss = mtu - 40
        self._ports = itertools.count(40000)
        self._endpoints: Dict[Tuple[str, int, Address], object] = {}
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self.stray = 0

    def start(self) -> "VirtualHost":
        self._thread = threading.Thread(target=self._receive, name="virtual-host", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(1.0)

    def inject(self, packet: IpPacket) -> None:
        self.tun.inject(serialize_packet(packet, self.mtu))

    def unregister(self, slot: Tuple[str, int, Address]) -> None:
        with self._lock:
            self._endpoints.pop(slot, None)

    def udp_socket(self, target: Address) -> VirtualUdpSocket:
        port = next(self._ports)
        sock = VirtualUdpSocket(self, port, target)
        with self._lock:
            self._endpoints[("udp", port, target)] = sock
        return sock

    def tcp_connect(self, target: Address, timeout: float = 5.0) -> VirtualTcpConnection:
        port = next(self._ports)
        conn = VirtualTcpConnection(self, port, target)
        with self._lock:
            self._endpoints[("tcp", port, target)] = conn
        try:
            return conn.connect(timeout)
        except TargetUnreachable:
            self.unregister(("tcp", port, target))
            raise

    def _receive(self) -> None:
        while not self._stop.is_set():
            data = self.tun.take_outbound(timeout=0.05)
            if data is None:
                continue
            try:
                p = parse_packet(data)
            except ParseError:
                self.stray += 1
                continue
            proto = "tcp" if p.is_tcp else "udp"
            with self._lock:
                endpoint = self._endpoints.get((proto, p.dst_port, (str(p.src_addr), p.src_port)))
            if endpoint is None:
                self.stray += 1
                continue
            endpoint.deliver(p)


class InprocTransport:
    name = "inproc"

    def __init__(self, host: VirtualHost):
        self.host = host

    def udp_socket(self, target: Address) -> VirtualUdpSocket:
        return self.host.udp_socket(target)

    def tcp_connect(self, target: Address, timeout: float = 5.0) -> VirtualTcpConnection:
        return self.host.tcp_connect(target, timeout)


# ---------------------------------------------------------------------------
# In-process gateway
# ---------------------------------------------------------------------------


class InprocGateway:
    """Forwarder (+ optional analyzer and TLS gate) over a ``MemoryTun``.

    ``stall_analyzer`` leaves the mirror queue without a consumer so it
    fills up and starts dropping.
    """

    def __init__(
        self,
        config: ForwarderConfig,
        analyzer: bool = False,
        patterns: Optional[PatternSet] = None,
        tls_gate=None,
        sampling_rate: float = 1.0,
        queue_capacity: int = 1000,
        stall_analyzer: bool = False,
        dns_ports: Tuple[int, ...] = (53,),
    ):
        self.tun = MemoryTun()
        self.engine = FlowEngine(mtu=1500)
        self.queue: Optional[MirrorQueue] = None
        self.analyzer: Optional[Analyzer] = None
        self.sampler = FlowSampler(sampling_rate)
        if analyzer:
            self.queue = MirrorQueue(queue_capacity)
            self._devnull = open(os.devnull, "w")
            self.analyzer = Analyzer(
                self.queue, EventSink(self._devnull), patterns=patterns, dns_ports=dns_ports
            )
        self.stall_analyzer = stall_analyzer
        self.forwarder = Forwarder(
            config,
            self.tun,
            self.engine,
            analyzer_tx=self.queue,
            tls_gate=tls_gate,
            sampler=self.sampler,
            local_net=ipaddress.ip_network(APP_NETWORK),
        )
        self.host = VirtualHost(self.tun)
        self.transport = InprocTransport(self.host)
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def start(self) -> "InprocGateway":
        self._thread = self.forwarder.start(self._stop)
        self.host.start()
        if self.analyzer is not None and not self.stall_analyzer:
            self.analyzer.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(2.0)
        self.host.stop()
        if self.analyzer is not None:
            if not self.stall_analyzer:
                self.analyzer.stop()
            self.analyzer.sink.close()
            self._devnull.close()

    def __enter__(self) -> "InprocGateway":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
