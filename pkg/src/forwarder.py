"""Polling forwarder loop.

One thread owns the TUN device, the socket set and the flow engine. Each
cycle reads up to ``c_tun`` packets from TUN, then up to ``c_nio``
packet-equivalents from ready sockets, executing the engine's actions as soon
as they are produced. When ``max_idle_cycles`` consecutive cycles read
nothing from either side, the loop sleeps ``idle_sleep_ms``. The sleep only
wakes early for shutdown; packets arriving meanwhile wait for the next cycle.
"""

import enum
import errno
import logging
import math
import queue
import selectors
import socket
import threading
import time
from collections import Counter, deque
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Deque, Dict, List, Optional, Set, Tuple

import numpy as np

from src.flow_engine import (
    CloseSocket,
    DivertToProxy,
    Drop,
    EngineAction,
    FlowEngine,
    FlowGone,
    MirrorToAnalyzer,
    OpenSocket,
    ReleaseFlow,
    SocketErrorKind,
    WriteProxy,
    WriteSocket,
    WriteTun,
)
from src.packet_codec import (
    PROTO_TCP,
    FlowKey,
    IpNetwork,
    ParseError,
    UnsupportedProtocol,
    parse_packet,
    serialize_packet,
)
from src.tun import TunClosed, TunDevice

logger = logging.getLogger("flowtap.forwarder")

GC_INTERVAL = 1.0
_RECV_CAP = 65536


class FatalSocketSetError(RuntimeError):
    """The readiness selector failed; the loop cannot continue."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


class Mode(str, enum.Enum):
    PERFORMANCE = "performance"
    LOW_POWER = "lowpower"
    CUSTOM = "custom"


# mode -> (idle_sleep_ms, max_idle_cycles)
MODE_PRESETS: Dict[Mode, Tuple[float, int]] = {
    Mode.PERFORMANCE: (10.0, 100),
    Mode.LOW_POWER: (100.0, 100),
}


@dataclass(frozen=True)
class ForwarderConfig:
    idle_sleep_ms: float = 10.0
    max_idle_cycles: int = 100
    c_tun: int = 100
    c_nio: int = 100
    mode: Mode = Mode.PERFORMANCE

    def __post_init__(self) -> None:
        for name in ("idle_sleep_ms", "max_idle_cycles", "c_tun", "c_nio"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        preset = MODE_PRESETS.get(self.mode)
        if preset and (self.idle_sleep_ms, self.max_idle_cycles) != preset:
            raise ValueError(
                f"mode {self.mode.value} requires is={preset[0]:g} ms, ic={preset[1]}"
            )

    @classmethod
    def for_mode(
        cls,
        mode: Mode,
        idle_sleep_ms: Optional[float] = None,
        max_idle_cycles: Optional[int] = None,
        c_tun: int = 100,
        c_nio: int = 100,
    ) -> "ForwarderConfig":
        mode = Mode(mode)
        if mode is Mode.CUSTOM:
            if idle_sleep_ms is None or max_idle_cycles is None:
                raise ValueError("custom mode needs idle_sleep_ms and max_idle_cycles")
            return cls(idle_sleep_ms, max_idle_cycles, c_tun, c_nio, mode)
        is_ms, ic = MODE_PRESETS[mode]
        return cls(is_ms, ic, c_tun, c_nio, mode)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["mode"] = self.mode.value
        return data


# ---------------------------------------------------------------------------
# Instrumentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LatencySample:
    t_proc: float  # seconds spent handling the packet
    t_buff: float  # seconds it waited for a sleeping loop
    direction: str  # "uplink" (TUN -> socket) or "downlink"
    protocol: str
    new_flow: bool


@dataclass(frozen=True)
class CycleTrace:
    cycle: int
    tun_packets: int
    socket_packets: int
    slept: bool


@dataclass
class LoopStats:
    config: ForwarderConfig
    cycles: int = 0
    tun_reads: int = 0
    socket_reads: int = 0
    sleeps: int = 0
    tun_writes: int = 0
    malformed: int = 0
    unsupported: int = 0
    socket_errors: int = 0
    tls_handoffs: int = 0
    drops: Counter = field(default_factory=Counter)
    samples: Deque[LatencySample] = field(default_factory=lambda: deque(maxlen=100_000))
    trace: Deque[CycleTrace] = field(default_factory=lambda: deque(maxlen=10_000))

    def snapshot(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "cycles": self.cycles,
            "tun_reads": self.tun_reads,
            "socket_reads": self.socket_reads,
            "sleeps": self.sleeps,
            "tun_writes": self.tun_writes,
            "malformed": self.malformed,
            "unsupported": self.unsupported,
            "socket_errors": self.socket_errors,
            "tls_handoffs": self.tls_handoffs,
            "drops": dict(self.drops),
        }


@dataclass
class LatencySummary:
    count: int
    mean_us: float
    median_us: float
    p95_us: float
    stdev_us: float


def summarize_samples(samples: List[LatencySample]) -> Dict[str, LatencySummary]:
    """Group samples by direction/protocol/new-vs-established."""
    groups: Dict[str, List[float]] = {}
    for s in samples:
        label = f"{s.direction}/{s.protocol}/{'new' if s.new_flow else 'established'}"
        groups.setdefault(label, []).append(s.t_proc * 1e6)
    result = {}
    for label, values in sorted(groups.items()):
        arr = np.asarray(values)
        result[label] = LatencySummary(
            count=len(arr),
            mean_us=float(arr.mean()),
            median_us=float(np.median(arr)),
            p95_us=float(np.percentile(arr, 95)),
            stdev_us=float(arr.std(ddof=1)) if len(arr) > 1 else 0.0,
        )
    return result


# ---------------------------------------------------------------------------
# Socket set
# ---------------------------------------------------------------------------


@dataclass
class _SocketEntry:
    key: FlowKey
    sock: socket.socket
    connecting: bool
    pending: bytearray = field(default_factory=bytearray)
    shutdown_after_flush: bool = False
    eof: bool = False


def _error_kind(err: int) -> SocketErrorKind:
    if err in (errno.ECONNREFUSED, errno.ENETUNREACH, errno.EHOSTUNREACH):
        return SocketErrorKind.REFUSED
    if err == errno.ETIMEDOUT:
        return SocketErrorKind.TIMEOUT
    return SocketErrorKind.RESET


class SocketSet:
    """Non-blocking sockets keyed by flow, polled through a selector."""

    def __init__(self, fwmark: Optional[int] = None):
        self.fwmark = fwmark
        self.selector = selectors.DefaultSelector()
        self._entries: Dict[FlowKey, _SocketEntry] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: FlowKey) -> bool:
        return key in self._entries

    def open(self, key: FlowKey) -> Tuple[Optional[socket.socket], Optional[SocketErrorKind], bool]:
        """Start connecting; returns (socket, immediate error, connected now)."""
        family = socket.AF_INET if key.remote_addr.version == 4 else socket.AF_INET6
        kind = socket.SOCK_STREAM if key.protocol == PROTO_TCP else socket.SOCK_DGRAM
        sock = socket.socket(family, kind)
        sock.setblocking(False)
        if self.fwmark:
            try:
                sock.setsockopt(socket.SOL_SOCKET, socket.SO_MARK, self.fwmark)
            except (OSError, AttributeError):
                logger.debug("SO_MARK unavailable for %s", key)
        if kind == socket.SOCK_STREAM:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        err = sock.connect_ex((str(key.remote_addr), key.remote_port))
        if err not in (0, errno.EINPROGRESS):
            sock.close()
            return None, _error_kind(err), False
        connecting = err == errno.EINPROGRESS
        entry = _SocketEntry(key, sock, connecting=connecting)
        self._entries[key] = entry
        events = selectors.EVENT_WRITE if connecting else selectors.EVENT_READ
        self.selector.register(sock, events, entry)
        return sock, None, not connecting

    def entry(self, key: FlowKey) -> Optional[_SocketEntry]:
        return self._entries.get(key)

    def _update_interest(self, entry: _SocketEntry) -> None:
        events = 0
        if entry.connecting or entry.pending:
            events |= selectors.EVENT_WRITE
        if not entry.connecting and not entry.eof:
            events |= selectors.EVENT_READ
        if events:
            self.selector.modify(entry.sock, events, entry)
        else:
            self.selector.unregister(entry.sock)
            entry.eof = True

    def mark_connected(self, entry: _SocketEntry) -> None:
        entry.connecting = False
        self._update_interest(entry)

    def mark_eof(self, entry: _SocketEntry) -> None:
        entry.eof = True
        try:
            self._update_interest(entry)
        except (KeyError, ValueError):
            pass

    def write(self, key: FlowKey, data: bytes) -> Optional[SocketErrorKind]:
        entry = self._entries.get(key)
        if entry is None or not data:
            return None
        if entry.sock.type == socket.SOCK_DGRAM:
            try:
                entry.sock.send(data)
            except (BlockingIOError, ConnectionRefusedError):
                # ICMP port unreachable from an earlier datagram; UDP carries on.
                pass
            except OSError as e:
                return _error_kind(e.errno or 0)
            return None
        if entry.pending or entry.connecting:
            entry.pending += data
            return None
        try:
            sent = entry.sock.send(data)
        except BlockingIOError:
            sent = 0
        except OSError as e:
            return _error_kind(e.errno or 0)
        if sent < len(data):
            entry.pending += data[sent:]
            self._update_interest(entry)
        return None

    def flush(self, entry: _SocketEntry) -> Optional[SocketErrorKind]:
        if entry.pending:
            try:
                sent = entry.sock.send(entry.pending)
            except BlockingIOError:
                sent = 0
            except OSError as e:
                return _error_kind(e.errno or 0)
            del entry.pending[:sent]
        if not entry.pending and entry.shutdown_after_flush:
            entry.shutdown_after_flush = False
            try:
                entry.sock.shutdown(socket.SHUT_WR)
            except OSError:
                pass
        self._update_interest(entry)
        return None

    def half_close(self, key: FlowKey) -> None:
        entry = self._entries.get(key)
        if entry is None:
            return
        if entry.pending or entry.connecting:
            entry.shutdown_after_flush = True
            return
        try:
            entry.sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass

    def detach(self, key: FlowKey) -> Optional[socket.socket]:
        """Hand the socket over to another owner (the TLS proxy)."""
        entry = self._entries.pop(key, None)
        if entry is None:
            return None
        try:
            self.selector.unregister(entry.sock)
        except (KeyError, ValueError):
            pass
        entry.sock.setblocking(True)
        return entry.sock

    def close(self, key: FlowKey) -> None:
        entry = self._entries.pop(key, None)
        if entry is None:
            return
        try:
            self.selector.unregister(entry.sock)
        except (KeyError, ValueError):
            pass
        entry.sock.close()

    def close_all(self) -> None:
        for key in list(self._entries):
            self.close(key)
        self.selector.close()

    def ready(self) -> List[Tuple[_SocketEntry, int]]:
        try:
            events = self.selector.select(timeout=0)
        except OSError as e:
            raise FatalSocketSetError(str(e)) from e
        return [(sk.data, mask) for sk, mask in events]


# ---------------------------------------------------------------------------
# Forwarder
# ---------------------------------------------------------------------------


class Forwarder:
    """Bridges a TUN device and the socket set through a ``FlowEngine``.

    ``analyzer_tx`` is anything with ``open_flow``/``enqueue_copy``/
    ``close_flow`` (normally ``src.analyzer.mirror_queue.MirrorQueue``);
    ``sampler`` decides per flow whether copies are mirrored at all.
    """

    def __init__(
        self,
        config: ForwarderConfig,
        tun: TunDevice,
        engine: FlowEngine,
        analyzer_tx: Any = None,
        tls_gate: Any = None,
        sampler: Any = None,
        local_net: Optional[IpNetwork] = None,
        fwmark: Optional[int] = None,
        instrument: bool = True,
    ):
        self._config = config
        self.tun = tun
        self.engine = engine
        self.analyzer_tx = analyzer_tx
        self.tls_gate = tls_gate
        self.sampler = sampler
        self.local_net = local_net
        self.instrument = instrument
        self.sockets = SocketSet(fwmark)
        self.stats = LoopStats(config=config)
        self._mirrored: Set[int] = set()
        self._proxies: Dict[FlowKey, Any] = {}
        self._proxy_carry: Dict[FlowKey, bytes] = {}
        self._sleep_started: Optional[float] = None
        self._last_gc = 0.0
        self.thread_native_id: Optional[int] = None
        if tls_gate is not None:
            engine.classifier = tls_gate.classify

    # -- configuration ------------------------------------------------------

    @property
    def config(self) -> ForwarderConfig:
        return self._config

    def set_mode(
        self,
        mode: Mode,
        idle_sleep_ms: Optional[float] = None,
        max_idle_cycles: Optional[int] = None,
    ) -> ForwarderConfig:
        """Swap (is, ic); the loop picks the new values up on its next cycle."""
        current = self._config
        new = ForwarderConfig.for_mode(
            mode, idle_sleep_ms, max_idle_cycles, c_tun=current.c_tun, c_nio=current.c_nio
        )
        self._config = new
        self.stats.config = new
        logger.info(
            "Forwarder mode -> %s (is=%g ms, ic=%d)",
            new.mode.value,
            new.idle_sleep_ms,
            new.max_idle_cycles,
        )
        return new

    # -- main loop ----------------------------------------------------------

    def run(self, stop: threading.Event) -> LoopStats:
        self.thread_native_id = threading.get_native_id()
        logger.info("Forwarder loop starting: %s", self._config.to_dict())
        idle = 0
        try:
            while not stop.is_set():
                cfg = self._config
                self.stats.cycles += 1
                tun_count = self._tun_phase(cfg)
                sock_count = self._socket_phase(cfg)
                sock_count += self._proxy_phase(cfg)
                slept = False
                if tun_count or sock_count:
                    idle = 0
                    self._sleep_started = None
                else:
                    idle += 1
                    if idle >= cfg.max_idle_cycles:
                        self.stats.sleeps += 1
                        self._sleep_started = time.perf_counter()
                        slept = True
                        idle = 0
                        stop.wait(cfg.idle_sleep_ms / 1000.0)
                if self.instrument:
                    self.stats.trace.append(
                        CycleTrace(self.stats.cycles, tun_count, sock_count, slept)
                    )
                now = time.monotonic()
                if now - self._last_gc >= GC_INTERVAL:
                    self._last_gc = now
                    self._execute(self.engine.gc(now))
        except TunClosed:
            logger.info("TUN device closed; forwarder stopping")
        finally:
            self._shutdown()
        return self.stats

    def start(self, stop: threading.Event) -> threading.Thread:
        thread = threading.Thread(target=self.run, args=(stop,), name="forwarder", daemon=True)
        thread.start()
        return thread

    def _shutdown(self) -> None:
        try:
            self._execute(self.engine.shutdown())
        except TunClosed:
            pass
        except Exception:
            logger.exception("Error while draining flows")
        for proxy in list(self._proxies.values()):
            proxy.abort()
        self._proxies.clear()
        self.sockets.close_all()
        logger.info("Forwarder stopped after %d cycles", self.stats.cycles)

    # -- TUN side -----------------------------------------------------------

    def _tun_phase(self, cfg: ForwarderConfig) -> int:
        read_timed = getattr(self.tun, "read_timed", None)
        if read_timed is not None:
            frames = read_timed(cfg.c_tun)
        else:
            frames = [(data, None) for data in self.tun.read_packets(cfg.c_tun)]
        for data, arrived in frames:
            picked = time.perf_counter()
            self.stats.tun_reads += 1
            try:
                packet = parse_packet(data)
            except UnsupportedProtocol:
                self.stats.unsupported += 1
                continue
            except ParseError as e:
                self.stats.malformed += 1
                logger.debug("Dropping malformed TUN packet: %s", e)
                continue
            key = FlowKey(
                packet.protocol, packet.src_addr, packet.src_port, packet.dst_addr, packet.dst_port
            )
            new_flow = key not in self.engine
            self._execute(self.engine.on_tun_packet(packet, time.monotonic()))
            if self.instrument:
                self._record(picked, arrived, "uplink", packet.protocol, new_flow)
        return len(frames)

    def _record(
        self,
        picked: float,
        arrived: Optional[float],
        direction: str,
        protocol: int,
        new_flow: bool,
    ) -> None:
        done = time.perf_counter()
        if arrived is not None:
            t_buff = max(0.0, picked - arrived)
        elif self._sleep_started is not None:
            t_buff = max(0.0, picked - self._sleep_started)
        else:
            t_buff = 0.0
        self.stats.samples.append(
            LatencySample(
                t_proc=done - picked,
                t_buff=t_buff,
                direction=direction,
                protocol="tcp" if protocol == PROTO_TCP else "udp",
                new_flow=new_flow,
            )
        )

    # -- socket side --------------------------------------------------------

    def _socket_phase(self, cfg: ForwarderConfig) -> int:
        budget = cfg.c_nio
        packets = 0
        for entry, mask in self.sockets.ready():
            key = entry.key
            if key not in self.sockets:
                continue
            if mask & selectors.EVENT_WRITE:
                if entry.connecting:
                    self._finish_connect(entry)
                    continue
                err = self.sockets.flush(entry)
                if err is not None:
                    self._socket_failed(key, err)
                    continue
            if mask & selectors.EVENT_READ and budget > 0 and not entry.eof:
                got = self._read_socket(entry, budget)
                budget -= got
                packets += got
        return packets

    def _finish_connect(self, entry: Any) -> None:
        err = entry.sock.getsockopt(socket.SOL_SOCKET, socket.SO_ERROR)
        if err:
            self._socket_failed(entry.key, _error_kind(err))
            return
        self.sockets.mark_connected(entry)
        try:
            self._execute(self.engine.on_socket_connected(entry.key))
        except FlowGone:
            self.sockets.close(entry.key)

    def _socket_failed(self, key: FlowKey, kind: SocketErrorKind) -> None:
        self.stats.socket_errors += 1
        self.sockets.close(key)
        self._execute(self.engine.on_socket_error(key, kind, time.monotonic()))

    def _read_socket(self, entry: Any, budget: int) -> int:
        key = entry.key
        record = self.engine.get(key)
        if record is None:
            self.sockets.close(key)
            return 0
        if key.protocol != PROTO_TCP:
            count = 0
            while count < budget:
                picked = time.perf_counter()
                try:
                    data = entry.sock.recv(_RECV_CAP)
                except BlockingIOError:
                    break
                except ConnectionRefusedError:
                    break
                except OSError as e:
                    self._socket_failed(key, _error_kind(e.errno or 0))
                    break
                count += 1
                self.stats.socket_reads += 1
                self._execute(self.engine.on_socket_data(key, data, time.monotonic()))
                if self.instrument:
                    self._record(picked, None, "downlink", key.protocol, False)
            return count

        mss = record.tcp.mss
        capacity = self.engine.send_capacity(key)
        if capacity <= 0:
            return 0
        picked = time.perf_counter()
        try:
            data = entry.sock.recv(min(capacity, budget * mss, _RECV_CAP))
        except BlockingIOError:
            return 0
        except OSError as e:
            self._socket_failed(key, _error_kind(e.errno or 0))
            return 0
        self.stats.socket_reads += 1
        if not data:
            self.sockets.mark_eof(entry)
            self._execute(self.engine.on_socket_data(key, b"", time.monotonic()))
            return 1
        self._execute(self.engine.on_socket_data(key, data, time.monotonic()))
        if self.instrument:
            self._record(picked, None, "downlink", PROTO_TCP, False)
        return math.ceil(len(data) / mss)

    # -- TLS proxy handoff --------------------------------------------------

    def _proxy_phase(self, cfg: ForwarderConfig) -> int:
        """Move proxy output toward the app, respecting the app's window."""
        if not self._proxies:
            return 0
        budget = cfg.c_nio
        packets = 0
        for key, proxy in list(self._proxies.items()):
            record = self.engine.get(key)
            if record is None:
                continue
            mss = record.tcp.mss
            while budget > 0:
                capacity = min(self.engine.send_capacity(key), budget * mss)
                if capacity <= 0:
                    break
                chunk = self._proxy_carry.pop(key, None)
                if chunk is None:
                    try:
                        chunk = proxy.app_out.get_nowait()
                    except queue.Empty:
                        break
                if isinstance(chunk, BaseException):
                    self._proxies.pop(key, None)
                    self._execute(
                        self.engine.on_socket_error(key, SocketErrorKind.RESET, time.monotonic())
                    )
                    packets += 1
                    break
                if not chunk:
                    self._proxies.pop(key, None)
                    self._execute(self.engine.on_socket_data(key, b"", time.monotonic()))
                    packets += 1
                    break
                if len(chunk) > capacity:
                    chunk, self._proxy_carry[key] = chunk[:capacity], chunk[capacity:]
                self._execute(
                    self.engine.on_socket_data(key, chunk, time.monotonic(), mirror=False)
                )
                used = math.ceil(len(chunk) / mss)
                budget -= used
                packets += used
        return packets

    # -- action execution ---------------------------------------------------

    def _execute(self, actions: List[EngineAction]) -> None:
        for action in actions:
            if isinstance(action, WriteTun):
                self.tun.write_packet(serialize_packet(action.packet, self.engine.mtu))
                self.stats.tun_writes += 1
            elif isinstance(action, WriteSocket):
                err = self.sockets.write(action.key, action.data)
                if err is not None:
                    self._socket_failed(action.key, err)
            elif isinstance(action, MirrorToAnalyzer):
                if self.analyzer_tx is not None and action.flow_id in self._mirrored:
                    self.analyzer_tx.enqueue_copy(
                        action.flow_id, action.direction, action.data, time.monotonic()
                    )
            elif isinstance(action, Drop):
                self.stats.drops[action.reason.value] += 1
            elif isinstance(action, OpenSocket):
                self._open(action)
            elif isinstance(action, CloseSocket):
                self._close(action)
            elif isinstance(action, WriteProxy):
                proxy = self._proxies.get(action.key)
                if proxy is not None:
                    proxy.feed_app(action.data)
            elif isinstance(action, DivertToProxy):
                self._divert(action)
            elif isinstance(action, ReleaseFlow):
                self._release(action)

    def _open(self, action: OpenSocket) -> None:
        key = action.key
        if self.analyzer_tx is not None and (
            self.sampler is None or self.sampler.admit(key)
        ):
            self._mirrored.add(action.flow_id)
            self.analyzer_tx.open_flow(action.flow_id, key, time.monotonic())
        sock, err, connected = self.sockets.open(key)
        if err is not None:
            self.stats.socket_errors += 1
            # Attach nothing: the flow goes straight to Closed with a RST.
            self._execute(self.engine.on_socket_error(key, err, time.monotonic()))
            return
        self.engine.attach_socket(key, sock)
        if connected:
            self._execute(self.engine.on_socket_connected(key))

    def _close(self, action: CloseSocket) -> None:
        proxy = self._proxies.get(action.key)
        if proxy is not None:
            if action.half_close:
                proxy.close_app()
            else:
                self._proxies.pop(action.key, None)
                proxy.abort()
            return
        if action.half_close:
            self.sockets.half_close(action.key)
        else:
            self.sockets.close(action.key)

    def _divert(self, action: DivertToProxy) -> None:
        record = self.engine.get(action.key)
        sock = self.sockets.detach(action.key)
        if record is None or sock is None or self.tls_gate is None:
            self._execute(
                self.engine.on_socket_error(action.key, SocketErrorKind.RESET, time.monotonic())
            )
            return
        self.stats.tls_handoffs += 1
        flow_id = record.analyzer_flow_id
        mirror = self.analyzer_tx if flow_id in self._mirrored else None
        proxy = self.tls_gate.start_proxy(
            action.key, sock, action.meta, action.data, mirror, flow_id
        )
        self._proxies[action.key] = proxy

    def _release(self, action: ReleaseFlow) -> None:
        self.sockets.close(action.key)
        proxy = self._proxies.pop(action.key, None)
        if proxy is not None:
            proxy.abort()
        self._proxy_carry.pop(action.key, None)
        if action.flow_id in self._mirrored:
            self._mirrored.discard(action.flow_id)
            self.analyzer_tx.close_flow(
                action.flow_id, action.bytes_up, action.bytes_down, time.monotonic()
            )

    # -- reporting ----------------------------------------------------------

    def packet_latency_probe(self, n: Optional[int] = None) -> Dict[str, LatencySummary]:
        """Summaries of the last ``n`` latency samples (all when ``n`` is None)."""
        samples = list(self.stats.samples)
        if n is not None:
            samples = samples[-n:]
        return summarize_samples(samples)

    def status(self) -> dict:
        snap = self.stats.snapshot()
        snap["flows"] = len(self.engine)
        snap["sockets"] = len(self.sockets)
        snap["tls_proxies"] = len(self._proxies)
        return snap


__all__ = [
    "CycleTrace",
    "FatalSocketSetError",
    "Forwarder",
    "ForwarderConfig",
    "LatencySample",
    "LatencySummary",
    "LoopStats",
    "MODE_PRESETS",
    "Mode",
    "SocketSet",
    "summarize_samples",
]
