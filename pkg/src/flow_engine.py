"""Shadow layer-3/4 stack.

Maps packets read from the TUN device onto socket byte streams and back. The
engine performs no I/O: every operation returns a list of ``EngineAction``
values that the forwarder loop executes. All methods are called from the
forwarder thread only.

TCP handling in short:

  SYN from app     -> record in SynReceived, OpenSocket
  socket attached  -> Connecting
  connect done     -> SYN/ACK to app, Established
  app data         -> WriteSocket (+ mirror) and an ACK toward the app
  pure ACK         -> updates the app's ack/window, otherwise dropped
  FIN either side  -> half close, Closed once both sides are done
"""

import enum
import logging
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Deque, Dict, Iterator, List, Optional, Union

from src.packet_codec import (
    DEFAULT_MTU,
    IPV4_HEADER_LEN,
    IPV6_HEADER_LEN,
    PROTO_TCP,
    PROTO_UDP,
    TCP_HEADER_LEN,
    Direction,
    FlowKey,
    IpPacket,
    TcpFlags,
    build_mss_option,
    make_tcp,
    make_udp,
    mss_option_value,
)

logger = logging.getLogger("flowtap.flow_engine")

_SEQ_MOD = 1 << 32

APP_WINDOW = 0xFFFF  # advertised toward the app, no window scaling
REORDER_LIMIT = 64 * 1024
CLOSED_LINGER = 2.0
TCP_IDLE_TTL = 300.0
UDP_IDLE_TTL = 60.0
DNS_IDLE_TTL = 10.0
DEFAULT_MAX_FLOWS = 65536


def seq_add(a: int, n: int) -> int:
    return (a + n) % _SEQ_MOD


def seq_diff(a: int, b: int) -> int:
    """Signed distance ``a - b`` in 32-bit sequence space."""
    d = (a - b) % _SEQ_MOD
    return d - _SEQ_MOD if d >= 1 << 31 else d


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


class FlowGone(KeyError):
    """Operation addressed a flow that is no longer in the table."""


class TcpPhase(enum.Enum):
    SYN_RECEIVED = "SynReceived"
    CONNECTING = "Connecting"
    ESTABLISHED = "Established"
    APP_FIN_SENT = "AppFinSent"
    REMOTE_CLOSED = "RemoteClosed"
    CLOSED = "Closed"


_ALLOWED_TRANSITIONS = {
    TcpPhase.SYN_RECEIVED: {TcpPhase.CONNECTING, TcpPhase.CLOSED},
    TcpPhase.CONNECTING: {TcpPhase.ESTABLISHED, TcpPhase.CLOSED},
    TcpPhase.ESTABLISHED: {TcpPhase.APP_FIN_SENT, TcpPhase.REMOTE_CLOSED, TcpPhase.CLOSED},
    TcpPhase.APP_FIN_SENT: {TcpPhase.CLOSED},
    TcpPhase.REMOTE_CLOSED: {TcpPhase.CLOSED},
    TcpPhase.CLOSED: set(),
}


class TlsStatus(enum.Enum):
    UNDECIDED = "undecided"
    NOT_TLS = "not_tls"
    INTERCEPTED = "intercepted"
    WHITELISTED = "whitelisted"


class DropReason(str, enum.Enum):
    PURE_ACK = "pure-ack"
    RETRANSMIT = "retransmit"
    OUT_OF_WINDOW = "out-of-window"
    UNKNOWN_FLOW = "unknown-flow"  # TCP non-SYN for an absent flow
    TABLE_FULL = "table-full"
    CLOSED_FLOW = "closed-flow"
    DUPLICATE_SYN = "duplicate-syn"


class SocketErrorKind(str, enum.Enum):
    REFUSED = "refused"
    RESET = "reset"
    TIMEOUT = "timeout"


class StreamVerdict(enum.Enum):
    PASS = "pass"
    NEED_MORE = "need_more"
    DIVERT = "divert"
    BYPASS = "bypass"  # TLS, but relayed unmodified (whitelisted/unsupported)


@dataclass
class Classification:
    verdict: StreamVerdict
    meta: Any = None


# (key, bytes seen so far) -> Classification
StreamClassifier = Callable[[FlowKey, bytes], Classification]


@dataclass
class TcpShadowState:
    app_isn: int
    local_isn: int
    local_seq: int
    local_ack: int
    mss: int
    created_at: float
    last_activity: float
    phase: TcpPhase = TcpPhase.SYN_RECEIVED
    app_window: int = APP_WINDOW
    app_acked: int = 0
    app_bytes_accepted: int = 0
    reorder: Dict[int, bytes] = field(default_factory=dict)
    reorder_bytes: int = 0
    closed_at: Optional[float] = None

    def move_to(self, phase: TcpPhase) -> None:
        if phase is self.phase:
            return
        if phase not in _ALLOWED_TRANSITIONS[self.phase]:
            raise RuntimeError(f"illegal TCP transition {self.phase.value} -> {phase.value}")
        self.phase = phase


@dataclass
class UdpMapping:
    created_at: float
    last_activity: float
    idle_ttl: float


@dataclass
class FlowRecord:
    key: FlowKey
    transport: Union[TcpShadowState, UdpMapping]
    analyzer_flow_id: int
    socket_handle: Any = None
    bytes_up: int = 0
    bytes_down: int = 0
    tls_status: TlsStatus = TlsStatus.UNDECIDED
    hello_buffer: bytes = b""

    @property
    def tcp(self) -> TcpShadowState:
        assert isinstance(self.transport, TcpShadowState)
        return self.transport

    @property
    def is_tcp(self) -> bool:
        return isinstance(self.transport, TcpShadowState)

    @property
    def last_activity(self) -> float:
        return self.transport.last_activity


# ---------------------------------------------------------------------------
# Actions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OpenSocket:
    key: FlowKey
    flow_id: int


@dataclass(frozen=True)
class WriteSocket:
    key: FlowKey
    data: bytes


@dataclass(frozen=True)
class WriteTun:
    packet: IpPacket


@dataclass(frozen=True)
class CloseSocket:
    key: FlowKey
    half_close: bool = False


@dataclass(frozen=True)
class Drop:
    reason: DropReason
    key: Optional[FlowKey] = None


@dataclass(frozen=True)
class MirrorToAnalyzer:
    flow_id: int
    key: FlowKey
    direction: Direction
    data: bytes


@dataclass(frozen=True)
class DivertToProxy:
    key: FlowKey
    meta: Any
    data: bytes


@dataclass(frozen=True)
class WriteProxy:
    key: FlowKey
    data: bytes


@dataclass(frozen=True)
class ReleaseFlow:
    key: FlowKey
    flow_id: int
    bytes_up: int
    bytes_down: int


EngineAction = Union[
    OpenSocket,
    WriteSocket,
    WriteTun,
    CloseSocket,
    Drop,
    MirrorToAnalyzer,
    DivertToProxy,
    WriteProxy,
    ReleaseFlow,
]


def _pass_all(key: FlowKey, data: bytes) -> Classification:
    return Classification(StreamVerdict.PASS)


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------


class FlowEngine:
    """Single-owner flow table and TCP/UDP shadow state machine."""

    def __init__(
        self,
        mtu: int = DEFAULT_MTU,
        max_flows: int = DEFAULT_MAX_FLOWS,
        tcp_idle_ttl: float = TCP_IDLE_TTL,
        udp_idle_ttl: float = UDP_IDLE_TTL,
        dns_idle_ttl: float = DNS_IDLE_TTL,
        classifier: Optional[StreamClassifier] = None,
        rng: Optional[random.Random] = None,
    ):
        self.mtu = mtu
        self.max_flows = max_flows
        self.tcp_idle_ttl = tcp_idle_ttl
        self.udp_idle_ttl = udp_idle_ttl
        self.dns_idle_ttl = dns_idle_ttl
        self.classifier: StreamClassifier = classifier or _pass_all
        self._rng = rng or random.SystemRandom()
        self._flows: Dict[FlowKey, FlowRecord] = {}
        self._next_flow_id = 1

    # -- table access -------------------------------------------------------

    def __len__(self) -> int:
        return len(self._flows)

    def __contains__(self, key: FlowKey) -> bool:
        return key in self._flows

    def get(self, key: FlowKey) -> Optional[FlowRecord]:
        return self._flows.get(key)

    def flows(self) -> Iterator[FlowRecord]:
        return iter(list(self._flows.values()))

    def mss_for(self, version: int) -> int:
        return self.mtu - (IPV4_HEADER_LEN if version == 4 else IPV6_HEADER_LEN) - TCP_HEADER_LEN

    def _new_flow_id(self) -> int:
        flow_id = self._next_flow_id
        self._next_flow_id += 1
        return flow_id

    # -- TUN side -----------------------------------------------------------

    def on_tun_packet(self, p: IpPacket, now: float) -> List[EngineAction]:
        """Handle one packet read from the TUN device (app -> remote)."""
        key = FlowKey(p.protocol, p.src_addr, p.src_port, p.dst_addr, p.dst_port)
        if p.protocol == PROTO_UDP:
            return self._on_tun_udp(key, p, now)
        if p.protocol == PROTO_TCP:
            return self._on_tun_tcp(key, p, now)
        raise ValueError(f"unsupported protocol {p.protocol}")

    def _on_tun_udp(self, key: FlowKey, p: IpPacket, now: float) -> List[EngineAction]:
        actions: List[EngineAction] = []
        record = self._flows.get(key)
        if record is None:
            if len(self._flows) >= self.max_flows:
                return [Drop(DropReason.TABLE_FULL, key)]
            ttl = self.dns_idle_ttl if key.remote_port == 53 else self.udp_idle_ttl
            record = FlowRecord(
                key=key,
                transport=UdpMapping(created_at=now, last_activity=now, idle_ttl=ttl),
                analyzer_flow_id=self._new_flow_id(),
                tls_status=TlsStatus.NOT_TLS,
            )
            self._flows[key] = record
            actions.append(OpenSocket(key, record.analyzer_flow_id))
        record.transport.last_activity = now
        record.bytes_up += len(p.payload)
        actions.append(WriteSocket(key, p.payload))
        actions.append(
            MirrorToAnalyzer(record.analyzer_flow_id, key, Direction.OUTBOUND, p.payload)
        )
        return actions

    def _on_tun_tcp(self, key: FlowKey, p: IpPacket, now: float) -> List[EngineAction]:
        record = self._flows.get(key)
        if record is None:
            if p.has(TcpFlags.SYN) and not p.has(TcpFlags.ACK):
                return self._open_tcp(key, p, now)
            if p.has(TcpFlags.RST):
                return [Drop(DropReason.UNKNOWN_FLOW, key)]
            return [WriteTun(self._reset_for(p)), Drop(DropReason.UNKNOWN_FLOW, key)]

        st = record.tcp
        if st.phase is TcpPhase.CLOSED and p.flags & TcpFlags.SYN and not p.flags & TcpFlags.ACK:
            # Port reused while the old record lingers.
            return self._release(record) + self._open_tcp(key, p, now)
        st.last_activity = now
        if p.has(TcpFlags.RST):
            if st.phase is TcpPhase.CLOSED:
                return [Drop(DropReason.CLOSED_FLOW, key)]
            return self._teardown(record, now, send_rst=False)

        if p.has(TcpFlags.SYN):
            if (
                st.phase is TcpPhase.ESTABLISHED
                and p.seq == st.app_isn
                and st.local_seq == seq_add(st.local_isn, 1)
            ):
                # SYN/ACK lost; repeat it.
                return [WriteTun(self._synack(record))]
            return [Drop(DropReason.DUPLICATE_SYN, key)]

        if st.phase in (TcpPhase.SYN_RECEIVED, TcpPhase.CONNECTING):
            return [Drop(DropReason.OUT_OF_WINDOW, key)]

        if p.has(TcpFlags.ACK):
            self._note_app_ack(st, p)

        if st.phase is TcpPhase.CLOSED:
            if p.has(TcpFlags.FIN):
                return [WriteTun(self._ack_packet(record))]
            return [Drop(DropReason.CLOSED_FLOW, key)]

        if p.is_pure_ack():
            return [Drop(DropReason.PURE_ACK, key)]

        actions: List[EngineAction] = []
        fin_in_order = False
        if p.payload or p.has(TcpFlags.FIN):
            fin_in_order = self._accept_segment(record, p, actions)
        if fin_in_order:
            actions.extend(self._on_app_fin(record, now))
        return actions

    def _open_tcp(self, key: FlowKey, p: IpPacket, now: float) -> List[EngineAction]:
        if len(self._flows) >= self.max_flows:
            return [WriteTun(self._reset_for(p)), Drop(DropReason.TABLE_FULL, key)]
        mss = self.mss_for(p.version)
        app_mss = mss_option_value(p.options)
        if app_mss:
            mss = min(mss, app_mss)
        isn = self._rng.getrandbits(32)
        st = TcpShadowState(
            app_isn=p.seq,
            local_isn=isn,
            local_seq=isn,
            local_ack=seq_add(p.seq, 1),
            mss=mss,
            created_at=now,
            last_activity=now,
            app_window=p.window,
            app_acked=isn,
        )
        record = FlowRecord(key=key, transport=st, analyzer_flow_id=self._new_flow_id())
        self._flows[key] = record
        return [OpenSocket(key, record.analyzer_flow_id)]

    def _note_app_ack(self, st: TcpShadowState, p: IpPacket) -> None:
        if seq_diff(p.ack, st.app_acked) > 0 and seq_diff(p.ack, st.local_seq) <= 0:
            st.app_acked = p.ack
        st.app_window = p.window

    def _accept_segment(
        self, record: FlowRecord, p: IpPacket, actions: List[EngineAction]
    ) -> bool:
        """Deliver in-order payload; returns True when an in-order FIN was reached."""
        st = record.tcp
        if st.phase is TcpPhase.APP_FIN_SENT:
            actions.append(Drop(DropReason.OUT_OF_WINDOW, record.key))
            actions.append(WriteTun(self._ack_packet(record)))
            return False

        offset = seq_diff(p.seq, st.local_ack)
        payload = p.payload
        if offset > 0:
            if payload and st.reorder_bytes + len(payload) <= REORDER_LIMIT:
                if p.seq not in st.reorder:
                    st.reorder[p.seq] = payload
                    st.reorder_bytes += len(payload)
            else:
                actions.append(Drop(DropReason.OUT_OF_WINDOW, record.key))
            actions.append(WriteTun(self._ack_packet(record)))
            return False
        if offset < 0:
            if -offset >= len(payload):
                actions.append(Drop(DropReason.RETRANSMIT, record.key))
                if not (p.has(TcpFlags.FIN) and -offset == len(payload)):
                    actions.append(WriteTun(self._ack_packet(record)))
                    return False
                payload = b""
            else:
                payload = payload[-offset:]

        data = payload + self._drain_reorder(st, seq_add(st.local_ack, len(payload)))
        if data:
            st.local_ack = seq_add(st.local_ack, len(data))
            st.app_bytes_accepted += len(data)
            record.bytes_up += len(data)
            self._deliver_up(record, data, actions)
        fin = p.has(TcpFlags.FIN) and seq_diff(seq_add(p.seq, len(p.payload)), st.local_ack) == 0
        if not fin:
            actions.append(WriteTun(self._ack_packet(record)))
        return fin

    def _drain_reorder(self, st: TcpShadowState, expected: int) -> bytes:
        chunks = []
        while st.reorder:
            stale = [s for s in st.reorder if seq_diff(s, expected) < 0]
            for s in stale:
                seg = st.reorder.pop(s)
                st.reorder_bytes -= len(seg)
                overlap = seq_diff(expected, s)
                if overlap < len(seg) and expected not in st.reorder:
                    st.reorder[expected] = seg[overlap:]
                    st.reorder_bytes += len(seg) - overlap
            seg = st.reorder.pop(expected, None)
            if seg is None:
                break
            st.reorder_bytes -= len(seg)
            chunks.append(seg)
            expected = seq_add(expected, len(seg))
        return b"".join(chunks)

    def _deliver_up(
        self, record: FlowRecord, data: bytes, actions: List[EngineAction]
    ) -> None:
        key = record.key
        if record.tls_status is TlsStatus.UNDECIDED:
            record.hello_buffer += data
            result = self.classifier(key, record.hello_buffer)
            if result.verdict is StreamVerdict.NEED_MORE:
                return
            pending, record.hello_buffer = record.hello_buffer, b""
            if result.verdict is StreamVerdict.DIVERT:
                record.tls_status = TlsStatus.INTERCEPTED
                actions.append(DivertToProxy(key, result.meta, pending))
                return
            record.tls_status = (
                TlsStatus.WHITELISTED
                if result.verdict is StreamVerdict.BYPASS
                else TlsStatus.NOT_TLS
            )
            data = pending
        if record.tls_status is TlsStatus.INTERCEPTED:
            actions.append(WriteProxy(key, data))
            return
        actions.append(WriteSocket(key, data))
        actions.append(
            MirrorToAnalyzer(record.analyzer_flow_id, key, Direction.OUTBOUND, data)
        )

    def _on_app_fin(self, record: FlowRecord, now: float) -> List[EngineAction]:
        st = record.tcp
        actions: List[EngineAction] = []
        if record.hello_buffer:
            # Stream ended before classification finished.
            pending, record.hello_buffer = record.hello_buffer, b""
            record.tls_status = TlsStatus.NOT_TLS
            actions.append(WriteSocket(record.key, pending))
            actions.append(
                MirrorToAnalyzer(
                    record.analyzer_flow_id, record.key, Direction.OUTBOUND, pending
                )
            )
        st.local_ack = seq_add(st.local_ack, 1)
        both_done = st.phase is TcpPhase.REMOTE_CLOSED
        actions.append(CloseSocket(record.key, half_close=not both_done))
        actions.append(WriteTun(self._ack_packet(record)))
        if both_done:
            self._mark_closed(record, now)
        else:
            st.move_to(TcpPhase.APP_FIN_SENT)
        return actions

    # -- socket side --------------------------------------------------------

    def attach_socket(self, key: FlowKey, handle: Any) -> None:
        """Record the socket opened for ``key`` (SynReceived -> Connecting)."""
        record = self._require(key)
        record.socket_handle = handle
        if record.is_tcp and record.tcp.phase is TcpPhase.SYN_RECEIVED:
            record.tcp.move_to(TcpPhase.CONNECTING)

    def on_socket_connected(self, key: FlowKey) -> List[EngineAction]:
        record = self._require(key)
        if not record.is_tcp:
            return []
        st = record.tcp
        if st.phase is not TcpPhase.CONNECTING:
            return []
        st.move_to(TcpPhase.ESTABLISHED)
        st.local_seq = seq_add(st.local_isn, 1)
        return [WriteTun(self._synack(record))]

    def send_capacity(self, key: FlowKey) -> int:
        """Bytes the app can accept right now (its window minus in-flight data)."""
        record = self._flows.get(key)
        if record is None:
            return 0
        if not record.is_tcp:
            return 0xFFFF
        st = record.tcp
        if st.phase not in (TcpPhase.ESTABLISHED, TcpPhase.APP_FIN_SENT):
            return 0
        in_flight = seq_diff(st.local_seq, st.app_acked)
        return max(0, st.app_window - max(0, in_flight))

    def on_socket_data(
        self, key: FlowKey, data: bytes, now: Optional[float] = None, mirror: bool = True
    ) -> List[EngineAction]:
        """Marshal bytes read from the socket back into packets for the app.

        An empty ``data`` on a TCP flow is the remote EOF.
        """
        record = self._require(key)
        if now is not None:
            record.transport.last_activity = now
        if not record.is_tcp:
            return self._udp_reply(record, data, mirror)

        st = record.tcp
        if st.phase not in (TcpPhase.ESTABLISHED, TcpPhase.APP_FIN_SENT):
            return []
        actions: List[EngineAction] = []
        if not data:
            fin = make_tcp(
                key.remote_addr,
                key.remote_port,
                key.app_addr,
                key.app_port,
                st.local_seq,
                st.local_ack,
                TcpFlags.FIN | TcpFlags.ACK,
                window=APP_WINDOW,
            )
            st.local_seq = seq_add(st.local_seq, 1)
            actions.append(WriteTun(fin))
            if st.phase is TcpPhase.APP_FIN_SENT:
                actions.append(CloseSocket(key))
                self._mark_closed(record, record.transport.last_activity)
            else:
                st.move_to(TcpPhase.REMOTE_CLOSED)
            return actions

        record.bytes_down += len(data)
        for start in range(0, len(data), st.mss):
            chunk = data[start : start + st.mss]
            flags = TcpFlags.ACK
            if start + st.mss >= len(data):
                flags |= TcpFlags.PSH
            actions.append(
                WriteTun(
                    make_tcp(
                        key.remote_addr,
                        key.remote_port,
                        key.app_addr,
                        key.app_port,
                        st.local_seq,
                        st.local_ack,
                        flags,
                        payload=chunk,
                        window=APP_WINDOW,
                    )
                )
            )
            st.local_seq = seq_add(st.local_seq, len(chunk))
        if mirror:
            actions.append(
                MirrorToAnalyzer(record.analyzer_flow_id, key, Direction.INBOUND, data)
            )
        return actions

    def _udp_reply(
        self, record: FlowRecord, data: bytes, mirror: bool
    ) -> List[EngineAction]:
        key = record.key
        record.bytes_down += len(data)
        actions: List[EngineAction] = [
            WriteTun(make_udp(key.remote_addr, key.remote_port, key.app_addr, key.app_port, data))
        ]
        if mirror:
            actions.append(
                MirrorToAnalyzer(record.analyzer_flow_id, key, Direction.INBOUND, data)
            )
        return actions

    def on_socket_error(
        self, key: FlowKey, kind: SocketErrorKind, now: float = 0.0
    ) -> List[EngineAction]:
        record = self._flows.get(key)
        if record is None:
            return []
        if not record.is_tcp:
            actions: List[EngineAction] = [CloseSocket(key)]
            actions.extend(self._release(record))
            return actions
        if record.tcp.phase is TcpPhase.CLOSED:
            return []
        return self._teardown(record, now, send_rst=True)

    def _teardown(
        self, record: FlowRecord, now: float, send_rst: bool
    ) -> List[EngineAction]:
        st = record.tcp
        actions: List[EngineAction] = []
        if send_rst:
            actions.append(WriteTun(self._rst_toward_app(record)))
        if record.socket_handle is not None:
            actions.append(CloseSocket(record.key))
        self._mark_closed(record, now)
        return actions

    def _mark_closed(self, record: FlowRecord, now: float) -> None:
        """Closed records linger so late segments still get answered."""
        record.tcp.move_to(TcpPhase.CLOSED)
        record.tcp.closed_at = now
        record.socket_handle = None
        record.hello_buffer = b""

    def _release(self, record: FlowRecord) -> List[EngineAction]:
        self._flows.pop(record.key, None)
        return [
            ReleaseFlow(record.key, record.analyzer_flow_id, record.bytes_up, record.bytes_down)
        ]

    # -- housekeeping -------------------------------------------------------

    def gc(self, now: float) -> List[EngineAction]:
        """Expire idle flows and closed flows past their linger time."""
        actions: List[EngineAction] = []
        for record in list(self._flows.values()):
            idle = now - record.last_activity
            if record.is_tcp:
                st = record.tcp
                if st.phase is TcpPhase.CLOSED:
                    if st.closed_at is None or now - st.closed_at > CLOSED_LINGER:
                        actions.extend(self._release(record))
                    continue
                expired = idle > self.tcp_idle_ttl
            else:
                expired = idle > record.transport.idle_ttl
            if expired:
                if record.socket_handle is not None:
                    actions.append(CloseSocket(record.key))
                actions.extend(self._release(record))
        return actions

    def shutdown(self) -> List[EngineAction]:
        """Reset every live TCP flow and close all sockets."""
        actions: List[EngineAction] = []
        for record in list(self._flows.values()):
            if record.is_tcp and record.tcp.phase not in (
                TcpPhase.CLOSED,
                TcpPhase.SYN_RECEIVED,
            ):
                actions.append(WriteTun(self._rst_toward_app(record)))
            if record.socket_handle is not None:
                actions.append(CloseSocket(record.key))
            actions.extend(self._release(record))
        return actions

    # -- packet synthesis ---------------------------------------------------

    def _require(self, key: FlowKey) -> FlowRecord:
        record = self._flows.get(key)
        if record is None:
            raise FlowGone(key)
        return record

    def _synack(self, record: FlowRecord) -> IpPacket:
        key, st = record.key, record.tcp
        return make_tcp(
            key.remote_addr,
            key.remote_port,
            key.app_addr,
            key.app_port,
            st.local_isn,
            st.local_ack,
            TcpFlags.SYN | TcpFlags.ACK,
            window=APP_WINDOW,
            options=build_mss_option(st.mss),
        )

    def _ack_packet(self, record: FlowRecord) -> IpPacket:
        key, st = record.key, record.tcp
        return make_tcp(
            key.remote_addr,
            key.remote_port,
            key.app_addr,
            key.app_port,
            st.local_seq,
            st.local_ack,
            TcpFlags.ACK,
            window=APP_WINDOW,
        )

    def _rst_toward_app(self, record: FlowRecord) -> IpPacket:
        key, st = record.key, record.tcp
        if st.phase in (TcpPhase.SYN_RECEIVED, TcpPhase.CONNECTING):
            seq = 0
        else:
            seq = st.local_seq
        return make_tcp(
            key.remote_addr,
            key.remote_port,
            key.app_addr,
            key.app_port,
            seq,
            st.local_ack,
            TcpFlags.RST | TcpFlags.ACK,
            window=0,
        )

    @staticmethod
    def _reset_for(p: IpPacket) -> IpPacket:
        """RST answering a segment that matches no flow (RFC 793 rules)."""
        if p.has(TcpFlags.ACK):
            return make_tcp(
                p.dst_addr, p.dst_port, p.src_addr, p.src_port, p.ack, 0, TcpFlags.RST, window=0
            )
        consumed = len(p.payload)
        if p.has(TcpFlags.SYN):
            consumed += 1
        if p.has(TcpFlags.FIN):
            consumed += 1
        return make_tcp(
            p.dst_addr,
            p.dst_port,
            p.src_addr,
            p.src_port,
            0,
            seq_add(p.seq, consumed),
            TcpFlags.RST | TcpFlags.ACK,
            window=0,
        )


__all__ = [
    "Classification",
    "CloseSocket",
    "DivertToProxy",
    "Drop",
    "DropReason",
    "EngineAction",
    "FlowEngine",
    "FlowGone",
    "FlowRecord",
    "MirrorToAnalyzer",
    "OpenSocket",
    "ReleaseFlow",
    "SocketErrorKind",
    "StreamClassifier",
    "StreamVerdict",
    "TcpPhase",
    "TcpShadowState",
    "TlsStatus",
    "UdpMapping",
    "WriteProxy",
    "WriteSocket",
    "WriteTun",
    "seq_add",
    "seq_diff",
]
