"""Offline analysis: turn a capture file into the records the forwarder would mirror."""

import ipaddress
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, Optional, Set, Tuple

import dpkt

from src.analyzer.mirror_queue import FlowClose, FlowCopy, FlowOpen, MirrorRecord
from src.flow_engine import seq_add, seq_diff
from src.packet_codec import (
    PROTO_TCP,
    Direction,
    FlowKey,
    IpNetwork,
    ParseError,
    TcpFlags,
    flow_key_of,
    parse_packet,
)

logger = logging.getLogger("flowtap.analyzer.pcap")

DLT_NULL = 0
DLT_EN10MB = 1
DLT_RAW = (12, 14, 101)
DLT_LINUX_SLL = 113
DLT_LINUX_SLL2 = 276


class CorruptPcap(ValueError):
    """The capture file cannot be read."""


@dataclass
class _ReplayFlow:
    flow_id: int
    key: FlowKey
    next_seq: Dict[Direction, Optional[int]] = field(
        default_factory=lambda: {Direction.OUTBOUND: None, Direction.INBOUND: None}
    )
    offsets: Dict[Direction, int] = field(
        default_factory=lambda: {Direction.OUTBOUND: 0, Direction.INBOUND: 0}
    )
    bytes: Dict[Direction, int] = field(
        default_factory=lambda: {Direction.OUTBOUND: 0, Direction.INBOUND: 0}
    )
    fins: Set[Direction] = field(default_factory=set)
    last_seen: float = 0.0


def _ip_bytes(linktype: int, frame: bytes) -> Optional[bytes]:
    if linktype == DLT_EN10MB:
        eth = dpkt.ethernet.Ethernet(frame)
        return bytes(eth.data) if isinstance(eth.data, (dpkt.ip.IP, dpkt.ip6.IP6)) else None
    if linktype in DLT_RAW:
        return frame
    if linktype == DLT_LINUX_SLL:
        sll = dpkt.sll.SLL(frame)
        return bytes(sll.data) if isinstance(sll.data, (dpkt.ip.IP, dpkt.ip6.IP6)) else None
    if linktype == DLT_LINUX_SLL2:
        return frame[20:]
    if linktype == DLT_NULL:
        return frame[4:]
    raise CorruptPcap(f"unsupported link type {linktype}")


def _open_reader(f) -> Tuple[object, int]:
    try:
        reader = dpkt.pcap.Reader(f)
    except ValueError:
        f.seek(0)
        try:
            reader = dpkt.pcapng.Reader(f)
        except (ValueError, dpkt.UnpackError) as e:
            raise CorruptPcap(f"not a pcap or pcapng file: {e}") from e
    return reader, reader.datalink()


def replay_records(
    path: Path, local_net: Optional[IpNetwork] = None
) -> Iterator[MirrorRecord]:
    """Yield FlowOpen/FlowCopy/FlowClose records in capture order.

    TCP payload is deduplicated by sequence number so retransmissions in the
    capture do not show up twice.
    """
    flows: Dict[FlowKey, _ReplayFlow] = {}
    # closed TCP connections; trailing ACKs and RSTs are not a new flow
    closed: Set[FlowKey] = set()
    next_id = 1
    last_ts = 0.0
    with open(path, "rb") as f:
        reader, linktype = _open_reader(f)
        try:
            for ts, frame in reader:
                last_ts = float(ts)
                try:
                    raw = _ip_bytes(linktype, frame)
                    if raw is None:
                        continue
                    packet = parse_packet(raw)
                except (ParseError, dpkt.UnpackError):
                    continue
                key, direction = flow_key_of(packet, local_net)
                if key in closed:
                    if not (packet.protocol == PROTO_TCP and packet.has(TcpFlags.SYN)):
                        continue
                    closed.discard(key)
                flow = flows.get(key)
                if flow is None:
                    flow = _ReplayFlow(next_id, key)
                    next_id += 1
                    flows[key] = flow
                    yield FlowOpen(flow.flow_id, key, last_ts)
                flow.last_seen = last_ts
                data = packet.payload
                if packet.protocol == PROTO_TCP:
                    data = _in_order(flow, direction, packet)
                if data:
                    yield FlowCopy(flow.flow_id, direction, data, flow.offsets[direction], last_ts)
                    flow.offsets[direction] += len(data)
                    flow.bytes[direction] += len(data)
                if packet.protocol == PROTO_TCP and (
                    packet.has(TcpFlags.RST) or (packet.has(TcpFlags.FIN) and len(flow.fins) == 2)
                ):
                    del flows[key]
                    closed.add(key)
                    yield _close(flow, last_ts)
        except dpkt.NeedData as e:
            logger.warning("Capture %s ends mid-record: %s", path, e)
        except (dpkt.UnpackError, ValueError) as e:
            raise CorruptPcap(f"{path}: {e}") from e
    for flow in flows.values():
        yield _close(flow, last_ts)


def _in_order(flow: _ReplayFlow, direction: Direction, packet) -> bytes:
    expected = flow.next_seq[direction]
    if packet.has(TcpFlags.SYN):
        flow.next_seq[direction] = seq_add(packet.seq, 1)
        return b""
    if packet.has(TcpFlags.FIN):
        flow.fins.add(direction)
    data = packet.payload
    if expected is None:
        expected = packet.seq
    delta = seq_diff(packet.seq, expected)
    if delta < 0:
        # retransmission, possibly with some new bytes at the end
        data = data[-delta:] if -delta < len(data) else b""
        start = expected
    else:
        start = packet.seq
        # bytes missing from the capture show up as an offset gap
        if delta > 0:
            flow.offsets[direction] += delta
    flow.next_seq[direction] = seq_add(start, len(data))
    return data


def _close(flow: _ReplayFlow, at: float) -> FlowClose:
    return FlowClose(
        flow.flow_id, flow.bytes[Direction.OUTBOUND], flow.bytes[Direction.INBOUND], at
    )


def replay(path: Path, analyzer, local_net: Optional[IpNetwork] = None) -> int:
    """Feed a capture through ``analyzer.process`` synchronously."""
    count = 0
    for record in replay_records(Path(path), local_net):
        analyzer.process(record)
        count += 1
    analyzer.sink.flush()
    logger.info("Replayed %d records from %s", count, path)
    return count


def parse_local_net(value: Optional[str]) -> Optional[IpNetwork]:
    return ipaddress.ip_network(value, strict=False) if value else None
