"""IPv4/IPv6 + TCP/UDP wire codec.

Parses raw packets read from the TUN device into ``IpPacket`` objects and
serializes synthesized packets back to bytes with fresh checksums.

Only the fixed IPv6 header is supported; packets carrying extension headers
are rejected with ``Ipv6ExtensionHeader`` rather than being guessed at.
Input checksums are checked and the result recorded on the packet, but bad
checksums are tolerated because the local stack usually offloads them to the
virtual device.
"""

import enum
import ipaddress
import struct
from dataclasses import dataclass, field
from functools import total_ordering
from typing import Optional, Tuple, Union

IpAddress = Union[ipaddress.IPv4Address, ipaddress.IPv6Address]
IpNetwork = Union[ipaddress.IPv4Network, ipaddress.IPv6Network]

PROTO_TCP = 6
PROTO_UDP = 17

DEFAULT_MTU = 1500
IPV4_HEADER_LEN = 20
IPV6_HEADER_LEN = 40
TCP_HEADER_LEN = 20
UDP_HEADER_LEN = 8

# Next-header values that introduce an IPv6 extension header.
_IPV6_EXTENSION_HEADERS = frozenset({0, 43, 44, 50, 51, 60, 135, 139, 140, 253, 254})

_TCP_OPT_END = 0
_TCP_OPT_NOP = 1
_TCP_OPT_MSS = 2


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------


class ParseError(ValueError):
    """Raised when raw bytes cannot be turned into an ``IpPacket``."""


class TruncatedHeader(ParseError):
    pass


class UnsupportedVersion(ParseError):
    pass


class Ipv6ExtensionHeader(ParseError):
    """IPv6 packet whose next header is an extension header."""


class UnsupportedProtocol(ParseError):
    def __init__(self, code: int):
        super().__init__(f"unsupported transport protocol {code}")
        self.code = code


class FragmentedPacket(ParseError):
    """IPv4 fragment; reassembly is not performed."""


class OversizePayload(ValueError):
    pass


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


class TcpFlags(enum.IntFlag):
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10
    URG = 0x20
    ECE = 0x40
    CWR = 0x80


class Direction(enum.Enum):
    OUTBOUND = "outbound"  # app (TUN side) -> remote
    INBOUND = "inbound"  # remote (socket side) -> app


@dataclass
class IpPacket:
    """A parsed or to-be-synthesized IP packet carrying TCP or UDP.

    ``header_len`` is the IP header length; the transport header sits between
    it and ``payload``. Fields that only exist for one transport are left at
    their defaults for the other.
    """

    version: int
    src_addr: IpAddress
    dst_addr: IpAddress
    protocol: int
    src_port: int
    dst_port: int
    payload: bytes = b""
    header_len: int = 0
    ttl: int = 64
    tos: int = 0
    identification: int = 0
    ip_flags: int = 0x2  # don't fragment
    ip_options: bytes = b""
    flow_label: int = 0
    # TCP
    seq: int = 0
    ack: int = 0
    flags: TcpFlags = TcpFlags(0)
    window: int = 0
    urgent: int = 0
    options: bytes = b""
    tcp_reserved: int = 0
    # UDP
    length: int = 0
    udp_no_checksum: bool = False  # IPv4 sender left the checksum at zero
    udp_padding: bytes = b""  # inside the IP datagram, past the UDP length
    # past the IP total / payload length (Ethernet minimum-frame padding)
    trailer: bytes = b""
    # Recorded on parse; never trusted.
    checksum_valid: Optional[bool] = field(default=None, compare=False)

    @property
    def is_tcp(self) -> bool:
        return self.protocol == PROTO_TCP

    @property
    def is_udp(self) -> bool:
        return self.protocol == PROTO_UDP

    def has(self, flag: TcpFlags) -> bool:
        return bool(self.flags & flag)

    def is_pure_ack(self) -> bool:
        """TCP, ACK set, no SYN/FIN/RST and no payload."""
        return (
            self.is_tcp
            and self.has(TcpFlags.ACK)
            and not self.flags & (TcpFlags.SYN | TcpFlags.FIN | TcpFlags.RST)
            and not self.payload
        )

    @property
    def transport_header_len(self) -> int:
        if self.is_tcp:
            return TCP_HEADER_LEN + len(self.options)
        return UDP_HEADER_LEN


@total_ordering
@dataclass(frozen=True)
class FlowKey:
    """Direction-normalized 5-tuple: the app-side endpoint comes first."""

    protocol: int
    app_addr: IpAddress
    app_port: int
    remote_addr: IpAddress
    remote_port: int

    def sort_key(self) -> Tuple[int, int, int, int, int, int, int]:
        return (
            self.protocol,
            self.app_addr.version,
            int(self.app_addr),
            self.app_port,
            self.remote_addr.version,
            int(self.remote_addr),
            self.remote_port,
        )

    def __lt__(self, other: "FlowKey") -> bool:
        if not isinstance(other, FlowKey):
            return NotImplemented
        return self.sort_key() < other.sort_key()

    @property
    def protocol_name(self) -> str:
        return {PROTO_TCP: "tcp", PROTO_UDP: "udp"}.get(self.protocol, str(self.protocol))

    def __str__(self) -> str:
        return (
            f"{self.protocol_name} {_fmt_endpoint(self.app_addr, self.app_port)}"
            f" -> {_fmt_endpoint(self.remote_addr, self.remote_port)}"
        )

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol_name,
            "app_addr": str(self.app_addr),
            "app_port": self.app_port,
            "remote_addr": str(self.remote_addr),
            "remote_port": self.remote_port,
        }


def _fmt_endpoint(addr: IpAddress, port: int) -> str:
    if addr.version == 6:
        return f"[{addr}]:{port}"
    return f"{addr}:{port}"


# ---------------------------------------------------------------------------
# Checksum
# ---------------------------------------------------------------------------


def _ones_complement_sum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return total


def checksum(pseudo_header: bytes, body: bytes) -> int:
    """Internet checksum over ``pseudo_header + body``.

    An odd-length body is padded with a zero byte. Data that already carries
    its correct checksum sums to 0.
    """
    return (~_ones_complement_sum(pseudo_header + body)) & 0xFFFF


def _pseudo_header(
    src: IpAddress, dst: IpAddress, protocol: int, length: int
) -> bytes:
    if src.version == 4:
        return src.packed + dst.packed + struct.pack("!BBH", 0, protocol, length)
    return src.packed + dst.packed + struct.pack("!I3xB", length, protocol)


# ---------------------------------------------------------------------------
# TCP options
# ---------------------------------------------------------------------------


def parse_tcp_options(options: bytes) -> dict:
    """Return ``{kind: value_bytes}`` for the options present."""
    result = {}
    i = 0
    while i < len(options):
        kind = options[i]
        if kind == _TCP_OPT_END:
            break
        if kind == _TCP_OPT_NOP:
            i += 1
            continue
        if i + 1 >= len(options):
            break
        size = options[i + 1]
        if size < 2 or i + size > len(options):
            break
        result[kind] = options[i + 2 : i + size]
        i += size
    return result


def mss_option_value(options: bytes) -> Optional[int]:
    raw = parse_tcp_options(options).get(_TCP_OPT_MSS)
    if raw is None or len(raw) != 2:
        return None
    return struct.unpack("!H", raw)[0]


def build_mss_option(mss: int) -> bytes:
    return struct.pack("!BBH", _TCP_OPT_MSS, 4, mss)


# ---------------------------------------------------------------------------
# Parse
# ---------------------------------------------------------------------------


def parse_packet(data: bytes) -> IpPacket:
    """Parse one raw IP packet as read from the TUN device.

    Raises:
        TruncatedHeader, UnsupportedVersion, Ipv6ExtensionHeader,
        UnsupportedProtocol, FragmentedPacket
    """
    if not data:
        raise TruncatedHeader("empty packet")
    version = data[0] >> 4
    if version == 4:
        return _parse_ipv4(data)
    if version == 6:
        return _parse_ipv6(data)
    raise UnsupportedVersion(f"IP version {version}")


def _parse_ipv4(data: bytes) -> IpPacket:
    if len(data) < IPV4_HEADER_LEN:
        raise TruncatedHeader(f"IPv4 header needs 20 bytes, got {len(data)}")
    (
        ver_ihl,
        tos,
        total_len,
        ident,
        flags_frag,
        ttl,
        proto,
        _hdr_sum,
    ) = struct.unpack("!BBHHHBBH", data[:12])
    ihl = (ver_ihl & 0x0F) * 4
    if ihl < IPV4_HEADER_LEN or len(data) < ihl:
        raise TruncatedHeader(f"bad IPv4 IHL {ihl}")
    if total_len < ihl or total_len > len(data):
        raise TruncatedHeader(f"IPv4 total length {total_len} vs {len(data)} bytes")
    ip_flags = flags_frag >> 13
    frag_offset = flags_frag & 0x1FFF
    if ip_flags & 0x1 or frag_offset:
        raise FragmentedPacket(f"fragment offset={frag_offset} mf={ip_flags & 1}")
    if proto not in (PROTO_TCP, PROTO_UDP):
        raise UnsupportedProtocol(proto)

    src = ipaddress.IPv4Address(data[12:16])
    dst = ipaddress.IPv4Address(data[16:20])
    header_ok = checksum(b"", data[:ihl]) == 0
    pkt = IpPacket(
        version=4,
        src_addr=src,
        dst_addr=dst,
        protocol=proto,
        src_port=0,
        dst_port=0,
        header_len=ihl,
        ttl=ttl,
        tos=tos,
        identification=ident,
        ip_flags=ip_flags,
        ip_options=bytes(data[IPV4_HEADER_LEN:ihl]),
    )
    _parse_transport(pkt, bytes(data[ihl:total_len]), header_ok)
    pkt.trailer = bytes(data[total_len:])
    return pkt


def _parse_ipv6(data: bytes) -> IpPacket:
    if len(data) < IPV6_HEADER_LEN:
        raise TruncatedHeader(f"IPv6 header needs 40 bytes, got {len(data)}")
    first, payload_len, next_header, hop_limit = struct.unpack("!IHBB", data[:8])
    if next_header in _IPV6_EXTENSION_HEADERS:
        raise Ipv6ExtensionHeader(f"next header {next_header}")
    if next_header not in (PROTO_TCP, PROTO_UDP):
        raise UnsupportedProtocol(next_header)
    end = IPV6_HEADER_LEN + payload_len
    if end > len(data):
        raise TruncatedHeader(f"IPv6 payload length {payload_len} exceeds buffer")
    pkt = IpPacket(
        version=6,
        src_addr=ipaddress.IPv6Address(data[8:24]),
        dst_addr=ipaddress.IPv6Address(data[24:40]),
        protocol=next_header,
        src_port=0,
        dst_port=0,
        header_len=IPV6_HEADER_LEN,
        ttl=hop_limit,
        tos=(first >> 20) & 0xFF,
        flow_label=first & 0xFFFFF,
        ip_flags=0,
    )
    _parse_transport(pkt, bytes(data[IPV6_HEADER_LEN:end]), True)
    pkt.trailer = bytes(data[end:])
    return pkt


def _parse_transport(pkt: IpPacket, segment: bytes, header_ok: bool) -> None:
    if pkt.protocol == PROTO_TCP:
        if len(segment) < TCP_HEADER_LEN:
            raise TruncatedHeader(f"TCP header needs 20 bytes, got {len(segment)}")
        (
            pkt.src_port,
            pkt.dst_port,
            pkt.seq,
            pkt.ack,
            offset_byte,
            flag_byte,
            pkt.window,
            _sum,
            pkt.urgent,
        ) = struct.unpack("!HHIIBBHHH", segment[:TCP_HEADER_LEN])
        data_offset = (offset_byte >> 4) * 4
        if data_offset < TCP_HEADER_LEN or data_offset > len(segment):
            raise TruncatedHeader(f"bad TCP data offset {data_offset}")
        pkt.tcp_reserved = offset_byte & 0x0F
        pkt.flags = TcpFlags(flag_byte)
        pkt.options = segment[TCP_HEADER_LEN:data_offset]
        pkt.payload = segment[data_offset:]
        pseudo = _pseudo_header(pkt.src_addr, pkt.dst_addr, pkt.protocol, len(segment))
        transport_ok = checksum(pseudo, segment) == 0
    else:
        if len(segment) < UDP_HEADER_LEN:
            raise TruncatedHeader(f"UDP header needs 8 bytes, got {len(segment)}")
        pkt.src_port, pkt.dst_port, pkt.length, udp_sum = struct.unpack(
            "!HHHH", segment[:UDP_HEADER_LEN]
        )
        if pkt.length < UDP_HEADER_LEN or pkt.length > len(segment):
            raise TruncatedHeader(f"UDP length {pkt.length} vs {len(segment)} bytes")
        pkt.payload = segment[UDP_HEADER_LEN : pkt.length]
        pkt.udp_padding = segment[pkt.length :]
        if udp_sum == 0 and pkt.version == 4:
            pkt.udp_no_checksum = True
            transport_ok = True
        else:
            pseudo = _pseudo_header(pkt.src_addr, pkt.dst_addr, pkt.protocol, pkt.length)
            transport_ok = checksum(pseudo, segment[: pkt.length]) == 0
    pkt.checksum_valid = header_ok and transport_ok


# ---------------------------------------------------------------------------
# Serialize
# ---------------------------------------------------------------------------


def max_payload(version: int, protocol: int, mtu: int = DEFAULT_MTU, options_len: int = 0) -> int:
    ip_len = IPV4_HEADER_LEN if version == 4 else IPV6_HEADER_LEN
    transport = TCP_HEADER_LEN + options_len if protocol == PROTO_TCP else UDP_HEADER_LEN
    return mtu - ip_len - transport


def serialize_packet(p: IpPacket, mtu: int = DEFAULT_MTU) -> bytes:
    """Encode ``p`` with freshly computed IP and transport checksums.

    Raises:
        OversizePayload: the packet would exceed ``mtu``.
        ValueError: a field is out of range.
    """
    if p.protocol not in (PROTO_TCP, PROTO_UDP):
        raise UnsupportedProtocol(p.protocol)
    ip_options = p.ip_options if p.version == 4 else b""
    ip_len = (IPV4_HEADER_LEN + len(ip_options)) if p.version == 4 else IPV6_HEADER_LEN
    limit = mtu - ip_len - p.transport_header_len
    if len(p.payload) > limit:
        raise OversizePayload(f"payload {len(p.payload)} > {limit} bytes for MTU {mtu}")
    if not (0 <= p.src_port <= 0xFFFF and 0 <= p.dst_port <= 0xFFFF):
        raise ValueError("port out of range")

    segment = _build_transport(p)
    if p.version == 4:
        if len(ip_options) % 4:
            raise ValueError("IPv4 options must be padded to 32 bits")
        total_len = ip_len + len(segment)
        header = struct.pack(
            "!BBHHHBBH4s4s",
            0x40 | (ip_len // 4),
            p.tos,
            total_len,
            p.identification & 0xFFFF,
            (p.ip_flags & 0x7) << 13,
            p.ttl,
            p.protocol,
            0,
            p.src_addr.packed,
            p.dst_addr.packed,
        ) + ip_options
        header_sum = checksum(b"", header)
        header = header[:10] + struct.pack("!H", header_sum) + header[12:]
        return header + segment + p.trailer
    first = (6 << 28) | ((p.tos & 0xFF) << 20) | (p.flow_label & 0xFFFFF)
    header = struct.pack(
        "!IHBB16s16s",
        first,
        len(segment),
        p.protocol,
        p.ttl,
        p.src_addr.packed,
        p.dst_addr.packed,
    )
    return header + segment + p.trailer


def _build_transport(p: IpPacket) -> bytes:
    if p.protocol == PROTO_TCP:
        if len(p.options) % 4:
            raise ValueError("TCP options must be padded to 32 bits")
        data_offset = (TCP_HEADER_LEN + len(p.options)) // 4
        header = struct.pack(
            "!HHIIBBHHH",
            p.src_port,
            p.dst_port,
            p.seq & 0xFFFFFFFF,
            p.ack & 0xFFFFFFFF,
            (data_offset << 4) | (p.tcp_reserved & 0x0F),
            int(p.flags) & 0xFF,
            p.window & 0xFFFF,
            0,
            p.urgent & 0xFFFF,
        )
        segment = header + p.options + p.payload
        pseudo = _pseudo_header(p.src_addr, p.dst_addr, p.protocol, len(segment))
        value = checksum(pseudo, segment)
        return segment[:16] + struct.pack("!H", value) + segment[18:]

    length = UDP_HEADER_LEN + len(p.payload)
    segment = struct.pack("!HHHH", p.src_port, p.dst_port, length, 0) + p.payload
    if p.udp_no_checksum and p.version == 4:
        return segment + p.udp_padding
    pseudo = _pseudo_header(p.src_addr, p.dst_addr, p.protocol, length)
    value = checksum(pseudo, segment) or 0xFFFF
    return segment[:6] + struct.pack("!H", value) + segment[8:] + p.udp_padding


# ---------------------------------------------------------------------------
# Constructors
# ---------------------------------------------------------------------------


def make_tcp(
    src: IpAddress,
    src_port: int,
    dst: IpAddress,
    dst_port: int,
    seq: int,
    ack: int,
    flags: TcpFlags,
    payload: bytes = b"",
    window: int = 0xFFFF,
    options: bytes = b"",
) -> IpPacket:
    return IpPacket(
        version=src.version,
        src_addr=src,
        dst_addr=dst,
        protocol=PROTO_TCP,
        src_port=src_port,
        dst_port=dst_port,
        payload=payload,
        header_len=IPV4_HEADER_LEN if src.version == 4 else IPV6_HEADER_LEN,
        seq=seq & 0xFFFFFFFF,
        ack=ack & 0xFFFFFFFF,
        flags=flags,
        window=window,
        options=options,
        ip_flags=0x2 if src.version == 4 else 0,
    )


def make_udp(
    src: IpAddress, src_port: int, dst: IpAddress, dst_port: int, payload: bytes
) -> IpPacket:
    return IpPacket(
        version=src.version,
        src_addr=src,
        dst_addr=dst,
        protocol=PROTO_UDP,
        src_port=src_port,
        dst_port=dst_port,
        payload=payload,
        header_len=IPV4_HEADER_LEN if src.version == 4 else IPV6_HEADER_LEN,
        length=UDP_HEADER_LEN + len(payload),
        ip_flags=0x2 if src.version == 4 else 0,
    )


# ---------------------------------------------------------------------------
# Flow identity
# ---------------------------------------------------------------------------


def flow_key_of(
    p: IpPacket, local_net: Optional[IpNetwork] = None
) -> Tuple[FlowKey, Direction]:
    """Map a packet to its direction-normalized key.

    ``local_net`` is the TUN network: the endpoint inside it is the app side.
    Without it, a private address facing a public one is the app side, and
    otherwise the endpoint with the lower (addr, port) sort key.
    """
    if p.protocol not in (PROTO_TCP, PROTO_UDP):
        raise UnsupportedProtocol(p.protocol)
    src = (p.src_addr, p.src_port)
    dst = (p.dst_addr, p.dst_port)
    outbound = _src_is_app_side(src, dst, local_net)
    app, remote = (src, dst) if outbound else (dst, src)
    key = FlowKey(p.protocol, app[0], app[1], remote[0], remote[1])
    return key, Direction.OUTBOUND if outbound else Direction.INBOUND


def _src_is_app_side(
    src: Tuple[IpAddress, int],
    dst: Tuple[IpAddress, int],
    local_net: Optional[IpNetwork],
) -> bool:
    if local_net is not None and src[0].version == local_net.version:
        src_in, dst_in = src[0] in local_net, dst[0] in local_net
        if src_in != dst_in:
            return src_in
    if src[0].is_private != dst[0].is_private:
        return src[0].is_private
    return (src[0].version, int(src[0]), src[1]) <= (dst[0].version, int(dst[0]), dst[1])


__all__ = [
    "Direction",
    "FlowKey",
    "FragmentedPacket",
    "IpPacket",
    "Ipv6ExtensionHeader",
    "OversizePayload",
    "ParseError",
    "TcpFlags",
    "TruncatedHeader",
    "UnsupportedProtocol",
    "UnsupportedVersion",
    "build_mss_option",
    "checksum",
    "flow_key_of",
    "make_tcp",
    "make_udp",
    "max_payload",
    "mss_option_value",
    "parse_packet",
    "serialize_packet",
]
