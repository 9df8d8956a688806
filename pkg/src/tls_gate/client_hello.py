"""TLS Client Hello detection.

Only the handful of extensions the gate acts on are decoded: server_name,
ALPN and supported_versions. Everything else is skipped by length.
"""

import enum
import struct
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

_RECORD_HANDSHAKE = 22
_HANDSHAKE_CLIENT_HELLO = 1
_RECORD_HEADER_LEN = 5

_EXT_SERVER_NAME = 0
_EXT_ALPN = 16
_EXT_SUPPORTED_VERSIONS = 43

VERSION_NAMES = {
    0x0300: "SSL3.0",
    0x0301: "TLS1.0",
    0x0302: "TLS1.1",
    0x0303: "TLS1.2",
    0x0304: "TLS1.3",
}
TLS1_2 = 0x0303


class NotTls(ValueError):
    """The stream does not start with a TLS Client Hello."""


class TlsTruncated(ValueError):
    """More bytes are needed to decide."""


class TlsOutcome(str, enum.Enum):
    INTERCEPTED = "Intercepted"
    HANDSHAKE_FAILED = "HandshakeFailed"
    BYPASSED = "Bypassed"


@dataclass(frozen=True)
class TlsFlowMeta:
    sni: Optional[str]
    client_version: int
    cipher_suites: Tuple[int, ...]
    alpn: Tuple[str, ...] = ()
    supported_versions: Tuple[int, ...] = ()
    outcome: Optional[TlsOutcome] = None
    reason: Optional[str] = None

    @property
    def max_version(self) -> int:
        """Highest real version offered, preferring supported_versions."""
        offered = [v for v in self.supported_versions if not _is_grease(v)]
        return max(offered) if offered else self.client_version

    @property
    def version_name(self) -> str:
        return VERSION_NAMES.get(self.max_version, hex(self.max_version))

    def with_outcome(self, outcome: TlsOutcome, reason: Optional[str] = None) -> "TlsFlowMeta":
        return replace(self, outcome=outcome, reason=reason)

    def to_dict(self) -> dict:
        return {
            "sni": self.sni,
            "client_version": VERSION_NAMES.get(self.client_version, hex(self.client_version)),
            "max_version": self.version_name,
            "cipher_suites": [c for c in self.cipher_suites if not _is_grease(c)],
            "alpn": list(self.alpn),
            "outcome": self.outcome.value if self.outcome else None,
            "reason": self.reason,
        }


def _is_grease(value: int) -> bool:
    return (value & 0x0F0F) == 0x0A0A and (value >> 8) == (value & 0xFF)


def _handshake_bytes(data: bytes) -> bytes:
    """Concatenate handshake record payloads until the Client Hello is whole."""
    if data[:1] and data[0] != _RECORD_HANDSHAKE:
        raise NotTls("first byte is not a handshake record")
    if len(data) < 6:
        raise TlsTruncated(f"{len(data)} bytes")
    if data[0] != _RECORD_HANDSHAKE or data[1] != 3 or data[5] != _HANDSHAKE_CLIENT_HELLO:
        raise NotTls("not a handshake record carrying a Client Hello")
    body = bytearray()
    pos = 0
    needed: Optional[int] = None
    while needed is None or len(body) < needed:
        if len(data) - pos < _RECORD_HEADER_LEN:
            raise TlsTruncated("record header")
        ctype, major, rec_len = data[pos], data[pos + 1], struct.unpack_from("!H", data, pos + 3)[0]
        if ctype != _RECORD_HANDSHAKE or major != 3:
            raise NotTls("Client Hello interrupted by a non-handshake record")
        if rec_len == 0 or rec_len > 16384 + 2048:
            raise NotTls(f"implausible record length {rec_len}")
        start = pos + _RECORD_HEADER_LEN
        if len(data) < start + rec_len:
            raise TlsTruncated("record body")
        body += data[start : start + rec_len]
        pos = start + rec_len
        if needed is None and len(body) >= 4:
            needed = 4 + int.from_bytes(body[1:4], "big")
    return bytes(body[:needed])


def detect_client_hello(first_bytes: bytes) -> TlsFlowMeta:
    """Recognize a Client Hello at the start of a stream.

    Raises ``TlsTruncated`` when the message is incomplete and ``NotTls`` when
    the bytes cannot be the start of one.
    """
    msg = _handshake_bytes(first_bytes)
    try:
        return _parse_client_hello(msg[4:])
    except (struct.error, IndexError) as e:
        raise NotTls(f"malformed Client Hello: {e}") from e


def _parse_client_hello(body: bytes) -> TlsFlowMeta:
    (client_version,) = struct.unpack_from("!H", body, 0)
    pos = 2 + 32
    sid_len = body[pos]
    pos += 1 + sid_len
    (cs_len,) = struct.unpack_from("!H", body, pos)
    pos += 2
    if cs_len % 2:
        raise NotTls("odd cipher suite length")
    suites = struct.unpack_from(f"!{cs_len // 2}H", body, pos)
    pos += cs_len
    comp_len = body[pos]
    pos += 1 + comp_len

    sni: Optional[str] = None
    alpn: List[str] = []
    versions: Tuple[int, ...] = ()
    if pos + 2 <= len(body):
        (ext_total,) = struct.unpack_from("!H", body, pos)
        pos += 2
        end = min(len(body), pos + ext_total)
        while pos + 4 <= end:
            ext_type, ext_len = struct.unpack_from("!HH", body, pos)
            pos += 4
            ext = body[pos : pos + ext_len]
            pos += ext_len
            if ext_type == _EXT_SERVER_NAME:
                sni = _parse_sni(ext)
            elif ext_type == _EXT_ALPN:
                alpn = _parse_alpn(ext)
            elif ext_type == _EXT_SUPPORTED_VERSIONS and ext:
                n = ext[0] // 2
                versions = struct.unpack_from(f"!{n}H", ext, 1)
    return TlsFlowMeta(
        sni=sni,
        client_version=client_version,
        cipher_suites=tuple(suites),
        alpn=tuple(alpn),
        supported_versions=versions,
    )


def _parse_sni(ext: bytes) -> Optional[str]:
    pos = 2
    while pos + 3 <= len(ext):
        name_type = ext[pos]
        (name_len,) = struct.unpack_from("!H", ext, pos + 1)
        pos += 3
        if name_type == 0:
            return ext[pos : pos + name_len].decode("ascii", errors="replace").lower()
        pos += name_len
    return None


def _parse_alpn(ext: bytes) -> List[str]:
    protocols = []
    pos = 2
    while pos < len(ext):
        n = ext[pos]
        protocols.append(ext[pos + 1 : pos + 1 + n].decode("ascii", errors="replace"))
        pos += 1 + n
    return protocols


def looks_like_tls(first_bytes: bytes) -> bool:
    """Cheap check on the record header only."""
    return (
        len(first_bytes) >= 6
        and first_bytes[0] == _RECORD_HANDSHAKE
        and first_bytes[1] == 3
        and first_bytes[5] == _HANDSHAKE_CLIENT_HELLO
    )
