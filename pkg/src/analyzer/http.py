"""HTTP/1.x message parsing over reassembled flow bytes."""

import logging
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple
from urllib.parse import urlsplit

import dpkt

from src.packet_codec import Direction

logger = logging.getLogger("flowtap.analyzer.http")

DEFAULT_MAX_BODY = 1024 * 1024
_MAX_HEADER_BYTES = 64 * 1024

_METHODS = (
    b"GET", b"POST", b"PUT", b"HEAD", b"DELETE", b"OPTIONS", b"PATCH", b"CONNECT", b"TRACE",
)


class NotHttp(ValueError):
    """The stream does not start with an HTTP/1.x message."""


class BodyTooLarge(ValueError):
    """The decoded body exceeds the scan limit; ``partial`` holds its first bytes."""

    def __init__(self, partial: bytes, limit: int):
        super().__init__(f"body larger than {limit} bytes")
        self.partial = partial
        self.limit = limit


@dataclass
class HttpMessage:
    direction: Direction
    method: Optional[str] = None
    uri: Optional[str] = None
    status: Optional[int] = None
    version: str = "1.1"
    headers: Dict[str, str] = field(default_factory=dict)
    body: bytes = b""
    content_encoding: Optional[str] = None
    body_truncated: bool = False

    @property
    def is_request(self) -> bool:
        return self.method is not None

    @property
    def host(self) -> Optional[str]:
        return self.headers.get("host")

    @property
    def path(self) -> Optional[str]:
        return urlsplit(self.uri).path if self.uri else None

    @property
    def query(self) -> str:
        return urlsplit(self.uri).query if self.uri else ""

    def header_block(self) -> str:
        return "\r\n".join(f"{k}: {v}" for k, v in self.headers.items())


def decode_body(body: bytes, encoding: Optional[str], limit: int = DEFAULT_MAX_BODY) -> bytes:
    """Undo Content-Encoding gzip/deflate, never producing more than ``limit`` bytes."""
    enc = (encoding or "").strip().lower()
    if enc in ("gzip", "x-gzip"):
        inflater = zlib.decompressobj(16 + zlib.MAX_WBITS)
    elif enc == "deflate":
        # zlib-wrapped per RFC, but raw deflate is common in the wild
        inflater = zlib.decompressobj(zlib.MAX_WBITS if body[:1] == b"\x78" else -zlib.MAX_WBITS)
    else:
        if len(body) > limit:
            raise BodyTooLarge(body[:limit], limit)
        return body
    try:
        out = inflater.decompress(body, limit + 1)
    except zlib.error as e:
        logger.debug("Cannot inflate %s body: %s", enc, e)
        return body[:limit]
    if len(out) > limit:
        raise BodyTooLarge(out[:limit], limit)
    return out


def _flatten(headers: Dict[str, object]) -> Dict[str, str]:
    flat = {}
    for k, v in headers.items():
        flat[k.lower()] = ", ".join(v) if isinstance(v, list) else str(v)
    return flat


def _has_framing(head: bytes) -> bool:
    lower = head.lower()
    return b"\ncontent-length:" in lower or b"\ntransfer-encoding:" in lower


def _is_chunked(head: bytes) -> bool:
    lower = head.lower()
    return b"\ntransfer-encoding:" in lower and b"chunked" in lower


def _unpack(cls: type, stream: bytes, head_end: int, final: bool) -> dpkt.http.Message:
    chunked = _is_chunked(stream[: head_end + 2])
    if chunked and not final and b"\r\n0\r\n" not in stream[head_end + 2 :]:
        raise dpkt.NeedData("chunked body incomplete")
    try:
        return cls(stream)
    except dpkt.NeedData:
        raise
    except dpkt.UnpackError as e:
        if chunked and not final:
            raise dpkt.NeedData("chunked body incomplete") from e
        raise NotHttp(str(e)) from e


def parse_http(
    stream: bytes, direction: Direction, max_body: int = DEFAULT_MAX_BODY, final: bool = False
) -> Tuple[HttpMessage, int]:
    """Parse the first message in ``stream``.

    Returns the message and the number of bytes it consumed. Raises
    ``NotHttp`` when the stream cannot be HTTP and ``dpkt.NeedData`` when more
    bytes are needed. With ``final`` set, a response without framing takes the
    rest of the stream as its body.
    """
    if direction is Direction.OUTBOUND:
        token = stream.split(b" ", 1)[0]
        if len(token) >= len(stream) and any(m.startswith(token) for m in _METHODS):
            raise dpkt.NeedData("request line")
        if token not in _METHODS:
            raise NotHttp(f"no method token: {stream[:16]!r}")
        head_end = stream.find(b"\r\n\r\n")
        if head_end < 0:
            raise dpkt.NeedData("request headers")
        msg = _unpack(dpkt.http.Request, stream, head_end, final)
        result = HttpMessage(direction, method=msg.method, uri=msg.uri, version=msg.version)
    else:
        if not stream.startswith(b"HTTP/"[: len(stream)]):
            raise NotHttp(f"no status line: {stream[:16]!r}")
        if len(stream) < 5:
            raise dpkt.NeedData("status line")
        head_end = stream.find(b"\r\n\r\n")
        if head_end < 0:
            raise dpkt.NeedData("response headers")
        if not final and not _has_framing(stream[: head_end + 2]):
            status_line = stream.split(b"\r\n", 1)[0].split()
            status = int(status_line[1]) if len(status_line) > 1 and status_line[1].isdigit() else 0
            if not (100 <= status < 200 or status in (204, 304)):
                raise dpkt.NeedData("unframed response body runs to close")
        msg = _unpack(dpkt.http.Response, stream, head_end, final)
        result = HttpMessage(direction, status=int(msg.status), version=msg.version)
        if final and not _has_framing(stream[: head_end + 2]):
            # dpkt only reads unframed bodies when a content-type is present
            msg.body = stream[head_end + 4 :]
            msg.data = b""

    consumed = len(stream) - len(msg.data)
    result.headers = _flatten(msg.headers)
    result.content_encoding = result.headers.get("content-encoding")
    try:
        result.body = decode_body(msg.body, result.content_encoding, max_body)
    except BodyTooLarge as e:
        result.body = e.partial
        result.body_truncated = True
    return result, consumed


class HttpStreamParser:
    """Incremental parser for one direction of one flow."""

    def __init__(self, direction: Direction, max_body: int = DEFAULT_MAX_BODY):
        self.direction = direction
        self.max_body = max_body
        self.opaque = False
        self._resync = False
        self._buf = bytearray()

    def reset(self) -> None:
        """Forget buffered bytes after a gap in the stream."""
        self._buf.clear()
        self._resync = True

    def feed(self, data: bytes, final: bool = False) -> List[HttpMessage]:
        if self.opaque:
            return []
        self._buf += data
        messages: List[HttpMessage] = []
        while self._buf:
            try:
                msg, consumed = parse_http(bytes(self._buf), self.direction, self.max_body, final)
            except NotHttp:
                if messages or self._resync:
                    # the tail after a valid message is not HTTP; drop it
                    self._buf.clear()
                    break
                self.opaque = True
                self._buf.clear()
                raise
            except dpkt.NeedData:
                if len(self._buf) > self.max_body + _MAX_HEADER_BYTES:
                    logger.debug("HTTP message exceeds buffer limit; giving up on stream")
                    self.opaque = True
                    self._buf.clear()
                break
            del self._buf[:consumed]
            self._resync = False
            messages.append(msg)
            if consumed == 0:
                break
        return messages

    def close(self) -> List[HttpMessage]:
        if self.opaque or not self._buf:
            return []
        try:
            return self.feed(b"", final=True)
        except NotHttp:
            return []
