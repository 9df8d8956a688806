"""Relay worker for one intercepted TLS flow.

The forwarder hands over the connected upstream socket together with the
app's buffered Client Hello. The worker completes the upstream handshake
first, then terminates the app's TLS on an in-memory ``SSLObject`` so that
app bytes keep arriving through the forwarder (``feed_app``) and responses
leave through ``app_out``. Cleartext in both directions is copied to the
analyzer.
"""

import logging
import queue
import socket
import ssl
import threading
import time
from typing import Any, Callable, Optional, Tuple, Union

from src.packet_codec import Direction, FlowKey
from src.tls_gate.ca import CaIdentity, CaUnavailable
from src.tls_gate.client_hello import TlsFlowMeta, TlsOutcome

logger = logging.getLogger("flowtap.tls_gate.proxy")

HANDSHAKE_TIMEOUT = 10.0
APP_OUT_CHUNKS = 64
_RECV_SIZE = 16384


class UpstreamConnectFailed(ConnectionError):
    """The real server could not be reached over TLS."""


class HandshakeFailed(RuntimeError):
    """The app refused our certificate or the handshake could not be mirrored."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


# Item types placed on ``app_out``: bytes (toward the app), b"" (EOF) or an
# exception (reset the app's connection).
AppOutItem = Union[bytes, BaseException]


class ProxySession:
    def __init__(
        self,
        key: FlowKey,
        upstream: socket.socket,
        meta: TlsFlowMeta,
        first_bytes: bytes,
        ca: CaIdentity,
        client_context: Callable[[Tuple[str, ...], bool], ssl.SSLContext],
        mirror: Any = None,
        flow_id: int = 0,
        on_failure: Optional[Callable[[TlsFlowMeta, str], None]] = None,
        handshake_timeout: float = HANDSHAKE_TIMEOUT,
    ):
        self.key = key
        self.meta = meta
        self.flow_id = flow_id
        self.app_out: "queue.Queue[AppOutItem]" = queue.Queue(maxsize=APP_OUT_CHUNKS)
        self.outcome: Optional[TlsFlowMeta] = None
        self.done = threading.Event()
        self._upstream_raw = upstream
        self._upstream: Optional[ssl.SSLSocket] = None
        self._first_bytes = first_bytes
        self._ca = ca
        self._client_context = client_context
        self._mirror = mirror
        self._on_failure = on_failure
        self._timeout = handshake_timeout
        self._app_in: "queue.Queue[Optional[bytes]]" = queue.Queue()
        self._incoming = ssl.MemoryBIO()
        self._outgoing = ssl.MemoryBIO()
        self._tls: Optional[ssl.SSLObject] = None
        self._tls_lock = threading.Lock()
        self._stop = threading.Event()
        self._worker = threading.Thread(
            target=self._run, name=f"tls-proxy-{flow_id}", daemon=True
        )

    # -- forwarder side -----------------------------------------------------

    def start(self) -> "ProxySession":
        self._worker.start()
        return self

    def feed_app(self, data: bytes) -> None:
        """TLS bytes the app sent."""
        if data:
            self._app_in.put(data)

    def close_app(self) -> None:
        """The app half-closed its side."""
        self._app_in.put(b"")

    def abort(self) -> None:
        self._stop.set()
        self._app_in.put(None)
        self._close_upstream()

    # -- worker -------------------------------------------------------------

    def _run(self) -> None:
        try:
            self._connect_upstream()
            self._handshake_app()
        except (UpstreamConnectFailed, HandshakeFailed) as e:
            self._fail(e)
            return
        except Exception as e:
            logger.exception("TLS proxy setup failed for %s", self.key)
            self._fail(HandshakeFailed(f"internal: {e}"))
            return
        self._finish(TlsOutcome.INTERCEPTED, None)
        downstream = threading.Thread(
            target=self._pump_upstream, name=f"tls-proxy-{self.flow_id}-down", daemon=True
        )
        downstream.start()
        try:
            self._pump_app()
        except Exception:
            if not self._stop.is_set():
                logger.exception("TLS relay failed for %s", self.key)
                self._emit(ConnectionResetError("relay failed"))
            self._close_upstream()
        finally:
            # The response keeps flowing after the app half-closes.
            downstream.join()
            self._close_upstream()
            self.done.set()

    def _connect_upstream(self) -> None:
        server_hostname = self.meta.sni or None
        ctx = self._client_context(self.meta.alpn, server_hostname is not None)
        self._upstream_raw.settimeout(self._timeout)
        try:
            self._upstream = ctx.wrap_socket(self._upstream_raw, server_hostname=server_hostname)
        except (ssl.SSLError, ssl.CertificateError, OSError) as e:
            raise UpstreamConnectFailed(
                f"upstream handshake with {self.key.remote_addr}: {e}"
            ) from e
        self._upstream.settimeout(None)
        logger.debug(
            "Upstream TLS up for %s (%s, alpn=%s)",
            self.key,
            self._upstream.version(),
            self._upstream.selected_alpn_protocol(),
        )

    def _handshake_app(self) -> None:
        assert self._upstream is not None
        selected = self._upstream.selected_alpn_protocol()
        if selected and selected not in self.meta.alpn:
            raise HandshakeFailed(f"upstream chose ALPN {selected!r} the app did not offer")
        host = self.meta.sni or str(self.key.remote_addr)
        try:
            server_ctx = self._ca.server_context(host, (selected,) if selected else ())
        except CaUnavailable as e:
            raise HandshakeFailed(str(e)) from e
        self._tls = server_ctx.wrap_bio(self._incoming, self._outgoing, server_side=True)
        self._incoming.write(self._first_bytes)
        deadline = time.monotonic() + self._timeout
        while True:
            try:
                self._tls.do_handshake()
                break
            except ssl.SSLWantReadError:
                self._flush_outgoing()
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise HandshakeFailed("app handshake timed out")
                try:
                    chunk = self._app_in.get(timeout=remaining)
                except queue.Empty:
                    raise HandshakeFailed("app handshake timed out") from None
                if not chunk:
                    raise HandshakeFailed("app closed during handshake")
                self._incoming.write(chunk)
            except ssl.SSLError as e:
                self._flush_outgoing()
                raise HandshakeFailed(getattr(e, "reason", None) or str(e)) from e
        self._flush_outgoing()

    def _pump_app(self) -> None:
        """App ciphertext -> cleartext -> upstream."""
        assert self._tls is not None and self._upstream is not None
        while not self._stop.is_set():
            chunk = self._app_in.get()
            if chunk is None:
                return
            if not chunk:
                self._half_close_upstream()
                return
            self._incoming.write(chunk)
            while True:
                with self._tls_lock:
                    try:
                        clear = self._tls.read(_RECV_SIZE)
                    except ssl.SSLWantReadError:
                        clear = None
                    except ssl.SSLZeroReturnError:
                        clear = b""
                    self._flush_outgoing_locked()
                if clear is None:
                    break
                if not clear:
                    self._half_close_upstream()
                    return
                self._copy(Direction.OUTBOUND, clear)
                self._upstream.sendall(clear)

    def _pump_upstream(self) -> None:
        """Upstream cleartext -> app ciphertext."""
        assert self._tls is not None and self._upstream is not None
        try:
            while not self._stop.is_set():
                try:
                    clear = self._upstream.recv(_RECV_SIZE)
                except (OSError, ValueError):
                    clear = b""
                if not clear:
                    with self._tls_lock:
                        try:
                            self._tls.unwrap()
                        except ssl.SSLError:
                            pass
                        self._flush_outgoing_locked()
                    self._emit(b"")
                    return
                self._copy(Direction.INBOUND, clear)
                with self._tls_lock:
                    self._tls.write(clear)
                    self._flush_outgoing_locked()
        except Exception:
            if not self._stop.is_set():
                logger.exception("Upstream relay failed for %s", self.key)
                self._emit(ConnectionResetError("upstream relay failed"))

    # -- helpers ------------------------------------------------------------

    def _flush_outgoing(self) -> None:
        with self._tls_lock:
            self._flush_outgoing_locked()

    def _flush_outgoing_locked(self) -> None:
        data = self._outgoing.read()
        if data:
            self._emit(data)

    def _emit(self, item: AppOutItem) -> None:
        while not self._stop.is_set():
            try:
                self.app_out.put(item, timeout=0.1)
                return
            except queue.Full:
                continue

    def _copy(self, direction: Direction, data: bytes) -> None:
        if self._mirror is not None:
            self._mirror.enqueue_copy(self.flow_id, direction, data, time.monotonic())

    def _finish(self, outcome: TlsOutcome, reason: Optional[str]) -> None:
        self.outcome = self.meta.with_outcome(outcome, reason)
        if self._mirror is not None:
            self._mirror.tls_meta(self.flow_id, self.outcome, time.monotonic())

    def _fail(self, error: Exception) -> None:
        reason = getattr(error, "reason", None) or str(error)
        logger.info("TLS intercept of %s failed: %s", self.key, reason)
        self._finish(TlsOutcome.HANDSHAKE_FAILED, reason)
        if self._on_failure is not None:
            self._on_failure(self.meta, reason)
        self._close_upstream()
        self._emit(error)
        self.done.set()

    def _half_close_upstream(self) -> None:
        if self._upstream is None:
            return
        try:
            socket.socket.shutdown(self._upstream, socket.SHUT_WR)
        except OSError:
            pass

    def _close_upstream(self) -> None:
        sock = self._upstream or self._upstream_raw
        try:
            # wakes a recv blocked in the other relay thread
            socket.socket.shutdown(sock, socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            sock.close()
        except OSError:
            pass

