"""Decides per TCP flow whether TLS is intercepted, relayed untouched or ignored."""

import logging
import socket
import ssl
import threading
from collections import Counter
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from src.flow_engine import Classification, StreamVerdict
from src.packet_codec import FlowKey
from src.tls_gate.ca import CaIdentity
from src.tls_gate.client_hello import (
    TLS1_2,
    NotTls,
    TlsFlowMeta,
    TlsOutcome,
    TlsTruncated,
    detect_client_hello,
)
from src.tls_gate.proxy import HANDSHAKE_TIMEOUT, ProxySession
from src.tls_gate.whitelist import InterceptWhitelist, whitelist_key

logger = logging.getLogger("flowtap.tls_gate")

# A Client Hello that has not completed by now is treated as not-TLS.
MAX_HELLO_BYTES = 32 * 1024


class TlsGate:
    """Classifier plugged into the flow engine plus the proxy launcher.

    With ``enabled`` false every flow passes through unmodified; the analyzer
    still reports the Client Hello it sees as a bypassed TLS flow.
    """

    def __init__(
        self,
        enabled: bool = False,
        ca: Optional[CaIdentity] = None,
        whitelist: Optional[InterceptWhitelist] = None,
        verify_upstream: bool = True,
        upstream_ca_file: Optional[Path] = None,
        handshake_timeout: float = HANDSHAKE_TIMEOUT,
    ):
        if enabled and ca is None:
            raise ValueError("interception needs a CA")
        self.enabled = enabled
        self.ca = ca
        self.whitelist = whitelist or InterceptWhitelist()
        self.verify_upstream = verify_upstream
        self.upstream_ca_file = upstream_ca_file
        self.handshake_timeout = handshake_timeout
        self.outcomes: Counter = Counter()
        self._contexts: Dict[Tuple[Tuple[str, ...], bool], ssl.SSLContext] = {}
        self._lock = threading.Lock()

    # -- classification -----------------------------------------------------

    def classify(self, key: FlowKey, first_bytes: bytes) -> Classification:
        if not self.enabled:
            return Classification(StreamVerdict.PASS)
        try:
            meta = detect_client_hello(first_bytes)
        except TlsTruncated:
            if len(first_bytes) >= MAX_HELLO_BYTES:
                return Classification(StreamVerdict.PASS)
            return Classification(StreamVerdict.NEED_MORE)
        except NotTls:
            return Classification(StreamVerdict.PASS)

        wl_key = whitelist_key(meta.sni, key.remote_addr, key.remote_port)
        if self.whitelist.contains(wl_key):
            return self._bypass(meta, "whitelisted")
        if meta.max_version < TLS1_2:
            self.whitelist.add(wl_key, "unsupported TLS version")
            return self._bypass(meta, "unsupported-version")
        return Classification(StreamVerdict.DIVERT, meta)

    def _bypass(self, meta: TlsFlowMeta, reason: str) -> Classification:
        with self._lock:
            self.outcomes[TlsOutcome.BYPASSED.value] += 1
        return Classification(StreamVerdict.BYPASS, meta.with_outcome(TlsOutcome.BYPASSED, reason))

    # -- proxying -----------------------------------------------------------

    def client_context(self, alpn: Tuple[str, ...], check_hostname: bool) -> ssl.SSLContext:
        """Upstream client context, cached per ALPN offer."""
        cache_key = (tuple(alpn), check_hostname)
        with self._lock:
            ctx = self._contexts.get(cache_key)
            if ctx is not None:
                return ctx
            if self.verify_upstream:
                ctx = ssl.create_default_context()
                if self.upstream_ca_file:
                    ctx.load_verify_locations(cafile=str(self.upstream_ca_file))
                ctx.check_hostname = check_hostname
            else:
                ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
                ctx.check_hostname = False
                ctx.verify_mode = ssl.CERT_NONE
            ctx.minimum_version = ssl.TLSVersion.TLSv1_2
            if alpn:
                ctx.set_alpn_protocols(list(alpn))
            self._contexts[cache_key] = ctx
            return ctx

    def start_proxy(
        self,
        key: FlowKey,
        upstream: socket.socket,
        meta: TlsFlowMeta,
        first_bytes: bytes,
        mirror: Any = None,
        flow_id: int = 0,
    ) -> ProxySession:
        assert self.ca is not None
        session = ProxySession(
            key,
            upstream,
            meta,
            first_bytes,
            ca=self.ca,
            client_context=self.client_context,
            mirror=mirror,
            flow_id=flow_id,
            on_failure=lambda m, reason: self._on_failure(key, m, reason),
            handshake_timeout=self.handshake_timeout,
        )
        with self._lock:
            self.outcomes["started"] += 1
        return session.start()

    def _on_failure(self, key: FlowKey, meta: TlsFlowMeta, reason: str) -> None:
        self.whitelist.add(whitelist_key(meta.sni, key.remote_addr, key.remote_port), reason)
        with self._lock:
            self.outcomes[TlsOutcome.HANDSHAKE_FAILED.value] += 1

    def snapshot(self) -> dict:
        with self._lock:
            outcomes = dict(self.outcomes)
        return {
            "enabled": self.enabled,
            "whitelisted_hosts": len(self.whitelist),
            "outcomes": outcomes,
        }
