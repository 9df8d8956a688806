"""Opt-in TLS interception."""

from src.tls_gate.ca import CaIdentity, CaUnavailable, LeafCredentials, export_ca_pem, mint_leaf
from src.tls_gate.client_hello import (
    NotTls,
    TlsFlowMeta,
    TlsOutcome,
    TlsTruncated,
    detect_client_hello,
)
from src.tls_gate.gate import TlsGate
from src.tls_gate.proxy import HandshakeFailed, ProxySession, UpstreamConnectFailed
from src.tls_gate.whitelist import WHITELIST_TTL, InterceptWhitelist, whitelist_key

__all__ = [
    "CaIdentity",
    "CaUnavailable",
    "HandshakeFailed",
    "InterceptWhitelist",
    "LeafCredentials",
    "NotTls",
    "ProxySession",
    "TlsFlowMeta",
    "TlsGate",
    "TlsOutcome",
    "TlsTruncated",
    "UpstreamConnectFailed",
    "WHITELIST_TTL",
    "detect_client_hello",
    "export_ca_pem",
    "mint_leaf",
    "whitelist_key",
]
