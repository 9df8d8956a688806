"""Prometheus exporter for live gateway status."""

import logging
from typing import Callable, Dict, Optional

from prometheus_client import CollectorRegistry, generate_latest, start_http_server
from prometheus_client.core import CounterMetricFamily, GaugeMetricFamily

logger = logging.getLogger("flowtap.prometheus")

_LOOP_COUNTERS = {
    "cycles": "Forwarder loop iterations",
    "tun_reads": "Packets read from the TUN device",
    "socket_reads": "Reads from gateway sockets",
    "sleeps": "Times the loop went to sleep after an idle streak",
    "tun_writes": "Packets written to the TUN device",
    "malformed": "Packets dropped as malformed",
    "unsupported": "Packets dropped as unsupported",
    "socket_errors": "Socket errors reported to the flow engine",
    "tls_handoffs": "Flows handed to the TLS proxy",
}


class GatewayStatusCollector:
    """Custom Prometheus collector reading a gateway status snapshot.

    ``status`` returns the same dict the control socket answers ``status``
    with; it is called once per scrape.
    """

    def __init__(self, status: Callable[[], dict]):
        self.status = status

    def collect(self):
        try:
            snap = self.status()
        except Exception as e:
            logger.exception(f"Error collecting gateway status: {e}")
            return

        loop: Dict = snap.get("forwarder") or {}
        for name, doc in _LOOP_COUNTERS.items():
            if name in loop:
                yield CounterMetricFamily(f"flowtap_forwarder_{name}", doc, value=loop[name])

        drops = CounterMetricFamily(
            "flowtap_forwarder_drops", "Segments dropped by the flow engine", labels=["reason"]
        )
        for reason, count in sorted((loop.get("drops") or {}).items()):
            drops.add_metric([str(reason)], count)
        yield drops

        for name, doc in (("flows", "Live flows"), ("sockets", "Open gateway sockets")):
            if name in loop:
                yield GaugeMetricFamily(f"flowtap_{name}", doc, value=loop[name])

        analyzer: Optional[Dict] = snap.get("analyzer")
        if analyzer:
            queue = analyzer.get("queue") or {}
            yield GaugeMetricFamily(
                "flowtap_mirror_queue_depth",
                "Copies waiting for the analyzer",
                value=queue.get("depth", 0),
            )
            yield GaugeMetricFamily(
                "flowtap_mirror_queue_capacity",
                "Mirror queue capacity",
                value=queue.get("capacity", 0),
            )
            yield CounterMetricFamily(
                "flowtap_mirror_queue_dropped",
                "Copies dropped on a full queue",
                value=queue.get("dropped", 0),
            )
            yield GaugeMetricFamily(
                "flowtap_mirror_queue_control_depth",
                "Flow open/close and TLS records waiting for the analyzer",
                value=queue.get("control_depth", 0),
            )
            yield CounterMetricFamily(
                "flowtap_mirror_queue_refused_flows",
                "Flows not mirrored because the control bound was reached",
                value=queue.get("refused_flows", 0),
            )
            yield CounterMetricFamily(
                "flowtap_analyzer_events",
                "Events emitted by the analyzer",
                value=analyzer.get("events", 0),
            )
            yield CounterMetricFamily(
                "flowtap_analyzer_parse_errors",
                "Analyzer parse failures",
                value=analyzer.get("parse_errors", 0),
            )

        tls: Optional[Dict] = snap.get("tls")
        if tls:
            outcomes = CounterMetricFamily(
                "flowtap_tls_flows", "TLS flows by interception outcome", labels=["outcome"]
            )
            for outcome, count in sorted((tls.get("outcomes") or {}).items()):
                outcomes.add_metric([outcome], count)
            yield outcomes
            yield GaugeMetricFamily(
                "flowtap_tls_whitelisted_hosts",
                "Hosts currently exempt from interception",
                value=tls.get("whitelisted_hosts", 0),
            )


def create_exporter(status: Callable[[], dict], registry: Optional[CollectorRegistry] = None):
    """Create and register the exporter.

    Args:
        status: Snapshot callable, see ``GatewayStatusCollector``
        registry: Registry to use (default a fresh one)

    Returns:
        (collector, registry)
    """
    registry = registry or CollectorRegistry()
    collector = GatewayStatusCollector(status)
    registry.register(collector)
    return collector, registry


def serve_metrics(status: Callable[[], dict], port: int, addr: str = "127.0.0.1"):
    """Expose the collector over HTTP.

    Args:
        status: Snapshot callable, see ``GatewayStatusCollector``
        port: Listen port
        addr: Listen address (default loopback only)

    Returns:
        The registry the collector is registered in
    """
    _, registry = create_exporter(status)
    start_http_server(port, addr=addr, registry=registry)
    logger.info(f"Prometheus metrics on http://{addr}:{port}/metrics")
    return registry


def get_metrics_bytes(registry: CollectorRegistry) -> bytes:
    """Metrics in Prometheus text exposition format."""
    return generate_latest(registry)


__all__ = ["GatewayStatusCollector", "create_exporter", "get_metrics_bytes", "serve_metrics"]
