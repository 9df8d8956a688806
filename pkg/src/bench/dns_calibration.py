"""DNS timing calibration: how far gateway and app RTTs sit from the wire.

Each query goes to a fresh ``<nonce>.<domain>`` so no cache answers it.
The bundled resolver stamps when it received the query and sent the answer,
standing in for a capture next to the server; both the analyzer's RTT and
the app's RTT are compared against that reference.
"""

import logging
import random
import socket
import threading
import time
import uuid
from contextlib import ExitStack
from typing import Callable, Dict, Optional

from dnslib import DNSRecord

from src.analyzer.events import AnalyzerEvent, DnsTransaction
from src.bench.endpoint import Address, InprocGateway
from src.bench.report import BenchReport
from src.bench.servers import DnsBenchServer
from src.forwarder import ForwarderConfig, Mode

logger = logging.getLogger("flowtap.bench.dns")

BASE_DELAY = 0.250
JITTER = 0.400


class ResolverUnreachable(ConnectionError):
    """The resolver did not answer the probe query."""


def default_delay_law(scale: float = 1.0) -> Callable[[], float]:
    """250 ms + uniform(0, 400) ms between queries, optionally shortened."""
    return lambda: (BASE_DELAY + random.uniform(0.0, JITTER)) * scale


def calibration_config() -> ForwarderConfig:
    # The loop never sleeps between queries, so buffering time stays out
    # of both measurements and only timestamping differs.
    return ForwarderConfig.for_mode(Mode.CUSTOM, idle_sleep_ms=1.0, max_idle_cycles=10_000_000)


def _probe(resolver: Address) -> None:
    query = DNSRecord.question("probe.flowtap.test").pack()
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        s.settimeout(2.0)
        try:
            s.sendto(query, resolver)
            s.recv(4096)
        except OSError as e:
            raise ResolverUnreachable(f"{resolver[0]}:{resolver[1]}: {e}") from e


def dns_calibration(
    n: int = 500,
    resolver: Optional[Address] = None,
    domain_template: str = "{nonce}.calibration.flowtap.test",
    delay_law: Optional[Callable[[], float]] = None,
    config: Optional[ForwarderConfig] = None,
) -> BenchReport:
    delay_law = delay_law or default_delay_law()
    config = config or calibration_config()
    report = BenchReport(scenario="dns_calibration", config=config.to_dict(), declared_n=n)
    gateway_rtt: Dict[str, float] = {}
    seen = threading.Condition()

    def on_event(event: AnalyzerEvent) -> None:
        if isinstance(event, DnsTransaction) and event.rtt_ms is not None:
            with seen:
                gateway_rtt[event.qname.rstrip(".").lower()] = event.rtt_ms
                seen.notify_all()

    with ExitStack() as stack:
        server = None
        if resolver is None:
            server = stack.enter_context(DnsBenchServer())
            resolver = server.address
        _probe(resolver)
        gateway = stack.enter_context(
            InprocGateway(config, analyzer=True, dns_ports=(53, resolver[1]))
        )
        assert gateway.analyzer is not None
        gateway.analyzer.add_listener(on_event)

        sock = gateway.transport.udp_socket(resolver)
        lost = 0
        try:
            for _ in range(n):
                qname = domain_template.format(nonce=uuid.uuid4().hex[:12]).lower()
                query = DNSRecord.question(qname)
                start = time.perf_counter()
                sock.send(query.pack())
                reply = sock.recv(2.0)
                app_ms = (time.perf_counter() - start) * 1000.0
                if reply is None:
                    lost += 1
                    continue
                with seen:
                    seen.wait_for(lambda: qname in gateway_rtt, 1.0)
                    gw_ms = gateway_rtt.get(qname)
                if gw_ms is None:
                    lost += 1
                    continue
                report.add("app_rtt_ms", app_ms)
                report.add("gateway_rtt_ms", gw_ms)
                # an external resolver has no reference stamps
                stamp = server.resolver.stamps.get(qname) if server else None
                if stamp is not None:
                    wire_ms = (stamp.answered - stamp.received) * 1000.0
                    report.add("app_diff_us", (app_ms - wire_ms) * 1000.0)
                    report.add("gateway_diff_us", (gw_ms - wire_ms) * 1000.0)
                time.sleep(delay_law())
        finally:
            sock.close()
            gateway.analyzer.remove_listener(on_event)

    report.extra["lost"] = lost
    if "app_diff_us" in report.samples:
        report.extra["mean_gap_us"] = abs(
            report.mean("gateway_diff_us") - report.mean("app_diff_us")
        )
    logger.info("DNS calibration: %s", report.extra)
    return report
