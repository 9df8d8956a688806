"""Echo and connection-time benches.

Every bench measures the same client against the same server twice: once
over plain kernel sockets (gateway off) and once through the gateway, and
reports the per-sample difference as the added latency.
"""

import logging
import random
import time
from contextlib import ExitStack
from typing import Callable, List, Optional

from src.bench.endpoint import (
    Address,
    InprocGateway,
    KernelTransport,
    TargetUnreachable,
)
from src.bench.report import BenchReport
from src.bench.servers import EchoServer
from src.forwarder import ForwarderConfig
from src.packet_codec import Direction

logger = logging.getLogger("flowtap.bench.latency")

ECHO_PAYLOAD = 64
RECV_TIMEOUT = 2.0


def _jittered(delay: float) -> None:
    # jitter keeps sends from locking onto the loop's sleep phase
    if delay > 0:
        time.sleep(delay * random.uniform(0.5, 1.5))


def _udp_rtts(transport, target: Address, n: int, inter_send_delay: float) -> List[float]:
    sock = transport.udp_socket(target)
    rtts: List[float] = []
    lost = 0
    try:
        payload = bytes(random.getrandbits(8) for _ in range(ECHO_PAYLOAD))
        for _ in range(n):
            start = time.perf_counter()
            sock.send(payload)
            reply = sock.recv(RECV_TIMEOUT)
            elapsed = time.perf_counter() - start
            if reply is None:
                lost += 1
            else:
                rtts.append(elapsed * 1000.0)
            _jittered(inter_send_delay)
    finally:
        sock.close()
    if not rtts:
        raise TargetUnreachable(f"no UDP echo from {target[0]}:{target[1]}")
    if lost:
        logger.warning("%d of %d UDP echoes lost", lost, n)
    return rtts


def _tcp_rtts(transport, target: Address, n: int, inter_send_delay: float) -> List[float]:
    conn = transport.tcp_connect(target)
    rtts: List[float] = []
    try:
        payload = bytes(random.getrandbits(8) for _ in range(ECHO_PAYLOAD))
        for _ in range(n):
            start = time.perf_counter()
            conn.sendall(payload)
            got = 0
            while got < len(payload):
                chunk = conn.recv(len(payload) - got, RECV_TIMEOUT)
                if not chunk:
                    raise TargetUnreachable("echo server closed the connection")
                got += len(chunk)
            rtts.append((time.perf_counter() - start) * 1000.0)
            _jittered(inter_send_delay)
    finally:
        conn.close()
    return rtts


def _connect_times(transport, target: Address, n: int, inter_send_delay: float) -> List[float]:
    times: List[float] = []
    for _ in range(n):
        start = time.perf_counter()
        conn = transport.tcp_connect(target)
        times.append((time.perf_counter() - start) * 1000.0)
        conn.close()
        _jittered(inter_send_delay)
    return times


def _compare(
    scenario: str,
    measure: Callable[[object, Address, int, float], List[float]],
    n: int,
    target: Optional[Address],
    inter_send_delay: float,
    config: Optional[ForwarderConfig],
    metric: str,
) -> BenchReport:
    report = BenchReport(
        scenario=scenario,
        config=config.to_dict() if config else {"gateway": "off"},
        declared_n=n,
    )
    with ExitStack() as stack:
        if target is None:
            target = stack.enter_context(EchoServer()).address
        baseline = measure(KernelTransport(), target, n, inter_send_delay)
        report.extend(f"baseline_{metric}", baseline)
        if config is None:
            report.extend(metric, baseline)
            report.extend("added_ms", [0.0] * len(baseline))
            return report
        gateway = stack.enter_context(InprocGateway(config))
        through = measure(gateway.transport, target, n, inter_send_delay)
        report.extend(metric, through)
        base_mean = sum(baseline) / len(baseline)
        report.extend("added_ms", [v - base_mean for v in through])
        report.extra["loop"] = gateway.forwarder.stats.snapshot()
    logger.info(
        "%s: added %.3f ms mean over %d samples", scenario, report.mean("added_ms"), n
    )
    return report


def udp_echo_bench(
    n: int = 200,
    target: Optional[Address] = None,
    inter_send_delay: float = 0.05,
    config: Optional[ForwarderConfig] = None,
) -> BenchReport:
    """Per-packet UDP RTT with and without the gateway.

    ``config=None`` measures the gateway-off baseline only; added latency is
    then zero by construction.
    """
    return _compare("udp_echo", _udp_rtts, n, target, inter_send_delay, config, "rtt_ms")


def tcp_echo_bench(
    n: int = 200,
    target: Optional[Address] = None,
    inter_send_delay: float = 0.05,
    config: Optional[ForwarderConfig] = None,
) -> BenchReport:
    return _compare("tcp_echo", _tcp_rtts, n, target, inter_send_delay, config, "rtt_ms")


def tcp_connect_bench(
    n: int = 50,
    target: Optional[Address] = None,
    inter_send_delay: float = 0.05,
    config: Optional[ForwarderConfig] = None,
) -> BenchReport:
    """TCP connection-establishment time, SYN to SYN/ACK as the app sees it."""
    return _compare(
        "tcp_connect", _connect_times, n, target, inter_send_delay, config, "connect_ms"
    )


def off_path_bench(
    n: int = 200,
    config: Optional[ForwarderConfig] = None,
    inter_send_delay: float = 0.02,
    queue_capacity: int = 100,
) -> BenchReport:
    """UDP echo latency with the analyzer consuming vs stalled behind a full queue."""
    config = config or ForwarderConfig()
    report = BenchReport(scenario="off_path", config=config.to_dict(), declared_n=n)
    with EchoServer() as echo:
        for label, stalled in (("running", False), ("stalled", True)):
            with InprocGateway(
                config, analyzer=True, queue_capacity=queue_capacity, stall_analyzer=stalled
            ) as gateway:
                assert gateway.queue is not None
                if stalled:
                    # a filler flow occupies every slot before the measurement starts
                    for _ in range(queue_capacity):
                        gateway.queue.enqueue_copy(0, Direction.OUTBOUND, b"\x00" * 512)
                rtts = _udp_rtts(gateway.transport, echo.address, n, inter_send_delay)
                report.extend(f"{label}_rtt_ms", rtts)
                report.extra[f"{label}_queue"] = gateway.queue.snapshot()
    logger.info(
        "off-path: running %.3f ms, stalled %.3f ms, %d copies dropped",
        report.mean("running_rtt_ms"),
        report.mean("stalled_rtt_ms"),
        report.extra["stalled_queue"]["dropped"],
    )
    return report
