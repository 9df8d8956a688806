"""Speed test: parallel TCP connections pushing or pulling bulk data."""

import logging
import struct
import threading
import time
from contextlib import ExitStack
from typing import List, Optional

from src.analyzer.leaks import PatternSet
from src.bench.endpoint import Address, InprocGateway, KernelTransport
from src.bench.report import BenchReport
from src.bench.servers import SPEED_CHUNK, SPEED_DOWNLOAD, SPEED_UPLOAD, SpeedServer
from src.forwarder import ForwarderConfig

logger = logging.getLogger("flowtap.bench.throughput")

UPLINK = "uplink"
DOWNLINK = "downlink"


def _one_stream(
    transport, target: Address, direction: str, duration: float, out: List[int]
) -> None:
    conn = transport.tcp_connect(target)
    moved = 0
    deadline = time.monotonic() + duration
    try:
        if direction == UPLINK:
            conn.sendall(SPEED_UPLOAD)
            chunk = b"\x5a" * SPEED_CHUNK
            while time.monotonic() < deadline:
                conn.sendall(chunk)
                moved += len(chunk)
            conn.shutdown_write()
            # the server answers with what it actually received
            reply = b""
            while len(reply) < 8:
                part = conn.recv(8 - len(reply), 30.0)
                if not part:
                    break
                reply += part
            if len(reply) == 8:
                moved = struct.unpack("!Q", reply)[0]
        else:
            conn.sendall(SPEED_DOWNLOAD)
            while time.monotonic() < deadline:
                data = conn.recv(SPEED_CHUNK, 5.0)
                if not data:
                    break
                moved += len(data)
    except (OSError, TimeoutError) as e:
        logger.warning("%s stream ended early: %s", direction, e)
    finally:
        abort = getattr(conn, "abort", None)
        if direction == DOWNLINK and abort is not None:
            abort()
        else:
            conn.close()
    out.append(moved)


def measure_goodput(
    transport, target: Address, direction: str, duration: float, parallel: int
) -> float:
    """Aggregate goodput in Mbit/s across ``parallel`` connections."""
    totals: List[int] = []
    threads = [
        threading.Thread(
            target=_one_stream,
            args=(transport, target, direction, duration, totals),
            name=f"speed-{direction}-{i}",
            daemon=True,
        )
        for i in range(parallel)
    ]
    start = time.perf_counter()
    for t in threads:
        t.start()
    for t in threads:
        t.join(duration + 60.0)
    elapsed = time.perf_counter() - start
    return sum(totals) * 8 / elapsed / 1e6


def tcp_speed_test(
    direction: str = DOWNLINK,
    duration: float = 15.0,
    parallel: int = 3,
    config: Optional[ForwarderConfig] = None,
    target: Optional[Address] = None,
    analyzer: bool = False,
    patterns: Optional[PatternSet] = None,
    repeat: int = 1,
) -> BenchReport:
    """Goodput through the gateway (or kernel-only with ``config=None``).

    ``analyzer`` mirrors every flow into a running analyzer so its cost
    shows up in the figure.
    """
    if direction not in (UPLINK, DOWNLINK):
        raise ValueError(f"direction must be {UPLINK!r} or {DOWNLINK!r}")
    report = BenchReport(
        scenario=f"speed_{direction}{'_analyzer' if analyzer else ''}",
        config=config.to_dict() if config else {"gateway": "off"},
        declared_n=repeat,
        extra={"duration_s": duration, "parallel": parallel, "analyzer": analyzer},
    )
    with ExitStack() as stack:
        if target is None:
            target = stack.enter_context(SpeedServer()).address
        for _ in range(repeat):
            if config is None:
                mbps = measure_goodput(KernelTransport(), target, direction, duration, parallel)
            else:
                with InprocGateway(config, analyzer=analyzer, patterns=patterns) as gateway:
                    mbps = measure_goodput(
                        gateway.transport, target, direction, duration, parallel
                    )
            report.add("mbps", mbps)
            logger.info("%s %.1f Mbit/s", report.scenario, mbps)
    return report
