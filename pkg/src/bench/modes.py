"""The two-row operational-mode table: Performance vs LowPower."""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

from src.bench.cpu import cpu_profile
from src.bench.latency import tcp_connect_bench, udp_echo_bench
from src.bench.report import BenchReport
from src.bench.throughput import DOWNLINK, UPLINK, tcp_speed_test
from src.bench.tls_bench import SMALL_OBJECT, tls_bench
from src.forwarder import ForwarderConfig, Mode

logger = logging.getLogger("flowtap.bench.modes")

TABLE_MODES = (Mode.PERFORMANCE, Mode.LOW_POWER)


@dataclass
class ModeRow:
    mode: str
    idle_sleep_ms: float
    max_idle_cycles: int
    udp_rtt_ms: float
    tcp_connect_ms: float
    tls_connect_ms: float
    uplink_mbps: float
    downlink_mbps: float
    cpu_pct: float

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


def mode_table(
    modes: Sequence[Mode] = TABLE_MODES,
    n: int = 50,
    tls_n: int = 10,
    speed_duration: float = 5.0,
    cpu_duration: float = 10.0,
    reports: Optional[List[BenchReport]] = None,
) -> List[ModeRow]:
    """One row per mode; every underlying report is appended to ``reports``."""
    rows: List[ModeRow] = []
    for mode in modes:
        config = ForwarderConfig.for_mode(mode)
        logger.info("Mode table: measuring %s", mode.value)
        udp = udp_echo_bench(n=n, config=config)
        connect = tcp_connect_bench(n=n, config=config)
        tls = tls_bench(sizes=(SMALL_OBJECT,), n=tls_n, config=config)
        up = tcp_speed_test(UPLINK, duration=speed_duration, config=config)
        down = tcp_speed_test(DOWNLINK, duration=speed_duration, config=config)
        cpu = cpu_profile(duration=cpu_duration, config=config)
        rows.append(
            ModeRow(
                mode=mode.value,
                idle_sleep_ms=config.idle_sleep_ms,
                max_idle_cycles=config.max_idle_cycles,
                udp_rtt_ms=udp.mean("rtt_ms"),
                tcp_connect_ms=connect.mean("connect_ms"),
                tls_connect_ms=tls.mean("proxy_off_establish_ms"),
                uplink_mbps=up.mean("mbps"),
                downlink_mbps=down.mean("mbps"),
                cpu_pct=cpu.mean("cpu_pct"),
            )
        )
        if reports is not None:
            reports.extend([udp, connect, tls, up, down, cpu])
    return rows
