"""Desk-scale benches for the gateway: latency, throughput, TLS, CPU, DNS timing."""

from src.bench.cpu import cpu_profile
from src.bench.dns_calibration import ResolverUnreachable, dns_calibration
from src.bench.endpoint import InprocGateway, KernelTransport, TargetUnreachable
from src.bench.latency import off_path_bench, tcp_connect_bench, tcp_echo_bench, udp_echo_bench
from src.bench.modes import ModeRow, mode_table
from src.bench.report import BenchReport, MetricSummary, recompute
from src.bench.throughput import DOWNLINK, UPLINK, tcp_speed_test
from src.bench.tls_bench import tls_bench

__all__ = [
    "BenchReport",
    "DOWNLINK",
    "InprocGateway",
    "KernelTransport",
    "MetricSummary",
    "ModeRow",
    "ResolverUnreachable",
    "TargetUnreachable",
    "UPLINK",
    "cpu_profile",
    "dns_calibration",
    "mode_table",
    "off_path_bench",
    "recompute",
    "tcp_connect_bench",
    "tcp_echo_bench",
    "tcp_speed_test",
    "tls_bench",
    "udp_echo_bench",
]
