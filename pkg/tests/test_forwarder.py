"""Tests for the polling forwarder loop."""

import ipaddress
import socket
import threading
import time
from unittest.mock import MagicMock

import pytest

from src.bench.endpoint import APP_NETWORK, TargetUnreachable, VirtualHost
from src.bench.servers import EchoServer
from src.flow_engine import FlowEngine
from src.forwarder import (
    MODE_PRESETS,
    Forwarder,
    ForwarderConfig,
    LatencySample,
    Mode,
    summarize_samples,
)
from src.packet_codec import Direction
from src.tun import MemoryTun


def wait_for(predicate, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(0.005)
    return predicate()


class Rig:
    """Forwarder thread plus a virtual app host over one MemoryTun."""

    def __init__(self, config=None, **kwargs):
        self.tun = MemoryTun()
        self.forwarder = Forwarder(
            config or ForwarderConfig.for_mode(Mode.PERFORMANCE),
            self.tun,
            FlowEngine(),
            local_net=ipaddress.ip_network(APP_NETWORK),
            **kwargs,
        )
        self.host = VirtualHost(self.tun)
        self.stop_event = threading.Event()
        self.thread = None

    def __enter__(self):
        self.thread = self.forwarder.start(self.stop_event)
        self.host.start()
        return self

    def stop(self):
        self.stop_event.set()
        self.thread.join(2.0)

    def __exit__(self, *exc):
        if not self.stop_event.is_set():
            self.stop()
        self.host.stop()


@pytest.fixture
def echo():
    with EchoServer() as server:
        yield server


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def test_mode_presets():
    perf = ForwarderConfig.for_mode(Mode.PERFORMANCE)
    low = ForwarderConfig.for_mode("lowpower")
    assert (perf.idle_sleep_ms, perf.max_idle_cycles) == (10.0, 100)
    assert (low.idle_sleep_ms, low.max_idle_cycles) == (100.0, 100)
    assert perf.c_tun == perf.c_nio == 100
    assert MODE_PRESETS[Mode.LOW_POWER] == (100.0, 100)


def test_custom_mode_needs_both_knobs():
    with pytest.raises(ValueError):
        ForwarderConfig.for_mode(Mode.CUSTOM, idle_sleep_ms=5)
    cfg = ForwarderConfig.for_mode(Mode.CUSTOM, idle_sleep_ms=5, max_idle_cycles=10)
    assert cfg.to_dict() == {
        "idle_sleep_ms": 5,
        "max_idle_cycles": 10,
        "c_tun": 100,
        "c_nio": 100,
        "mode": "custom",
    }


@pytest.mark.parametrize(
    "kwargs",
    [
        {"idle_sleep_ms": 0},
        {"max_idle_cycles": -1},
        {"c_tun": 0},
        {"idle_sleep_ms": 50.0, "mode": Mode.PERFORMANCE},
    ],
)
def test_invalid_config_rejected(kwargs):
    with pytest.raises(ValueError):
        ForwarderConfig(**kwargs)


def test_set_mode_takes_effect_and_keeps_batch_sizes():
    forwarder = Forwarder(
        ForwarderConfig(c_tun=8, c_nio=16), MemoryTun(), FlowEngine()
    )
    new = forwarder.set_mode(Mode.LOW_POWER)
    assert forwarder.config is new
    assert forwarder.stats.config is new
    assert (new.idle_sleep_ms, new.c_tun, new.c_nio) == (100.0, 8, 16)

    with pytest.raises(ValueError):
        forwarder.set_mode(Mode.CUSTOM)
    assert forwarder.config is new


# ---------------------------------------------------------------------------
# Idle behaviour
# ---------------------------------------------------------------------------


def test_sleeps_after_max_idle_cycles():
    """With no traffic every third cycle sleeps."""
    config = ForwarderConfig.for_mode(Mode.CUSTOM, idle_sleep_ms=5, max_idle_cycles=3)
    with Rig(config) as rig:
        assert wait_for(lambda: rig.forwarder.stats.sleeps >= 5)
        rig.stop()

    stats = rig.forwarder.stats
    assert 0 <= stats.cycles - 3 * stats.sleeps <= 2
    pattern = [t.slept for t in list(stats.trace)[:9]]
    assert pattern == [False, False, True] * 3


def test_idle_sleep_bounds_cycle_rate():
    config = ForwarderConfig.for_mode(Mode.CUSTOM, idle_sleep_ms=100, max_idle_cycles=1)
    with Rig(config) as rig:
        time.sleep(0.35)
        rig.stop()
    # one cycle per sleep; the first may start immediately
    assert 2 <= rig.forwarder.stats.cycles <= 6


def test_stop_interrupts_a_long_sleep():
    config = ForwarderConfig.for_mode(Mode.CUSTOM, idle_sleep_ms=60_000, max_idle_cycles=1)
    with Rig(config) as rig:
        assert wait_for(lambda: rig.forwarder.stats.sleeps == 1)
        started = time.monotonic()
        rig.stop()
        assert time.monotonic() - started < 1.0
        assert not rig.thread.is_alive()


# ---------------------------------------------------------------------------
# Traffic
# ---------------------------------------------------------------------------


def test_malformed_and_unsupported_packets_are_counted():
    icmp = bytes.fromhex("4500001c000100004001") + b"\x00\x00" + bytes([10, 7, 0, 2, 1, 1, 1, 1])
    icmp += b"\x08\x00\xf7\xff\x00\x00\x00\x00"
    with Rig() as rig:
        rig.tun.inject(b"\x00\x01\x02")
        rig.tun.inject(icmp)
        assert wait_for(lambda: rig.forwarder.stats.tun_reads == 2)
    stats = rig.forwarder.stats
    assert stats.malformed == 1
    assert stats.unsupported == 1
    assert len(rig.forwarder.engine) == 0


def test_udp_round_trip_is_mirrored(echo):
    tx = MagicMock()
    with Rig(analyzer_tx=tx) as rig:
        sock = rig.host.udp_socket(echo.address)
        sock.send(b"ping")
        assert sock.recv(timeout=5.0) == b"ping"

    tx.open_flow.assert_called_once()
    directions = [c.args[1] for c in tx.enqueue_copy.call_args_list]
    assert directions == [Direction.OUTBOUND, Direction.INBOUND]
    # forwarder shutdown releases the mapping
    tx.close_flow.assert_called_once()


def test_sampler_can_exclude_flows(echo):
    tx = MagicMock()
    sampler = MagicMock()
    sampler.admit.return_value = False
    with Rig(analyzer_tx=tx, sampler=sampler) as rig:
        sock = rig.host.udp_socket(echo.address)
        sock.send(b"ping")
        assert sock.recv(timeout=5.0) == b"ping"
    tx.open_flow.assert_not_called()
    tx.enqueue_copy.assert_not_called()


def test_tcp_echo_through_gateway(echo):
    payload = bytes(range(256)) * 200
    with Rig() as rig:
        conn = rig.host.tcp_connect(echo.address)
        conn.sendall(payload)
        received = bytearray()
        while len(received) < len(payload):
            received += conn.recv(65536, timeout=5.0)
        conn.shutdown_write()
        assert conn.recv(1, timeout=5.0) == b""

        status = rig.forwarder.status()
        assert status["drops"].get("pure-ack", 0) > 0
        assert status["tun_writes"] > 0
        assert status["flows"] == 1

    assert bytes(received) == payload


def test_refused_connection_resets_app():
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    closed_port = probe.getsockname()[1]
    probe.close()

    with Rig() as rig:
        with pytest.raises(TargetUnreachable):
            rig.host.tcp_connect(("127.0.0.1", closed_port), timeout=5.0)
        assert wait_for(lambda: rig.forwarder.stats.socket_errors == 1)


def test_shutdown_resets_open_connections(echo):
    with Rig() as rig:
        conn = rig.host.tcp_connect(echo.address)
        rig.stop()
        assert wait_for(lambda: conn.reset)
        assert len(rig.forwarder.sockets) == 0
        assert len(rig.forwarder.engine) == 0


def test_latency_samples_recorded(echo):
    with Rig() as rig:
        sock = rig.host.udp_socket(echo.address)
        for _ in range(5):
            sock.send(b"x")
            assert sock.recv(timeout=5.0) == b"x"
        summary = rig.forwarder.packet_latency_probe()

    assert summary["uplink/udp/new"].count == 1
    assert summary["uplink/udp/established"].count == 4
    assert summary["downlink/udp/established"].count == 5
    assert all(s.t_buff >= 0 for s in rig.forwarder.stats.samples)


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------


def test_summarize_samples_groups_and_converts_to_microseconds():
    samples = [
        LatencySample(0.000010, 0.0, "uplink", "tcp", True),
        LatencySample(0.000020, 0.0, "uplink", "tcp", False),
        LatencySample(0.000040, 0.0, "uplink", "tcp", False),
    ]
    summary = summarize_samples(samples)
    assert set(summary) == {"uplink/tcp/new", "uplink/tcp/established"}
    est = summary["uplink/tcp/established"]
    assert est.count == 2
    assert est.mean_us == pytest.approx(30.0)
    assert summary["uplink/tcp/new"].stdev_us == 0.0


def test_status_snapshot_keys():
    forwarder = Forwarder(ForwarderConfig(), MemoryTun(), FlowEngine())
    status = forwarder.status()
    assert status["config"]["mode"] == "performance"
    assert {"cycles", "tun_reads", "sleeps", "drops", "flows", "sockets", "tls_proxies"} <= set(
        status
    )
