"""Tests for the gateway daemon wiring."""

import json
import time

import pytest

from src.bench.endpoint import VirtualHost
from src.bench.servers import EchoServer
from src.config import GatewayConfig
from src.control import ControlClient, ControlError
from src.daemon import ROUTE_TABLE, Gateway, route_script
from src.tun import MemoryTun


def wait_for(predicate, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(0.01)
    return predicate()


@pytest.fixture
def config(tmp_path):
    config = GatewayConfig()
    config.analyzer.events_path = str(tmp_path / "events.jsonl")
    config.control.socket_path = str(tmp_path / "ctl.sock")
    config.metrics.status_log_interval = 0
    patterns = tmp_path / "patterns.txt"
    patterns.write_text("secret = hunter2\n")
    config.analyzer.patterns_path = str(patterns)
    return config.validate()


@pytest.fixture
def echo():
    with EchoServer() as server:
        yield server


def read_types(path):
    return [json.loads(line)["type"] for line in path.read_text().splitlines()]


def test_route_script():
    config = GatewayConfig()
    up = route_script(config)
    assert up.startswith("#!/bin/sh\nset -e\n")
    assert f"ip route add default dev flowtap0 table {ROUTE_TABLE}" in up
    assert "ip rule add not fwmark 0x1f" in up
    assert "rp_filter=0" in up
    down = route_script(config, down=True)
    assert f"ip route flush table {ROUTE_TABLE}" in down


def test_gateway_forwards_and_reports(config, echo, tmp_path):
    tun = MemoryTun()
    gateway = Gateway(config, tun_factory=lambda name, mtu: tun, control=False)
    with gateway:
        host = VirtualHost(tun).start()
        try:
            sock = host.udp_socket(echo.address)
            sock.send(b"token=hunter2")
            assert sock.recv(timeout=5.0) == b"token=hunter2"
            assert wait_for(lambda: gateway.analyzer.stats.events >= 3)
            status = gateway.status()
        finally:
            host.stop()

    assert status["mode"] == "performance"
    assert status["forwarder"]["flows"] == 1
    assert status["tls"] is None
    assert status["analyzer"]["queue"]["capacity"] == 1000

    types = read_types(tmp_path / "events.jsonl")
    assert types[0] == "flow_opened"
    assert types.count("leak") == 2  # one each way
    assert types[-1] == "flow_closed"


def test_control_commands(config):
    tun = MemoryTun()
    client = ControlClient(config.control.socket_path, timeout=2.0)
    with Gateway(config, tun_factory=lambda name, mtu: tun) as gateway:
        assert client.call("status")["tun"] == "flowtap0"

        mode = client.call("mode", mode="lowpower")
        assert (mode["mode"], mode["idle_sleep_ms"]) == ("lowpower", 100.0)
        assert gateway.forwarder.config.mode.value == "lowpower"

        custom = client.call("mode", mode="custom", idle_sleep_ms=1, max_idle_cycles=5)
        assert custom["max_idle_cycles"] == 5

        assert client.call("sample", rate=0.5)["rate"] == 0.5
        assert client.call("target", processes="com.example.app")["targets"] == [
            "com.example.app"
        ]

        assert client.call("stop") == "stopping"
        assert gateway.wait(2.0)


def test_control_rejects_bad_arguments(config):
    tun = MemoryTun()
    client = ControlClient(config.control.socket_path, timeout=2.0)
    with Gateway(config, tun_factory=lambda name, mtu: tun):
        with pytest.raises(ControlError, match="unknown mode"):
            client.call("mode", mode="turbo")
        with pytest.raises(ControlError, match="custom mode"):
            client.call("mode", mode="custom")
        with pytest.raises(ControlError, match="sampling rate"):
            client.call("sample", rate=3)


def test_analyzer_disabled(config):
    config.analyzer.enabled = False
    tun = MemoryTun()
    with Gateway(config, tun_factory=lambda name, mtu: tun, control=False) as gateway:
        assert gateway.analyzer is None
        assert gateway.status()["analyzer"] is None


def test_tls_gateway_creates_ca(config, tmp_path):
    config.tls.enabled = True
    config.tls.ca_path = str(tmp_path / "ca")
    gateway = Gateway(config, control=False)
    assert gateway.tls_gate is not None
    assert any((tmp_path / "ca").iterdir())


def test_stop_is_idempotent(config):
    tun = MemoryTun()
    gateway = Gateway(config, tun_factory=lambda name, mtu: tun, control=False).start()
    gateway.stop()
    gateway.stop()
    assert gateway.wait(0)
