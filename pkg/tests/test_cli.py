"""Tests for CLI interface."""

import ipaddress
import json
from unittest.mock import MagicMock, patch

import dpkt
import pytest
from click.testing import CliRunner

from src.bench.endpoint import TargetUnreachable
from src.bench.report import BenchReport
from src.cli import cli
from src.control import ControlServer
from src.packet_codec import make_udp, serialize_packet
from src.tun import PrivilegeMissing, TunBusy


@pytest.fixture
def cli_runner():
    """Create CLI runner."""
    return CliRunner()


@pytest.fixture
def config_file(tmp_path):
    """A config pointing every path into tmp_path."""
    path = tmp_path / "flowtap.conf"
    path.write_text(
        f"""
[tun]
name = flowtap9
fwmark = 0x1f

[tls]
ca_path = {tmp_path / "ca"}

[control]
socket_path = {tmp_path / "ctl.sock"}
timeout = 2

[bench]
results_dir = {tmp_path / "results"}
"""
    )
    return path


def invoke(runner, config_file, *args, **kwargs):
    return runner.invoke(cli, ["--config", str(config_file), *args], **kwargs)


@pytest.fixture
def daemon(tmp_path, config_file):
    """A control server standing in for a running gateway."""
    handlers = {
        "status": lambda args: {
            "mode": "lowpower",
            "tun": "flowtap9",
            "forwarder": {"flows": 2, "cycles": 77, "drops": {"window": 1}},
            "analyzer": {"queue": {"depth": 0, "capacity": 1000}, "events": 5},
            "sampler": {"rate": 1.0},
            "tls": None,
        },
        "mode": lambda args: {
            "mode": args["mode"],
            "idle_sleep_ms": 100.0,
            "max_idle_cycles": 100,
        },
        "sample": lambda args: {"rate": args["rate"], "targets": []},
        "target": lambda args: {"rate": 1.0, "targets": sorted(args["processes"])},
        "stop": lambda args: "stopping",
    }
    with ControlServer(str(tmp_path / "ctl.sock"), handlers) as server:
        yield server


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def test_config_dump_applies_environment(cli_runner, config_file):
    result = invoke(
        cli_runner, config_file, "config", "dump", env={"FLOWTAP_ANALYZER_SAMPLING_RATE": "0.5"}
    )
    assert result.exit_code == 0
    assert "name = flowtap9" in result.output
    assert "sampling_rate = 0.5" in result.output


def test_invalid_config_exits_2(cli_runner, tmp_path):
    path = tmp_path / "bad.conf"
    path.write_text("[tun]\nmtu = 10\n")
    result = invoke(cli_runner, path, "config", "dump")
    assert result.exit_code == 2
    assert "Invalid configuration" in result.output


def test_routes(cli_runner, config_file):
    up = invoke(cli_runner, config_file, "routes")
    assert up.exit_code == 0
    assert "ip rule add not fwmark 0x1f table 207" in up.output
    assert "ip link set dev flowtap9 mtu 1500 up" in up.output

    down = invoke(cli_runner, config_file, "routes", "--down")
    assert "ip rule del not fwmark 0x1f table 207" in down.output


# ---------------------------------------------------------------------------
# Daemon control
# ---------------------------------------------------------------------------


def test_status_without_daemon_exits_5(cli_runner, config_file):
    result = invoke(cli_runner, config_file, "status")
    assert result.exit_code == 5
    assert "not reachable" in result.output


def test_status_table_and_json(cli_runner, config_file, daemon):
    result = invoke(cli_runner, config_file, "status")
    assert result.exit_code == 0
    assert "cycles" in result.output
    assert "lowpower" in result.output

    raw = invoke(cli_runner, config_file, "status", "--json")
    assert json.loads(raw.output)["forwarder"]["flows"] == 2


def test_mode_sample_target_stop(cli_runner, config_file, daemon):
    result = invoke(cli_runner, config_file, "mode", "lowpower")
    assert result.exit_code == 0
    assert "Mode lowpower" in result.output

    assert "0.25" in invoke(cli_runner, config_file, "sample", "0.25").output
    assert "com.example.app" in invoke(cli_runner, config_file, "target", "com.example.app").output
    assert "all processes" in invoke(cli_runner, config_file, "target").output
    assert invoke(cli_runner, config_file, "stop").exit_code == 0


def test_sample_rate_out_of_range(cli_runner, config_file):
    result = invoke(cli_runner, config_file, "sample", "1.5")
    assert result.exit_code == 2


def test_run_exit_codes(cli_runner, config_file):
    for error, code in ((PrivilegeMissing("need CAP_NET_ADMIN"), 3), (TunBusy("busy"), 4)):
        gateway = MagicMock()
        gateway.start.side_effect = error
        with patch("src.cli.Gateway", return_value=gateway):
            result = invoke(cli_runner, config_file, "run")
        assert result.exit_code == code


def test_run_until_stopped(cli_runner, config_file):
    gateway = MagicMock()
    gateway.status.return_value = {"mode": "lowpower"}
    gateway.wait.return_value = True
    with patch("src.cli.Gateway", return_value=gateway) as gateway_cls, patch(
        "src.cli.setup_signal_handlers"
    ) as handlers:
        result = invoke(cli_runner, config_file, "run", "--mode", "lowpower")

    assert result.exit_code == 0
    assert "Gateway running on flowtap9" in result.output
    config = gateway_cls.call_args[0][0]
    assert config.forwarder.mode == "lowpower"
    handlers.assert_called_once_with(gateway.request_stop)
    gateway.stop.assert_called_once()


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------


def _write_udp_pcap(path):
    frame = serialize_packet(
        make_udp(
            ipaddress.ip_address("10.7.0.2"),
            6000,
            ipaddress.ip_address("93.184.216.34"),
            9999,
            b"mail=user@example.com",
        )
    )
    with open(path, "wb") as f:
        writer = dpkt.pcap.Writer(f, linktype=101)
        writer.writepkt(frame, ts=1.0)
    return path


def test_replay_writes_events(cli_runner, config_file, tmp_path):
    pcap = _write_udp_pcap(tmp_path / "c.pcap")
    patterns = tmp_path / "patterns.txt"
    patterns.write_text("email = user@example.com\n")
    out = tmp_path / "events.jsonl"

    result = invoke(
        cli_runner, config_file, "replay", str(pcap), "--patterns", str(patterns), "-o", str(out)
    )
    assert result.exit_code == 0
    assert "3 records replayed" in result.output
    types = [json.loads(line)["type"] for line in out.read_text().splitlines()]
    assert types == ["flow_opened", "leak", "flow_closed"]


def test_replay_corrupt_capture_exits_6(cli_runner, config_file, tmp_path):
    bad = tmp_path / "bad.pcap"
    bad.write_bytes(b"definitely not a capture")
    result = invoke(cli_runner, config_file, "replay", str(bad))
    assert result.exit_code == 6


def test_replay_empty_capture(cli_runner, config_file, tmp_path):
    empty = tmp_path / "empty.pcap"
    with open(empty, "wb") as f:
        dpkt.pcap.Writer(f, linktype=101)
    out = tmp_path / "events.jsonl"
    result = invoke(cli_runner, config_file, "replay", str(empty), "-o", str(out))
    assert result.exit_code == 0
    assert "0 records replayed" in result.output
    assert out.read_text() == ""


# ---------------------------------------------------------------------------
# CA and benches
# ---------------------------------------------------------------------------


def test_ca_export(cli_runner, config_file, tmp_path):
    target = tmp_path / "flowtap-ca.pem"
    result = invoke(cli_runner, config_file, "ca", "export", str(target))
    assert result.exit_code == 0
    assert "fingerprint" in result.output
    assert target.read_text().startswith("-----BEGIN CERTIFICATE-----")


def test_bench_persists_report(cli_runner, config_file, tmp_path):
    report = BenchReport("udp_echo_performance", {"mode": "performance"})
    report.extend("rtt_ms", [1.0, 2.0, 3.0])
    with patch("src.cli.udp_echo_bench", return_value=report) as bench:
        result = invoke(cli_runner, config_file, "bench", "udp-echo", "-n", "3")

    assert result.exit_code == 0
    assert bench.call_args[0][0] == 3
    assert (tmp_path / "results" / "udp_echo_performance.csv").exists()
    saved = json.loads((tmp_path / "results" / "udp_echo_performance.json").read_text())
    assert saved["metrics"]["rtt_ms"]["median"] == 2.0


def test_bench_unreachable_target(cli_runner, config_file):
    with patch("src.cli.udp_echo_bench", side_effect=TargetUnreachable("no echo server")):
        result = invoke(
            cli_runner, config_file, "bench", "udp-echo", "--target", "127.0.0.1:9", "--mode", "off"
        )
    assert result.exit_code == 1
    assert "no echo server" in result.output


def test_bench_custom_mode_needs_knobs(cli_runner, config_file):
    result = invoke(cli_runner, config_file, "bench", "cpu", "--mode", "custom")
    assert result.exit_code == 2
