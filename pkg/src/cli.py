"""CLI interface for the flowtap gateway.

Exit codes: 0 ok, 1 generic failure, 2 usage or invalid configuration,
3 privilege missing, 4 TUN device busy, 5 daemon not reachable,
6 corrupt pcap.
"""

import json
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, NoReturn, Optional, Tuple

import click
from rich.console import Console
from rich.table import Table

from src.analyzer.entities import OrganizationMap
from src.analyzer.events import EventSink
from src.analyzer.leaks import PatternSet
from src.analyzer.mirror_queue import MirrorQueue
from src.analyzer.pcap_replay import CorruptPcap, parse_local_net, replay
from src.analyzer.service import Analyzer
from src.bench import (
    DOWNLINK,
    UPLINK,
    BenchReport,
    ResolverUnreachable,
    TargetUnreachable,
    cpu_profile,
    dns_calibration,
    mode_table,
    off_path_bench,
    tcp_connect_bench,
    tcp_echo_bench,
    tcp_speed_test,
    tls_bench,
    udp_echo_bench,
)
from src.bench.dns_calibration import calibration_config, default_delay_law
from src.bench.servers import DnsBenchServer, EchoServer, HttpsObjectServer, SpeedServer
from src.config import ConfigError, GatewayConfig, dump_config, load_config
from src.control import ControlClient, ControlError, DaemonUnreachable
from src.daemon import Gateway, route_script
from src.forwarder import ForwarderConfig, Mode
from src.housekeeping import setup_signal_handlers
from src.logging_config import configure_logging
from src.tls_gate.ca import CaIdentity, CaUnavailable
from src.tun import PrivilegeMissing, TunBusy

console = Console()

EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_PRIVILEGE = 3
EXIT_TUN_BUSY = 4
EXIT_UNREACHABLE = 5
EXIT_CORRUPT_PCAP = 6


def _fail(message: str, code: int = EXIT_FAILURE) -> NoReturn:
    console.print(f"[red]✗[/red] {message}")
    sys.exit(code)


def _config(ctx: click.Context) -> GatewayConfig:
    """Load the configuration once per invocation."""
    obj = ctx.ensure_object(dict)
    if "config" not in obj:
        try:
            obj["config"] = load_config(obj.get("config_path"))
        except ConfigError as e:
            _fail(f"Invalid configuration: {e}", EXIT_USAGE)
    return obj["config"]


def _client(ctx: click.Context) -> ControlClient:
    cfg = _config(ctx)
    return ControlClient(cfg.control.socket_path, cfg.control.timeout)


def _call(ctx: click.Context, command: str, **args: Any) -> Any:
    try:
        return _client(ctx).call(command, **args)
    except DaemonUnreachable as e:
        _fail(f"Daemon not reachable: {e}", EXIT_UNREACHABLE)
    except ControlError as e:
        _fail(f"Daemon refused {command}: {e}")


def _address(value: Optional[str]) -> Optional[Tuple[str, int]]:
    if not value:
        return None
    host, sep, port = value.rpartition(":")
    if not sep or not port.isdigit():
        raise click.BadParameter(f"expected HOST:PORT, got {value!r}")
    return host or "127.0.0.1", int(port)


@click.group()
@click.option(
    "--config",
    "config_path",
    type=click.Path(dir_okay=False),
    default=None,
    help="Config file (default $FLOWTAP_CONFIG or ~/.config/flowtap/flowtap.conf)",
)
@click.option("--log-json/--log-text", default=False, help="Structured JSON logs on stderr")
@click.option("--debug", is_flag=True, help="Debug logging")
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[str], log_json: bool, debug: bool) -> None:
    """flowtap - user-space traffic gateway with an off-path analyzer."""
    configure_logging(json_format=log_json, debug=debug)
    ctx.ensure_object(dict)["config_path"] = config_path


# ---------------------------------------------------------------------------
# Daemon
# ---------------------------------------------------------------------------


@cli.command()
@click.option(
    "--mode",
    type=click.Choice([m.value for m in (Mode.PERFORMANCE, Mode.LOW_POWER)]),
    default=None,
    help="Override forwarder.mode",
)
@click.pass_context
def run(ctx: click.Context, mode: Optional[str]) -> None:
    """Start the gateway daemon in the foreground.

    Needs CAP_NET_ADMIN to open the TUN device; apply `flowtap routes`
    afterwards to steer traffic through it.
    """
    cfg = _config(ctx)
    if mode:
        cfg.forwarder.mode = mode
        cfg.forwarder.idle_sleep_ms = None
        cfg.forwarder.max_idle_cycles = None
    try:
        gateway = Gateway(cfg)
        gateway.start()
    except PrivilegeMissing as e:
        _fail(f"Missing privilege: {e}", EXIT_PRIVILEGE)
    except TunBusy as e:
        _fail(str(e), EXIT_TUN_BUSY)
    except (CaUnavailable, ControlError, OSError, ValueError) as e:
        _fail(f"Error starting gateway: {e}")

    setup_signal_handlers(gateway.request_stop)
    console.print(
        f"[green]✓[/green] Gateway running on {cfg.tun.name} "
        f"({gateway.status()['mode']}). Press Ctrl+C to stop."
    )
    try:
        while not gateway.wait(1.0):
            pass
    except KeyboardInterrupt:
        pass
    finally:
        gateway.stop()
    console.print("[yellow]Gateway stopped[/yellow]")


@cli.command("mode")
@click.argument("name", type=click.Choice([m.value for m in Mode]))
@click.option("--idle-sleep-ms", type=float, default=None, help="is for the custom mode")
@click.option("--max-idle-cycles", type=int, default=None, help="ic for the custom mode")
@click.pass_context
def mode_cmd(
    ctx: click.Context, name: str, idle_sleep_ms: Optional[float], max_idle_cycles: Optional[int]
) -> None:
    """Switch the running daemon's operational mode."""
    result = _call(
        ctx, "mode", mode=name, idle_sleep_ms=idle_sleep_ms, max_idle_cycles=max_idle_cycles
    )
    console.print(
        f"[green]✓[/green] Mode {result['mode']} "
        f"(is={result['idle_sleep_ms']:g} ms, ic={result['max_idle_cycles']})"
    )


@cli.command()
@click.option("--json", "as_json", is_flag=True, help="Raw JSON snapshot")
@click.pass_context
def status(ctx: click.Context, as_json: bool) -> None:
    """Show loop counters, flows, queue depth and drops of the running daemon."""
    snap: Dict[str, Any] = _call(ctx, "status")
    if as_json:
        click.echo(json.dumps(snap, indent=2, default=str))
        return

    table = Table(title=f"flowtap on {snap.get('tun')} ({snap.get('mode')})")
    table.add_column("Component", style="cyan")
    table.add_column("Counter", style="magenta")
    table.add_column("Value", justify="right")
    for name, value in (snap.get("forwarder") or {}).items():
        if name == "config":
            continue
        shown = json.dumps(value) if isinstance(value, dict) else str(value)
        table.add_row("forwarder", name, shown)
    analyzer = snap.get("analyzer")
    if analyzer:
        for name, value in (analyzer.get("queue") or {}).items():
            table.add_row("queue", name, str(value))
        for name in ("events", "events_dropped", "parse_errors", "gaps", "open_flows"):
            if name in analyzer:
                table.add_row("analyzer", name, str(analyzer[name]))
    for name, value in (snap.get("sampler") or {}).items():
        table.add_row("sampler", name, str(value))
    tls = snap.get("tls")
    if tls:
        for outcome, count in (tls.get("outcomes") or {}).items():
            table.add_row("tls", outcome, str(count))
        table.add_row("tls", "whitelisted_hosts", str(tls.get("whitelisted_hosts")))
    console.print(table)


@cli.command()
@click.pass_context
def stop(ctx: click.Context) -> None:
    """Stop the running daemon (live flows are reset)."""
    _call(ctx, "stop")
    console.print("[green]✓[/green] Daemon stopping")


@cli.command()
@click.argument("rate", type=click.FloatRange(0.0, 1.0))
@click.pass_context
def sample(ctx: click.Context, rate: float) -> None:
    """Mirror only a fraction RATE of new flows to the analyzer."""
    result = _call(ctx, "sample", rate=rate)
    console.print(f"[green]✓[/green] Sampling rate {result['rate']:g}")


@cli.command()
@click.argument("processes", nargs=-1)
@click.pass_context
def target(ctx: click.Context, processes: Tuple[str, ...]) -> None:
    """Analyze only flows of PROCESSES (no arguments clears the filter)."""
    result = _call(ctx, "target", processes=list(processes))
    names = ", ".join(result["targets"]) or "all processes"
    console.print(f"[green]✓[/green] Analyzing {names}")


@cli.command()
@click.option("--down", is_flag=True, help="Print the teardown instead")
@click.pass_context
def routes(ctx: click.Context, down: bool) -> None:
    """Print the policy-routing script for the configured TUN device."""
    click.echo(route_script(_config(ctx), down=down), nl=False)


# ---------------------------------------------------------------------------
# Offline analysis
# ---------------------------------------------------------------------------


@cli.command("replay")
@click.argument("pcap", type=click.Path(exists=True, dir_okay=False))
@click.option("--patterns", type=click.Path(exists=True, dir_okay=False), help="Leak patterns file")
@click.option(
    "--organizations", type=click.Path(exists=True, dir_okay=False), help="domain = org file"
)
@click.option("--output", "-o", default="-", help="Events JSONL (default stdout)")
@click.option("--local-net", default=None, help="CIDR of the app side (default: private range)")
def replay_cmd(
    pcap: str,
    patterns: Optional[str],
    organizations: Optional[str],
    output: str,
    local_net: Optional[str],
) -> None:
    """Run a packet capture through the analyzer and emit its events."""
    try:
        analyzer = Analyzer(
            MirrorQueue(1),
            EventSink(output),
            patterns=PatternSet.from_file(Path(patterns)) if patterns else None,
            organizations=OrganizationMap.from_file(Path(organizations)) if organizations else None,
        )
        count = replay(Path(pcap), analyzer, parse_local_net(local_net))
        analyzer.sink.close()
    except CorruptPcap as e:
        _fail(f"Corrupt capture: {e}", EXIT_CORRUPT_PCAP)
    except (OSError, ValueError) as e:
        _fail(f"Replay failed: {e}")
    if output != "-":
        console.print(f"[green]✓[/green] {count} records replayed → {output}")


# ---------------------------------------------------------------------------
# Bundled servers
# ---------------------------------------------------------------------------


@cli.command()
@click.argument("kind", type=click.Choice(["echo", "speed", "https", "dns"]))
@click.option("--host", default=None, help="Bind address (default bench.echo_host)")
@click.option("--port", type=int, default=None, help="Port (default from [bench])")
@click.pass_context
def serve(ctx: click.Context, kind: str, host: Optional[str], port: Optional[int]) -> None:
    """Run a bundled bench server until Ctrl+C."""
    bench = _config(ctx).bench
    host = host or bench.echo_host
    if kind == "echo":
        server: Any = EchoServer(host, bench.echo_port if port is None else port)
    elif kind == "speed":
        server = SpeedServer(host, bench.speed_port if port is None else port)
    elif kind == "https":
        server = HttpsObjectServer(host, bench.https_port if port is None else port)
    else:
        server = DnsBenchServer(
            host, bench.dns_port if port is None else port, delay=default_delay_law()
        )
    try:
        with server:
            console.print(
                f"[green]✓[/green] {kind} server on {server.address[0]}:{server.address[1]}"
            )
            console.print("[yellow]Press Ctrl+C to stop[/yellow]")
            while True:
                time.sleep(1)
    except KeyboardInterrupt:
        console.print(f"[yellow]{kind} server stopped[/yellow]")
    except OSError as e:
        _fail(f"Error starting {kind} server: {e}")


# ---------------------------------------------------------------------------
# Benches
# ---------------------------------------------------------------------------


def _bench_config(mode: str, idle_sleep_ms: Optional[float], max_idle_cycles: Optional[int]):
    if mode == "off":
        return None
    try:
        return ForwarderConfig.for_mode(Mode(mode), idle_sleep_ms, max_idle_cycles)
    except ValueError as e:
        raise click.BadParameter(str(e)) from e


def _emit(ctx: click.Context, reports: List[BenchReport]) -> None:
    results = Path(_config(ctx).bench.results_dir)
    for report in reports:
        report.save(results)
        table = Table(title=f"{report.scenario} (n={report.sample_count})")
        table.add_column("Metric", style="cyan")
        for col in ("mean", "median", "stdev", "sem", "min", "max"):
            table.add_column(col, justify="right")
        for name, summary in report.metrics.items():
            table.add_row(
                name,
                *(
                    f"{getattr(summary, col):.3f}"
                    for col in ("mean", "median", "stdev", "sem", "min", "max")
                ),
            )
        console.print(table)
        if report.extra:
            console.print(f"[dim]{json.dumps(report.extra, default=str)}[/dim]")
    console.print(f"[green]✓[/green] Raw samples and summaries in {results}/")


def _mode_options(fn):
    fn = click.option(
        "--max-idle-cycles", type=int, default=None, help="ic for --mode custom"
    )(fn)
    fn = click.option("--idle-sleep-ms", type=float, default=None, help="is for --mode custom")(fn)
    fn = click.option(
        "--mode",
        type=click.Choice([m.value for m in Mode] + ["off"]),
        default=Mode.PERFORMANCE.value,
        help="Forwarder mode, or 'off' for the kernel-only baseline",
    )(fn)
    return fn


@cli.group()
def bench() -> None:
    """Measure latency, throughput, TLS cost, CPU and timing accuracy."""
    pass


@bench.command("udp-echo")
@_mode_options
@click.option("-n", type=int, default=200, help="Packets")
@click.option("--target", default=None, help="Echo server HOST:PORT (default: bundled)")
@click.option("--delay", type=float, default=0.05, help="Mean inter-send delay (s)")
@click.pass_context
def bench_udp_echo(ctx, mode, idle_sleep_ms, max_idle_cycles, n, target, delay) -> None:
    """Per-packet UDP RTT with and without the gateway."""
    config = _bench_config(mode, idle_sleep_ms, max_idle_cycles)
    try:
        report = udp_echo_bench(n, _address(target), delay, config)
    except TargetUnreachable as e:
        _fail(str(e))
    _emit(ctx, [report])


@bench.command("tcp-echo")
@_mode_options
@click.option("-n", type=int, default=200, help="Round trips")
@click.option("--target", default=None, help="Echo server HOST:PORT (default: bundled)")
@click.option("--delay", type=float, default=0.05, help="Mean inter-send delay (s)")
@click.pass_context
def bench_tcp_echo(ctx, mode, idle_sleep_ms, max_idle_cycles, n, target, delay) -> None:
    """TCP echo RTT on one connection, with and without the gateway."""
    config = _bench_config(mode, idle_sleep_ms, max_idle_cycles)
    try:
        report = tcp_echo_bench(n, _address(target), delay, config)
    except (TargetUnreachable, OSError) as e:
        _fail(str(e))
    _emit(ctx, [report])


@bench.command("tcp-connect")
@_mode_options
@click.option("-n", type=int, default=50, help="Connections")
@click.option("--target", default=None, help="Echo server HOST:PORT (default: bundled)")
@click.pass_context
def bench_tcp_connect(ctx, mode, idle_sleep_ms, max_idle_cycles, n, target) -> None:
    """TCP connection-establishment time."""
    config = _bench_config(mode, idle_sleep_ms, max_idle_cycles)
    try:
        report = tcp_connect_bench(n, _address(target), 0.05, config)
    except (TargetUnreachable, OSError) as e:
        _fail(str(e))
    _emit(ctx, [report])


@bench.command("speed")
@_mode_options
@click.option(
    "--direction", type=click.Choice([UPLINK, DOWNLINK, "both"]), default="both"
)
@click.option("--duration", type=float, default=15.0, help="Seconds per run")
@click.option("--parallel", type=int, default=3, help="Parallel connections")
@click.option("--repeat", type=int, default=1, help="Runs per direction")
@click.option("--analyzer/--no-analyzer", default=False, help="Mirror flows to a running analyzer")
@click.option("--target", default=None, help="Speed server HOST:PORT (default: bundled)")
@click.pass_context
def bench_speed(
    ctx,
    mode,
    idle_sleep_ms,
    max_idle_cycles,
    direction,
    duration,
    parallel,
    repeat,
    analyzer,
    target,
) -> None:
    """Aggregate goodput over parallel TCP connections."""
    config = _bench_config(mode, idle_sleep_ms, max_idle_cycles)
    directions = [UPLINK, DOWNLINK] if direction == "both" else [direction]
    reports = [
        tcp_speed_test(
            d,
            duration=duration,
            parallel=parallel,
            config=config,
            target=_address(target),
            analyzer=analyzer,
            repeat=repeat,
        )
        for d in directions
    ]
    _emit(ctx, reports)


@bench.command("tls")
@_mode_options
@click.option("-n", type=int, default=25, help="Fetches per object size")
@click.option(
    "--size", "sizes", type=int, multiple=True, default=(1, 20 * 1024 * 1024), help="Object bytes"
)
@click.pass_context
def bench_tls(ctx, mode, idle_sleep_ms, max_idle_cycles, n, sizes) -> None:
    """HTTPS establishment time and goodput, interception proxy on vs off."""
    config = _bench_config(mode, idle_sleep_ms, max_idle_cycles) or ForwarderConfig()
    _emit(ctx, [tls_bench(sizes=sizes, n=n, config=config)])


@bench.command("dns")
@click.option("-n", type=int, default=500, help="Queries")
@click.option("--resolver", default=None, help="Resolver HOST:PORT (default: bundled)")
@click.option(
    "--delay-scale", type=float, default=1.0, help="Shrink the inter-query delay law"
)
@click.pass_context
def bench_dns(ctx, n, resolver, delay_scale) -> None:
    """Gateway vs app DNS RTT, both against the resolver-side reference."""
    try:
        report = dns_calibration(
            n=n,
            resolver=_address(resolver),
            delay_law=default_delay_law(delay_scale),
            config=calibration_config(),
        )
    except ResolverUnreachable as e:
        _fail(f"Resolver unreachable: {e}")
    _emit(ctx, [report])


@bench.command("cpu")
@_mode_options
@click.option("--duration", type=float, default=10.0, help="Seconds to sample")
@click.pass_context
def bench_cpu(ctx, mode, idle_sleep_ms, max_idle_cycles, duration) -> None:
    """CPU share of the idle forwarder loop, sampled at 1 Hz."""
    config = _bench_config(mode, idle_sleep_ms, max_idle_cycles)
    _emit(ctx, [cpu_profile(duration=duration, config=config)])


@bench.command("off-path")
@_mode_options
@click.option("-n", type=int, default=200, help="Packets per run")
@click.option("--queue-capacity", type=int, default=100, help="Mirror queue size")
@click.pass_context
def bench_off_path(ctx, mode, idle_sleep_ms, max_idle_cycles, n, queue_capacity) -> None:
    """Echo latency with the analyzer running vs stalled behind a full queue."""
    config = _bench_config(mode, idle_sleep_ms, max_idle_cycles) or ForwarderConfig()
    _emit(ctx, [off_path_bench(n=n, config=config, queue_capacity=queue_capacity)])


@bench.command("modes")
@click.option("-n", type=int, default=50, help="Echo packets and connections per mode")
@click.option("--speed-duration", type=float, default=5.0, help="Seconds per speed run")
@click.option("--cpu-duration", type=float, default=10.0, help="Seconds of CPU sampling")
@click.pass_context
def bench_modes(ctx, n, speed_duration, cpu_duration) -> None:
    """The Performance vs LowPower table."""
    reports: List[BenchReport] = []
    rows = mode_table(
        n=n, speed_duration=speed_duration, cpu_duration=cpu_duration, reports=reports
    )
    results = Path(_config(ctx).bench.results_dir)
    for report in reports:
        report.save(results)

    table = Table(title="Operational modes")
    table.add_column("Mode", style="cyan")
    for col in (
        "is ms",
        "ic",
        "UDP RTT ms",
        "TCP conn ms",
        "TLS conn ms",
        "Up Mbps",
        "Down Mbps",
        "CPU %",
    ):
        table.add_column(col, justify="right")
    for row in rows:
        table.add_row(
            row.mode,
            f"{row.idle_sleep_ms:g}",
            str(row.max_idle_cycles),
            f"{row.udp_rtt_ms:.2f}",
            f"{row.tcp_connect_ms:.2f}",
            f"{row.tls_connect_ms:.2f}",
            f"{row.uplink_mbps:.1f}",
            f"{row.downlink_mbps:.1f}",
            f"{row.cpu_pct:.1f}",
        )
    console.print(table)
    console.print(f"[green]✓[/green] Raw samples and summaries in {results}/")


# ---------------------------------------------------------------------------
# CA and config
# ---------------------------------------------------------------------------


@cli.group()
def ca() -> None:
    """Interception CA management."""
    pass


@ca.command("export")
@click.argument("path", type=click.Path(dir_okay=False))
@click.pass_context
def ca_export(ctx: click.Context, path: str) -> None:
    """Write the CA certificate (PEM) for installing on clients."""
    cfg = _config(ctx)
    try:
        identity = CaIdentity.load_or_create(Path(cfg.tls.ca_path).expanduser())
        written = identity.export_ca_pem(Path(path))
    except (CaUnavailable, OSError) as e:
        _fail(f"Error exporting CA: {e}")
    console.print(f"[green]✓[/green] CA certificate written to {written}")
    console.print(f"  SHA-256 fingerprint: {identity.fingerprint}")


@cli.group("config")
def config_group() -> None:
    """Inspect the effective configuration."""
    pass


@config_group.command("dump")
@click.pass_context
def config_dump(ctx: click.Context) -> None:
    """Print the normalized configuration (file values + environment)."""
    click.echo(dump_config(_config(ctx)), nl=False)


if __name__ == "__main__":
    cli()
