"""The gateway daemon: wires configuration into running components."""

import threading
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from src.analyzer.attribution import ProcAttribution
from src.analyzer.entities import OrganizationMap
from src.analyzer.events import EventSink
from src.analyzer.leaks import PatternSet
from src.analyzer.mirror_queue import MirrorQueue
from src.analyzer.sampling import FlowSampler
from src.analyzer.service import Analyzer
from src.config import GatewayConfig
from src.control import ControlServer
from src.flow_engine import FlowEngine
from src.forwarder import Forwarder, Mode
from src.housekeeping import start_housekeeping, stop_housekeeping
from src.logging_config import get_logger
from src.prometheus_exporter import serve_metrics
from src.tls_gate.ca import CaIdentity
from src.tls_gate.gate import TlsGate
from src.tun import LinuxTun, TunDevice

log = get_logger("flowtap.daemon")

ROUTE_TABLE = 207
STOP_TIMEOUT = 2.0

TunFactory = Callable[[str, int], TunDevice]


def route_script(config: GatewayConfig, down: bool = False) -> str:
    """Shell commands that steer host traffic through the TUN device.

    Gateway sockets carry ``SO_MARK=tun.fwmark`` and keep using the main
    table; everything else is looked up in a table whose default route is
    the TUN device.
    """
    tun = config.tun
    mark = f"{tun.fwmark:#x}"
    if down:
        lines = [
            f"ip rule del not fwmark {mark} table {ROUTE_TABLE}",
            f"ip route flush table {ROUTE_TABLE}",
            f"ip link set dev {tun.name} down",
        ]
    else:
        lines = [
            f"ip addr add {tun.address} dev {tun.name}",
            f"ip link set dev {tun.name} mtu {tun.mtu} up",
            f"sysctl -w net.ipv4.conf.{tun.name}.rp_filter=0",
            f"ip route add default dev {tun.name} table {ROUTE_TABLE}",
            f"ip rule add not fwmark {mark} table {ROUTE_TABLE}",
        ]
    return "#!/bin/sh\nset -e\n" + "\n".join(lines) + "\n"


class Gateway:
    """Forwarder plus everything around it, started and stopped as a unit.

    ``tun_factory`` defaults to opening the Linux TUN device; tests pass a
    factory returning a ``MemoryTun``.
    """

    def __init__(
        self,
        config: GatewayConfig,
        tun_factory: Optional[TunFactory] = None,
        control: bool = True,
    ):
        self.config = config
        self._tun_factory = tun_factory or (lambda name, mtu: LinuxTun(name, mtu))
        self._with_control = control
        self.log = log.bind(tun=config.tun.name)
        self.tun: Optional[TunDevice] = None
        self.engine = FlowEngine(mtu=config.tun.mtu)
        self.sampler = FlowSampler(
            config.analyzer.sampling_rate, config.analyzer.target_processes
        )

        self.tls_gate: Optional[TlsGate] = None
        if config.tls.enabled:
            ca = CaIdentity.load_or_create(Path(config.tls.ca_path).expanduser())
            upstream = config.tls.upstream_ca_file
            self.tls_gate = TlsGate(
                enabled=True,
                ca=ca,
                verify_upstream=config.tls.verify_upstream,
                upstream_ca_file=Path(upstream).expanduser() if upstream else None,
                handshake_timeout=config.tls.handshake_timeout,
            )

        self.queue: Optional[MirrorQueue] = None
        self.analyzer: Optional[Analyzer] = None
        self.attribution: Optional[ProcAttribution] = None
        if config.analyzer.enabled:
            section = config.analyzer
            self.queue = MirrorQueue(section.queue_capacity)
            self.attribution = ProcAttribution()
            self.analyzer = Analyzer(
                self.queue,
                EventSink(section.events_path),
                patterns=PatternSet.from_file(Path(section.patterns_path).expanduser())
                if section.patterns_path
                else None,
                attribution=self.attribution,
                organizations=OrganizationMap.from_file(
                    Path(section.organizations_path).expanduser()
                )
                if section.organizations_path
                else None,
                sampler=self.sampler,
                max_body_bytes=section.max_body_bytes,
            )

        self.forwarder: Optional[Forwarder] = None
        self.control: Optional[ControlServer] = None
        self._stop = threading.Event()
        self._stopped = threading.Event()
        self._threads: List[threading.Thread] = []

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> "Gateway":
        """Open the TUN device and start every component.

        Raises ``PrivilegeMissing``/``TunBusy`` from the TUN device.
        """
        cfg = self.config
        self.tun = self._tun_factory(cfg.tun.name, cfg.tun.mtu)
        self.forwarder = Forwarder(
            cfg.forwarder.to_forwarder_config(),
            self.tun,
            self.engine,
            analyzer_tx=self.queue,
            tls_gate=self.tls_gate,
            sampler=self.sampler,
            local_net=cfg.tun.network,
            fwmark=cfg.tun.fwmark or None,
        )
        if self.analyzer is not None:
            self._threads.append(self.analyzer.start())
        self._threads.append(self.forwarder.start(self._stop))

        start_housekeeping(
            sink=self.analyzer.sink if self.analyzer else None,
            dns_cache=self.analyzer.dns_cache if self.analyzer else None,
            attribution=self.attribution,
            whitelist=self.tls_gate.whitelist if self.tls_gate else None,
            status=self.status,
            status_interval=cfg.metrics.status_log_interval,
        )
        if cfg.metrics.port:
            serve_metrics(self.status, cfg.metrics.port)
        if self._with_control:
            self.control = ControlServer(
                cfg.control.socket_path,
                {
                    "status": lambda args: self.status(),
                    "mode": self._cmd_mode,
                    "sample": self._cmd_sample,
                    "target": self._cmd_target,
                    "stop": self._cmd_stop,
                },
            ).start()
        self.log.info(
            "Gateway running",
            extra_fields={
                "network": str(cfg.tun.network),
                "forwarder": self.forwarder.config.to_dict(),
                "tls_interception": self.tls_gate is not None,
                "analyzer": self.analyzer is not None,
            },
        )
        return self

    def request_stop(self) -> None:
        self._stop.set()

    def wait(self, timeout: Optional[float] = None) -> bool:
        """Block until a stop is requested; True if it was."""
        return self._stop.wait(timeout)

    def stop(self) -> None:
        """Reset live flows and join every thread within ``STOP_TIMEOUT``."""
        if self._stopped.is_set():
            return
        self._stopped.set()
        self._stop.set()
        if self.control is not None:
            self.control.stop()
        stop_housekeeping()
        # the forwarder resets every flow on its way out
        for thread in self._threads:
            if thread.name == "forwarder":
                thread.join(STOP_TIMEOUT)
        if self.analyzer is not None:
            self.analyzer.stop(STOP_TIMEOUT)
            self.analyzer.sink.close()
        if self.tun is not None:
            self.tun.close()
        self.log.info("Gateway stopped")

    def __enter__(self) -> "Gateway":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    # -- status and control -------------------------------------------------

    def status(self) -> Dict[str, Any]:
        forwarder = self.forwarder
        return {
            "mode": forwarder.config.mode.value if forwarder else None,
            "tun": self.config.tun.name,
            "forwarder": forwarder.status() if forwarder else {},
            "analyzer": self.analyzer.snapshot() if self.analyzer else None,
            "sampler": self.sampler.snapshot(),
            "tls": self.tls_gate.snapshot() if self.tls_gate else None,
        }

    def _cmd_mode(self, args: Dict[str, Any]) -> Dict[str, Any]:
        if self.forwarder is None:
            raise ValueError("gateway is not running")
        try:
            mode = Mode(args.get("mode", ""))
        except ValueError:
            raise ValueError(f"unknown mode {args.get('mode')!r}") from None
        new = self.forwarder.set_mode(
            mode, args.get("idle_sleep_ms"), args.get("max_idle_cycles")
        )
        return new.to_dict()

    def _cmd_sample(self, args: Dict[str, Any]) -> Dict[str, Any]:
        self.sampler.set_rate(float(args.get("rate", 1.0)))
        return self.sampler.snapshot()

    def _cmd_target(self, args: Dict[str, Any]) -> Dict[str, Any]:
        processes = args.get("processes") or []
        if isinstance(processes, str):
            processes = [processes]
        self.sampler.set_targets(processes)
        return self.sampler.snapshot()

    def _cmd_stop(self, args: Dict[str, Any]) -> str:
        # the reply goes out before the main thread tears the control server down
        self.request_stop()
        return "stopping"
