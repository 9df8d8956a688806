"""Gateway configuration file.

The file is line-oriented ``key = value`` with ``[section]`` headers::

    [forwarder]
    mode = lowpower

    [analyzer]
    sampling_rate = 0.25

Unknown sections or keys are refused. ``FLOWTAP_<SECTION>_<KEY>`` environment
variables override file values; ``FLOWTAP_CONFIG`` names the file.
"""

import configparser
import ipaddress
import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Type, Union, get_args

from dotenv import load_dotenv

from src.forwarder import ForwarderConfig, Mode

logger = logging.getLogger("flowtap.config")

ENV_PREFIX = "FLOWTAP_"
CONFIG_ENV = "FLOWTAP_CONFIG"
DEFAULT_CONFIG_PATH = Path("~/.config/flowtap/flowtap.conf")


class ConfigError(ValueError):
    """The configuration file or an override is invalid."""


@dataclass
class TunSection:
    name: str = "flowtap0"
    address: str = "10.7.0.1/24"
    mtu: int = 1500
    fwmark: int = 0x1F

    def validate(self) -> None:
        if not self.name or len(self.name) > 15:
            raise ConfigError("tun.name must be 1-15 characters")
        try:
            ipaddress.ip_interface(self.address)
        except ValueError as e:
            raise ConfigError(f"tun.address: {e}") from e
        if not 576 <= self.mtu <= 65535:
            raise ConfigError("tun.mtu must be within [576, 65535]")
        if self.fwmark < 0:
            raise ConfigError("tun.fwmark must be non-negative")

    @property
    def network(self) -> Union[ipaddress.IPv4Network, ipaddress.IPv6Network]:
        return ipaddress.ip_interface(self.address).network


@dataclass
class ForwarderSection:
    mode: str = Mode.PERFORMANCE.value
    idle_sleep_ms: Optional[float] = None
    max_idle_cycles: Optional[int] = None
    c_tun: int = 100
    c_nio: int = 100

    def validate(self) -> None:
        self.to_forwarder_config()

    def to_forwarder_config(self) -> ForwarderConfig:
        try:
            return ForwarderConfig.for_mode(
                Mode(self.mode),
                idle_sleep_ms=self.idle_sleep_ms,
                max_idle_cycles=self.max_idle_cycles,
                c_tun=self.c_tun,
                c_nio=self.c_nio,
            )
        except ValueError as e:
            raise ConfigError(f"forwarder: {e}") from e


@dataclass
class TlsSection:
    enabled: bool = False
    ca_path: str = "~/.local/share/flowtap/ca"
    verify_upstream: bool = True
    upstream_ca_file: Optional[str] = None
    handshake_timeout: float = 10.0

    def validate(self) -> None:
        if self.handshake_timeout <= 0:
            raise ConfigError("tls.handshake_timeout must be positive")


@dataclass
class AnalyzerSection:
    enabled: bool = True
    queue_capacity: int = 1000
    patterns_path: Optional[str] = None
    organizations_path: Optional[str] = None
    events_path: str = "-"
    sampling_rate: float = 1.0
    target_processes: List[str] = field(default_factory=list)
    max_body_bytes: int = 1024 * 1024

    def validate(self) -> None:
        if self.queue_capacity < 1:
            raise ConfigError("analyzer.queue_capacity must be at least 1")
        if not 0.0 <= self.sampling_rate <= 1.0:
            raise ConfigError("analyzer.sampling_rate must be within [0, 1]")
        if self.max_body_bytes < 0:
            raise ConfigError("analyzer.max_body_bytes must be non-negative")


@dataclass
class BenchSection:
    echo_host: str = "127.0.0.1"
    echo_port: int = 7007
    speed_port: int = 7008
    https_port: int = 7443
    dns_port: int = 7053
    results_dir: str = "bench-results"

    def validate(self) -> None:
        for name in ("echo_port", "speed_port", "https_port", "dns_port"):
            if not 0 <= getattr(self, name) <= 65535:
                raise ConfigError(f"bench.{name} is not a port number")


@dataclass
class ControlSection:
    socket_path: str = "/tmp/flowtap.sock"
    timeout: float = 5.0

    def validate(self) -> None:
        if self.timeout <= 0:
            raise ConfigError("control.timeout must be positive")


@dataclass
class MetricsSection:
    port: int = 0
    status_log_interval: float = 60.0

    def validate(self) -> None:
        if not 0 <= self.port <= 65535:
            raise ConfigError("metrics.port is not a port number")


_SECTIONS: Dict[str, Type] = {
    "tun": TunSection,
    "forwarder": ForwarderSection,
    "tls": TlsSection,
    "analyzer": AnalyzerSection,
    "bench": BenchSection,
    "control": ControlSection,
    "metrics": MetricsSection,
}


@dataclass
class GatewayConfig:
    tun: TunSection = field(default_factory=TunSection)
    forwarder: ForwarderSection = field(default_factory=ForwarderSection)
    tls: TlsSection = field(default_factory=TlsSection)
    analyzer: AnalyzerSection = field(default_factory=AnalyzerSection)
    bench: BenchSection = field(default_factory=BenchSection)
    control: ControlSection = field(default_factory=ControlSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    def validate(self) -> "GatewayConfig":
        for name in _SECTIONS:
            getattr(self, name).validate()
        return self

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {
            name: {f.name: getattr(getattr(self, name), f.name) for f in fields(_SECTIONS[name])}
            for name in _SECTIONS
        }


# ---------------------------------------------------------------------------
# Value conversion
# ---------------------------------------------------------------------------

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(raw: str, default: Any, hint: Any, where: str) -> Any:
    value = raw.strip()
    if default is None:
        # optional knob: empty means unset, otherwise parse as the inner type
        if not value:
            return None
        inner = next((a for a in get_args(hint) if a is not type(None)), str)
        default = inner()
    try:
        if isinstance(default, bool):
            lowered = value.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(f"expected a boolean, got {value!r}")
        if isinstance(default, list):
            return [item.strip() for item in value.split(",") if item.strip()]
        if isinstance(default, int):
            return int(value, 0)
        if isinstance(default, float):
            return float(value)
        return value
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from e


def _format(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(value)
    return str(value)


def _apply(config: GatewayConfig, section: str, key: str, raw: str, origin: str) -> None:
    cls = _SECTIONS.get(section)
    if cls is None:
        raise ConfigError(f"{origin}: unknown section [{section}]")
    known = {f.name: f for f in fields(cls)}
    if key not in known:
        raise ConfigError(f"{origin}: unknown key {section}.{key}")
    target = getattr(config, section)
    default = getattr(cls(), key)
    setattr(target, key, _convert(raw, default, known[key].type, f"{origin}: {section}.{key}"))


# ---------------------------------------------------------------------------
# Loading / dumping
# ---------------------------------------------------------------------------


def parse_config(text: str, origin: str = "<config>") -> GatewayConfig:
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#", ";"), strict=True
    )
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as e:
        raise ConfigError(f"{origin}: {e}") from e
    config = GatewayConfig()
    for section in parser.sections():
        for key, raw in parser.items(section, raw=True):
            _apply(config, section, key, raw, origin)
    return config


def env_overrides(environ: Mapping[str, str]) -> List[Tuple[str, str, str]]:
    """``FLOWTAP_<SECTION>_<KEY>`` entries as (section, key, value)."""
    out = []
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX) or name == CONFIG_ENV:
            continue
        rest = name[len(ENV_PREFIX) :].lower()
        section, _, key = rest.partition("_")
        if section in _SECTIONS and key:
            out.append((section, key, value))
    return sorted(out)


def load_config(
    path: Optional[Union[str, Path]] = None,
    environ: Optional[Mapping[str, str]] = None,
    use_dotenv: bool = True,
) -> GatewayConfig:
    """Read the config file (if any), apply environment overrides, validate."""
    if use_dotenv:
        load_dotenv()
    env = os.environ if environ is None else environ
    if path is None and env.get(CONFIG_ENV):
        path = env[CONFIG_ENV]
    if path is None:
        candidate = DEFAULT_CONFIG_PATH.expanduser()
        path = candidate if candidate.exists() else None

    if path is not None:
        path = Path(path).expanduser()
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read {path}: {e}") from e
        config = parse_config(text, origin=str(path))
        logger.debug("Loaded configuration from %s", path)
    else:
        config = GatewayConfig()

    for section, key, value in env_overrides(env):
        _apply(config, section, key, value, f"${ENV_PREFIX}{section.upper()}_{key.upper()}")
    return config.validate()


def dump_config(config: GatewayConfig) -> str:
    """Normalized file form: every section and key, in declaration order."""
    lines: List[str] = []
    for section, values in config.to_dict().items():
        if lines:
            lines.append("")
        lines.append(f"[{section}]")
        for key, value in values.items():
            lines.append(f"{key} = {_format(value)}".rstrip())
    return "\n".join(lines) + "\n"
