"""Hosts whose TLS is relayed untouched for a while after a failed intercept."""

import ipaddress
import logging
import threading
import time
from typing import Callable, Dict, Optional, Union

logger = logging.getLogger("flowtap.tls_gate.whitelist")

WHITELIST_TTL = 300.0


def whitelist_key(
    sni: Optional[str],
    remote_addr: Union[str, ipaddress.IPv4Address, ipaddress.IPv6Address],
    remote_port: int,
) -> str:
    """SNI when the client sent one, else ``addr:port``."""
    if sni:
        return sni.lower()
    addr = ipaddress.ip_address(str(remote_addr))
    if addr.version == 6:
        return f"[{addr}]:{remote_port}"
    return f"{addr}:{remote_port}"


class InterceptWhitelist:
    """Entries live for exactly ``ttl`` seconds on the injected clock."""

    def __init__(self, ttl: float = WHITELIST_TTL, clock: Callable[[], float] = time.monotonic):
        self.ttl = ttl
        self._clock = clock
        self._expires: Dict[str, float] = {}
        self._lock = threading.Lock()

    def add(self, key: str, reason: Optional[str] = None) -> float:
        expires_at = self._clock() + self.ttl
        with self._lock:
            self._expires[key] = expires_at
        logger.info("Whitelisted %s for %.0f s (%s)", key, self.ttl, reason or "no reason")
        return expires_at

    def contains(self, key: str) -> bool:
        now = self._clock()
        with self._lock:
            expires_at = self._expires.get(key)
            if expires_at is None:
                return False
            if now >= expires_at:
                del self._expires[key]
                return False
            return True

    __contains__ = contains

    def purge(self) -> int:
        now = self._clock()
        with self._lock:
            expired = [k for k, t in self._expires.items() if now >= t]
            for k in expired:
                del self._expires[k]
        return len(expired)

    def __len__(self) -> int:
        with self._lock:
            return len(self._expires)

    def snapshot(self) -> Dict[str, float]:
        """Remaining seconds per entry."""
        now = self._clock()
        with self._lock:
            return {k: t - now for k, t in self._expires.items() if t > now}
