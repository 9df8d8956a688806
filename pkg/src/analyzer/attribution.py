"""Flow -> process attribution from the kernel's socket tables."""

import ipaddress
import logging
import os
import socket
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import psutil

from src.packet_codec import PROTO_TCP, FlowKey

logger = logging.getLogger("flowtap.analyzer.attribution")

ENTRY_TTL = 30.0
SCAN_TTL = 1.0
MAX_ENTRIES = 4096

_NET_FILES = {
    PROTO_TCP: ("tcp", "tcp6"),
    17: ("udp", "udp6"),
}


@dataclass(frozen=True)
class ProcessInfo:
    pid: int
    name: str


@dataclass
class _Cached:
    info: Optional[ProcessInfo]
    at: float


def _decode_addr(hex_addr: str) -> str:
    raw = bytes.fromhex(hex_addr)
    if len(raw) == 4:
        return socket.inet_ntop(socket.AF_INET, raw[::-1])
    # four little-endian 32-bit words
    be = b"".join(raw[i : i + 4][::-1] for i in range(0, 16, 4))
    addr = ipaddress.IPv6Address(be)
    return str(addr.ipv4_mapped or addr)


# (protocol, local port, remote addr, remote port) -> inode
SocketIndex = Dict[Tuple[int, int, str, int], int]


def read_socket_table(proc_root: Path = Path("/proc")) -> SocketIndex:
    index: SocketIndex = {}
    for proto, names in _NET_FILES.items():
        for name in names:
            try:
                lines = (proc_root / "net" / name).read_text().splitlines()[1:]
            except OSError:
                continue
            for line in lines:
                parts = line.split()
                if len(parts) < 10:
                    continue
                try:
                    l_ip, l_port = parts[1].rsplit(":", 1)
                    r_ip, r_port = parts[2].rsplit(":", 1)
                    inode = int(parts[9])
                    key = (proto, int(l_port, 16), _decode_addr(r_ip), int(r_port, 16))
                except ValueError:
                    continue
                if inode:
                    index[key] = inode
    return index


def inode_owners(proc_root: Path = Path("/proc")) -> Dict[int, int]:
    """socket inode -> pid, for every process we may inspect."""
    owners: Dict[int, int] = {}
    for pid in psutil.pids():
        fd_dir = proc_root / str(pid) / "fd"
        try:
            fds = os.listdir(fd_dir)
        except OSError:
            continue
        for fd in fds:
            try:
                target = os.readlink(fd_dir / fd)
            except OSError:
                continue
            if target.startswith("socket:["):
                owners.setdefault(int(target[8:-1]), pid)
    return owners


class ProcAttribution:
    """LRU cache of flow -> process with a hard TTL per entry.

    Table scans are themselves reused for ``scan_ttl`` seconds so a burst of
    new flows costs one scan.
    """

    def __init__(
        self,
        ttl: float = ENTRY_TTL,
        scan_ttl: float = SCAN_TTL,
        max_entries: int = MAX_ENTRIES,
        proc_root: Path = Path("/proc"),
        clock=time.monotonic,
    ):
        self.ttl = ttl
        self.scan_ttl = scan_ttl
        self.max_entries = max_entries
        self.proc_root = proc_root
        self._clock = clock
        self._cache: "OrderedDict[FlowKey, _Cached]" = OrderedDict()
        self._index: Optional[SocketIndex] = None
        self._owners: Optional[Dict[int, int]] = None
        self._scanned_at = float("-inf")
        self._lock = threading.Lock()
        self.scans = 0
        self.hits = 0
        self.misses = 0

    def attribute_flow(self, key: FlowKey) -> Optional[ProcessInfo]:
        """The process owning the app side of ``key``, or None when unknown."""
        now = self._clock()
        with self._lock:
            cached = self._cache.get(key)
            if cached is not None and now - cached.at < self.ttl:
                self._cache.move_to_end(key)
                self.hits += 1
                return cached.info
            self.misses += 1
            info = self._resolve(key, now)
            self._cache[key] = _Cached(info, now)
            self._cache.move_to_end(key)
            while len(self._cache) > self.max_entries:
                self._cache.popitem(last=False)
            return info

    def _resolve(self, key: FlowKey, now: float) -> Optional[ProcessInfo]:
        if self._index is None or now - self._scanned_at >= self.scan_ttl:
            self._index = read_socket_table(self.proc_root)
            self._owners = None
            self._scanned_at = now
            self.scans += 1
        remote = str(key.remote_addr)
        inode = self._index.get((key.protocol, key.app_port, remote, key.remote_port))
        if inode is None:
            # unconnected UDP sockets have no remote side in the table
            any_remote = "::" if key.remote_addr.version == 6 else "0.0.0.0"
            inode = self._index.get((key.protocol, key.app_port, any_remote, 0))
            if inode is None and key.remote_addr.version == 4:
                inode = self._index.get((key.protocol, key.app_port, "::", 0))
        if inode is None:
            return None
        if self._owners is None:
            self._owners = inode_owners(self.proc_root)
        pid = self._owners.get(inode)
        if pid is None:
            return None
        try:
            return ProcessInfo(pid, psutil.Process(pid).name())
        except (psutil.NoSuchProcess, psutil.AccessDenied):
            return None

    def purge(self) -> int:
        now = self._clock()
        with self._lock:
            stale = [k for k, c in self._cache.items() if now - c.at >= self.ttl]
            for k in stale:
                del self._cache[k]
        return len(stale)

    def __len__(self) -> int:
        with self._lock:
            return len(self._cache)


def attribute_flow(key: FlowKey, attribution: ProcAttribution) -> Optional[ProcessInfo]:
    return attribution.attribute_flow(key)
