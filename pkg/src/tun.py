"""TUN device access.

``LinuxTun`` opens ``/dev/net/tun`` in IFF_TUN | IFF_NO_PI mode so every read
returns exactly one raw IP packet. ``MemoryTun`` is the in-memory double used
by the tests and by the in-process bench transport: the "app" side injects
packets and collects what the gateway writes back.
"""

import errno
import fcntl
import logging
import os
import struct
import threading
from abc import ABC, abstractmethod
from collections import deque
import time
from typing import Deque, List, Optional, Tuple

logger = logging.getLogger("flowtap.tun")

_TUNSETIFF = 0x400454CA
_IFF_TUN = 0x0001
_IFF_NO_PI = 0x1000


class TunClosed(RuntimeError):
    """The TUN device went away; the forwarder shuts down cleanly."""


class PrivilegeMissing(RuntimeError):
    """Creating the TUN device needs CAP_NET_ADMIN."""


class TunBusy(RuntimeError):
    """Another process holds the TUN device."""


class TunDevice(ABC):
    """Non-blocking packet interface."""

    @abstractmethod
    def read_packets(self, max_packets: int) -> List[bytes]:
        """Return at most ``max_packets`` packets without blocking."""

    @abstractmethod
    def write_packet(self, data: bytes) -> None:
        pass

    def read_timed(self, max_packets: int) -> List[Tuple[bytes, Optional[float]]]:
        """Like ``read_packets`` but pairs each packet with its arrival time, when known."""
        return [(data, None) for data in self.read_packets(max_packets)]

    def close(self) -> None:
        pass


class LinuxTun(TunDevice):
    def __init__(self, name: str = "flowtap0", mtu: int = 1500):
        self.name = name
        self.mtu = mtu
        try:
            self._fd = os.open("/dev/net/tun", os.O_RDWR | os.O_NONBLOCK)
        except PermissionError as e:
            raise PrivilegeMissing(f"cannot open /dev/net/tun: {e}") from e
        except FileNotFoundError as e:
            raise PrivilegeMissing("/dev/net/tun is missing (load the tun module)") from e
        ifr = struct.pack("16sH", name.encode(), _IFF_TUN | _IFF_NO_PI)
        try:
            fcntl.ioctl(self._fd, _TUNSETIFF, ifr)
        except OSError as e:
            os.close(self._fd)
            if e.errno == errno.EBUSY:
                raise TunBusy(f"TUN device {name} is busy") from e
            if e.errno == errno.EPERM:
                raise PrivilegeMissing(f"TUNSETIFF on {name} needs CAP_NET_ADMIN") from e
            raise
        self._closed = False
        logger.info("Opened TUN device %s (mtu %d)", name, mtu)

    def fileno(self) -> int:
        return self._fd

    def read_packets(self, max_packets: int) -> List[bytes]:
        if self._closed:
            raise TunClosed(self.name)
        packets: List[bytes] = []
        while len(packets) < max_packets:
            try:
                data = os.read(self._fd, self.mtu + 64)
            except BlockingIOError:
                break
            except OSError as e:
                if e.errno in (errno.EBADF, errno.EIO):
                    raise TunClosed(self.name) from e
                raise
            if not data:
                raise TunClosed(self.name)
            packets.append(data)
        return packets

    def write_packet(self, data: bytes) -> None:
        try:
            os.write(self._fd, data)
        except BlockingIOError:
            logger.debug("TUN write would block; packet dropped")
        except OSError as e:
            if e.errno in (errno.EBADF, errno.EIO):
                raise TunClosed(self.name) from e
            raise

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            os.close(self._fd)


class MemoryTun(TunDevice):
    """Thread-safe in-memory TUN double."""

    def __init__(self) -> None:
        self._inbound: Deque[Tuple[bytes, float]] = deque()
        self._outbound: Deque[bytes] = deque()
        self._cond = threading.Condition()
        self._closed = False
        self.reads = 0

    # -- gateway side --------------------------------------------------------

    def read_packets(self, max_packets: int) -> List[bytes]:
        with self._cond:
            if self._closed and not self._inbound:
                raise TunClosed("memory")
            packets = []
            while self._inbound and len(packets) < max_packets:
                packets.append(self._inbound.popleft()[0])
            self.reads += len(packets)
            return packets

    def read_timed(self, max_packets: int) -> List[Tuple[bytes, Optional[float]]]:
        with self._cond:
            if self._closed and not self._inbound:
                raise TunClosed("memory")
            frames: List[Tuple[bytes, Optional[float]]] = []
            while self._inbound and len(frames) < max_packets:
                frames.append(self._inbound.popleft())
            self.reads += len(frames)
            return frames

    def write_packet(self, data: bytes) -> None:
        with self._cond:
            self._outbound.append(data)
            self._cond.notify_all()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    # -- app side ------------------------------------------------------------

    def inject(self, data: bytes) -> None:
        with self._cond:
            self._inbound.append((data, time.perf_counter()))

    def pending_inbound(self) -> int:
        with self._cond:
            return len(self._inbound)

    def take_outbound(self, timeout: Optional[float] = None) -> Optional[bytes]:
        """Pop the next packet written by the gateway, waiting up to ``timeout``."""
        with self._cond:
            if not self._outbound and timeout:
                self._cond.wait_for(lambda: self._outbound or self._closed, timeout)
            return self._outbound.popleft() if self._outbound else None

    def drain_outbound(self) -> List[bytes]:
        with self._cond:
            packets = list(self._outbound)
            self._outbound.clear()
            return packets


__all__ = [
    "LinuxTun",
    "MemoryTun",
    "PrivilegeMissing",
    "TunBusy",
    "TunClosed",
    "TunDevice",
]
