"""Which flows the analyzer looks at.

Sampling is decided once per flow when it opens (on the forwarder thread);
process targeting needs attribution and is applied by the analyzer.
"""

import random
import threading
from typing import Iterable, Optional, Set

from src.packet_codec import FlowKey


class FlowSampler:
    def __init__(
        self,
        rate: float = 1.0,
        targets: Optional[Iterable[str]] = None,
        rng: Optional[random.Random] = None,
    ):
        self._lock = threading.Lock()
        self._rng = rng or random.Random()
        self.rate = 1.0
        self.targets: Set[str] = set()
        self.set_rate(rate)
        self.set_targets(targets or ())
        self.admitted = 0
        self.skipped = 0

    def set_rate(self, rate: float) -> None:
        if not 0.0 <= rate <= 1.0:
            raise ValueError("sampling rate must be within [0, 1]")
        with self._lock:
            self.rate = rate

    def set_targets(self, names: Iterable[str]) -> None:
        with self._lock:
            self.targets = {n for n in names if n}

    def admit(self, key: FlowKey) -> bool:
        with self._lock:
            ok = self.rate >= 1.0 or self._rng.random() < self.rate
            if ok:
                self.admitted += 1
            else:
                self.skipped += 1
            return ok

    def wants_process(self, name: Optional[str]) -> bool:
        """True when no targets are set or ``name`` is one of them."""
        with self._lock:
            if not self.targets:
                return True
            return name in self.targets

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "rate": self.rate,
                "targets": sorted(self.targets),
                "admitted": self.admitted,
                "skipped": self.skipped,
            }
