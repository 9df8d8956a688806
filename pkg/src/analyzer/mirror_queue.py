"""Bounded multi-producer queue between the forwarding path and the analyzer.

Producers (the forwarder thread and TLS relay workers) never block. When the
queue holds ``capacity`` data copies, the oldest copy of the flow with the most
queued copies is evicted so short flows keep their visibility; if the incoming
copy belongs to that bulk flow itself, the incoming copy is dropped instead.
Control records are bounded separately: once ``control_capacity`` of them are
queued, new flows are refused as a whole (open, copies, TLS record and close),
so the analyzer never sees half a flow. Close and TLS records of a flow whose
open was queued are never dropped.
"""

import enum
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass
from typing import Any, Deque, Dict, List, Optional, Set, Tuple, Union

from src.packet_codec import Direction, FlowKey

DEFAULT_CAPACITY = 1000
# control records allowed per data-copy slot when no explicit bound is given
CONTROL_RATIO = 4


class EnqueueResult(enum.Enum):
    ACCEPTED = "accepted"
    DROPPED = "dropped"


@dataclass(frozen=True)
class FlowOpen:
    flow_id: int
    key: FlowKey
    at: float


@dataclass(frozen=True)
class FlowCopy:
    flow_id: int
    direction: Direction
    data: bytes
    offset: int  # stream offset of ``data`` in its direction
    at: float


@dataclass(frozen=True)
class TlsMetaRecord:
    flow_id: int
    meta: Any  # TlsFlowMeta
    at: float


@dataclass(frozen=True)
class FlowClose:
    flow_id: int
    bytes_up: int
    bytes_down: int
    at: float


MirrorRecord = Union[FlowOpen, FlowCopy, TlsMetaRecord, FlowClose]


class MirrorQueue:
    def __init__(self, capacity: int = DEFAULT_CAPACITY, control_capacity: Optional[int] = None):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        if control_capacity is not None and control_capacity <= 0:
            raise ValueError("control_capacity must be positive")
        self.capacity = capacity
        self.control_capacity = control_capacity or capacity * CONTROL_RATIO
        self._controls = 0
        self._refused: Set[int] = set()  # flows whose open did not fit
        self._records: Deque[MirrorRecord] = deque()
        self._per_flow: Counter = Counter()
        self._offsets: Dict[Tuple[int, Direction], int] = {}
        self._copies = 0
        self._cond = threading.Condition()
        self._closed = False
        self.accepted = 0
        self.dropped = 0
        self.evicted = 0
        self.max_depth = 0
        self.refused_flows = 0
        self.max_control_depth = 0

    # -- producers ----------------------------------------------------------

    def enqueue_copy(
        self,
        flow_id: int,
        direction: Direction,
        data: bytes,
        now: Optional[float] = None,
    ) -> EnqueueResult:
        at = time.monotonic() if now is None else now
        with self._cond:
            if flow_id in self._refused:
                self.dropped += 1
                return EnqueueResult.DROPPED
            slot = (flow_id, direction)
            offset = self._offsets.get(slot, 0)
            self._offsets[slot] = offset + len(data)
            if self._copies >= self.capacity:
                self.dropped += 1
                bulk, _ = self._per_flow.most_common(1)[0]
                if bulk == flow_id or not self._evict_oldest(bulk):
                    return EnqueueResult.DROPPED
            self._records.append(FlowCopy(flow_id, direction, bytes(data), offset, at))
            self._per_flow[flow_id] += 1
            self._copies += 1
            self.accepted += 1
            self.max_depth = max(self.max_depth, self._copies)
            self._cond.notify()
            return EnqueueResult.ACCEPTED

    def _evict_oldest(self, flow_id: int) -> bool:
        for i, record in enumerate(self._records):
            if isinstance(record, FlowCopy) and record.flow_id == flow_id:
                del self._records[i]
                self._forget(record)
                self.evicted += 1
                return True
        return False

    def _forget(self, record: FlowCopy) -> None:
        self._copies -= 1
        self._per_flow[record.flow_id] -= 1
        if self._per_flow[record.flow_id] <= 0:
            del self._per_flow[record.flow_id]

    def _put_control(self, record: MirrorRecord) -> None:
        self._records.append(record)
        self._controls += 1
        self.max_control_depth = max(self.max_control_depth, self._controls)
        self._cond.notify()

    def open_flow(
        self, flow_id: int, key: FlowKey, now: Optional[float] = None
    ) -> EnqueueResult:
        """Queue a flow-open record.

        Returns:
            DROPPED when ``control_capacity`` control records are already
            queued; every later record of that flow is then dropped too.
        """
        at = time.monotonic() if now is None else now
        with self._cond:
            if self._controls >= self.control_capacity:
                self._refused.add(flow_id)
                self.refused_flows += 1
                return EnqueueResult.DROPPED
            self._refused.discard(flow_id)
            self._put_control(FlowOpen(flow_id, key, at))
            return EnqueueResult.ACCEPTED

    def tls_meta(self, flow_id: int, meta: Any, now: Optional[float] = None) -> None:
        at = time.monotonic() if now is None else now
        with self._cond:
            if flow_id not in self._refused:
                self._put_control(TlsMetaRecord(flow_id, meta, at))

    def close_flow(
        self, flow_id: int, bytes_up: int, bytes_down: int, now: Optional[float] = None
    ) -> None:
        at = time.monotonic() if now is None else now
        with self._cond:
            self._offsets.pop((flow_id, Direction.OUTBOUND), None)
            self._offsets.pop((flow_id, Direction.INBOUND), None)
            if flow_id in self._refused:
                self._refused.discard(flow_id)
                return
            self._put_control(FlowClose(flow_id, bytes_up, bytes_down, at))

    # -- consumer -----------------------------------------------------------

    def get(self, timeout: Optional[float] = None) -> Optional[MirrorRecord]:
        """Next record in FIFO order, or None on timeout / after ``close``."""
        with self._cond:
            if not self._records:
                if self._closed:
                    return None
                self._cond.wait_for(lambda: self._records or self._closed, timeout)
            if not self._records:
                return None
            record = self._records.popleft()
            if isinstance(record, FlowCopy):
                self._forget(record)
            else:
                self._controls -= 1
            return record

    def drain(self, max_records: Optional[int] = None) -> List[MirrorRecord]:
        out: List[MirrorRecord] = []
        while max_records is None or len(out) < max_records:
            record = self.get(timeout=0)
            if record is None:
                break
            out.append(record)
        return out

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    # -- introspection ------------------------------------------------------

    def __len__(self) -> int:
        with self._cond:
            return len(self._records)

    @property
    def depth(self) -> int:
        """Queued data copies (control records excluded)."""
        with self._cond:
            return self._copies

    def snapshot(self) -> dict:
        with self._cond:
            return {
                "capacity": self.capacity,
                "depth": self._copies,
                "max_depth": self.max_depth,
                "accepted": self.accepted,
                "dropped": self.dropped,
                "evicted": self.evicted,
                "control_capacity": self.control_capacity,
                "control_depth": self._controls,
                "max_control_depth": self.max_control_depth,
                "refused_flows": self.refused_flows,
            }
