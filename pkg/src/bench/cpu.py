"""CPU cost of the polling loop on an idle gateway.

Samples are taken once a second by an APScheduler interval job. With a
gateway running, the forwarder thread's own CPU time is read through
psutil; with ``config=None`` the whole process is sampled instead, which
is the gateway-off baseline.
"""

import logging
import threading
import time
from typing import Callable, List, Optional

import psutil
from apscheduler.schedulers.background import BackgroundScheduler

from src.bench.endpoint import InprocGateway
from src.bench.report import BenchReport
from src.forwarder import ForwarderConfig

logger = logging.getLogger("flowtap.bench.cpu")

SAMPLE_INTERVAL = 1.0


def _thread_cpu_seconds(proc: psutil.Process, native_id: int) -> Optional[float]:
    for t in proc.threads():
        if t.id == native_id:
            return t.user_time + t.system_time
    return None


def _process_cpu_seconds(proc: psutil.Process) -> float:
    times = proc.cpu_times()
    return times.user + times.system


class CpuSampler:
    """Turns a cumulative CPU-seconds reader into per-interval percentages."""

    def __init__(self, read: Callable[[], Optional[float]], clock=time.monotonic):
        self.read = read
        self.clock = clock
        self.samples: List[float] = []
        self._last: Optional[tuple] = None
        self._lock = threading.Lock()

    def sample(self) -> None:
        try:
            cpu = self.read()
        except psutil.Error as e:
            logger.warning("CPU sample failed: %s", e)
            return
        if cpu is None:
            return
        now = self.clock()
        with self._lock:
            if self._last is not None:
                last_cpu, last_at = self._last
                wall = now - last_at
                if wall > 0:
                    self.samples.append(max(0.0, (cpu - last_cpu) / wall * 100.0))
            self._last = (cpu, now)


def _sample_for(sampler: CpuSampler, duration: float, interval: float) -> List[float]:
    scheduler = BackgroundScheduler()
    scheduler.add_job(
        sampler.sample,
        "interval",
        seconds=interval,
        id="cpu_sample",
        name="Sample CPU time",
        max_instances=1,
    )
    sampler.sample()
    scheduler.start()
    try:
        time.sleep(duration)
    finally:
        scheduler.shutdown(wait=False)
    return list(sampler.samples)


def cpu_profile(
    duration: float = 10.0,
    config: Optional[ForwarderConfig] = None,
    interval: float = SAMPLE_INTERVAL,
) -> BenchReport:
    """Mean CPU percentage of the idle loop (``cpu_pct``)."""
    report = BenchReport(
        scenario="cpu",
        config=config.to_dict() if config else {"gateway": "off"},
        declared_n=max(1, int(duration / interval) - 1),
        extra={"duration_s": duration},
    )
    proc = psutil.Process()
    if config is None:
        sampler = CpuSampler(lambda: _process_cpu_seconds(proc))
        report.extend("cpu_pct", _sample_for(sampler, duration, interval))
    else:
        with InprocGateway(config) as gateway:
            deadline = time.monotonic() + 2.0
            while gateway.forwarder.thread_native_id is None and time.monotonic() < deadline:
                time.sleep(0.01)
            native_id = gateway.forwarder.thread_native_id
            if native_id is None:
                sampler = CpuSampler(lambda: _process_cpu_seconds(proc))
            else:
                sampler = CpuSampler(lambda: _thread_cpu_seconds(proc, native_id))
            report.extend("cpu_pct", _sample_for(sampler, duration, interval))
            report.extra["loop"] = gateway.forwarder.stats.snapshot()
    if report.samples.get("cpu_pct"):
        logger.info("CPU %s: %.2f%%", report.config, report.mean("cpu_pct"))
    return report
