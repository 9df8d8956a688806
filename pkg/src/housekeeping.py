"""Periodic gateway chores: event-sink flush, cache purges, status log line."""

import logging
import signal
from typing import Callable, Optional

from apscheduler.schedulers.background import BackgroundScheduler

from src.analyzer.attribution import ProcAttribution
from src.analyzer.dns import DnsCache
from src.analyzer.events import EventSink
from src.tls_gate.whitelist import InterceptWhitelist

logger = logging.getLogger("flowtap.housekeeping")

SINK_FLUSH_INTERVAL = 0.1
PURGE_INTERVAL = 30.0

# Global scheduler instance
_scheduler: Optional[BackgroundScheduler] = None


def _flush_sink(sink: EventSink) -> None:
    """Write buffered events out; a failing sink is logged, not raised."""
    try:
        sink.flush()
    except Exception as e:
        logger.exception(f"Error flushing event sink: {e}")


def _purge_caches(
    dns_cache: Optional[DnsCache],
    attribution: Optional[ProcAttribution],
    whitelist: Optional[InterceptWhitelist],
) -> None:
    """Drop expired DNS answers, process lookups and whitelist entries.

    Args:
        dns_cache: Resolver cache, or None when the analyzer is off
        attribution: Process attribution cache, or None
        whitelist: TLS interception whitelist, or None when TLS is off
    """
    try:
        dropped = {
            "dns": dns_cache.purge() if dns_cache is not None else 0,
            "attribution": attribution.purge() if attribution is not None else 0,
            "whitelist": whitelist.purge() if whitelist is not None else 0,
        }
        if any(dropped.values()):
            logger.debug(f"Purged expired entries: {dropped}")
    except Exception as e:
        logger.exception(f"Error purging caches: {e}")


def _log_status(status: Callable[[], dict]) -> None:
    """Log one line summarising the gateway.

    Args:
        status: Returns the same snapshot the control socket serves
    """
    try:
        snap = status()
        loop = snap.get("forwarder", {})
        queue = (snap.get("analyzer") or {}).get("queue", {})
        logger.info(
            f"status: mode={snap.get('mode')} flows={loop.get('flows')} "
            f"cycles={loop.get('cycles')} sleeps={loop.get('sleeps')} "
            f"queue={queue.get('depth')}/{queue.get('capacity')} "
            f"dropped={queue.get('dropped')}"
        )
    except Exception as e:
        logger.exception(f"Error logging status: {e}")


def start_housekeeping(
    sink: Optional[EventSink] = None,
    dns_cache: Optional[DnsCache] = None,
    attribution: Optional[ProcAttribution] = None,
    whitelist: Optional[InterceptWhitelist] = None,
    status: Optional[Callable[[], dict]] = None,
    status_interval: float = 60.0,
    purge_interval: float = PURGE_INTERVAL,
    daemonize: bool = True,
) -> BackgroundScheduler:
    """Schedule the gateway's interval jobs.

    Args:
        sink: Event sink flushed every 100 ms
        dns_cache: DNS answer cache purged every ``purge_interval``
        attribution: Process-lookup cache purged alongside
        whitelist: TLS whitelist purged alongside
        status: Snapshot callable logged every ``status_interval`` (0 disables)
        daemonize: Start the scheduler before returning

    Returns:
        BackgroundScheduler instance (for testing or manual management)
    """
    global _scheduler

    scheduler = BackgroundScheduler()
    _scheduler = scheduler

    if sink is not None:
        scheduler.add_job(
            _flush_sink,
            "interval",
            seconds=SINK_FLUSH_INTERVAL,
            args=(sink,),
            id="flush_sink",
            name="Flush Event Sink",
            max_instances=1,
            coalesce=True,
        )

    if any(c is not None for c in (dns_cache, attribution, whitelist)):
        scheduler.add_job(
            _purge_caches,
            "interval",
            seconds=purge_interval,
            args=(dns_cache, attribution, whitelist),
            id="purge_caches",
            name="Purge Expired Cache Entries",
            coalesce=True,
        )

    if status is not None and status_interval > 0:
        scheduler.add_job(
            _log_status,
            "interval",
            seconds=status_interval,
            args=(status,),
            id="log_status",
            name="Log Gateway Status",
            coalesce=True,
        )

    job_ids = ", ".join(job.id for job in scheduler.get_jobs())
    logger.info(f"Housekeeping jobs: {job_ids}")

    if daemonize:
        scheduler.start()
    return scheduler


def stop_housekeeping() -> None:
    """Stop the housekeeping scheduler."""
    global _scheduler
    if _scheduler:
        if _scheduler.running:
            _scheduler.shutdown(wait=False)
        _scheduler = None
        logger.info("Housekeeping stopped")


def setup_signal_handlers(on_signal: Callable[[], None]) -> None:
    """Route SIGINT/SIGTERM to ``on_signal`` for a graceful shutdown.

    Args:
        on_signal: Called once per received signal, from the main thread
    """

    def handle_signal(sig, frame):
        logger.info(f"Received signal {sig}, shutting down...")
        on_signal()

    signal.signal(signal.SIGINT, handle_signal)
    signal.signal(signal.SIGTERM, handle_signal)
