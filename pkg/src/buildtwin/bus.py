"""In-process pub/sub with durable spill.

Delivery contract: at-least-once, FIFO per subscriber. Every published
message is appended to the store first, so an unacked message survives
restarts; consumers are expected to deduplicate via the store ledgers.

Dispatch runs in cycles. A cycle snapshots the max sequence up front and
walks subscribers in registration order, each one catching up to the
snapshot before the next subscriber starts. That makes cross-subscriber
ordering deterministic for any message published before the cycle.
"""

from __future__ import annotations

import logging
import threading
from datetime import datetime, timedelta, timezone
from typing import Callable, Optional, Sequence

from .errors import BusUnavailable, DuplicateSubscriber
from .store import Store

logger = logging.getLogger(__name__)

TOPIC_DATA_INTEGRATED = "build-data.integrated"

#: Spilled messages older than this are pruned regardless of ack state.
DEFAULT_TTL = timedelta(days=7)
#: After this many redeliveries a message is acked as poison and logged.
DEFAULT_MAX_REDELIVERIES = 5

Handler = Callable[[str, str, int], None]


class _Subscriber:
    def __init__(self, name: str, topics: frozenset[str], handler: Handler):
        self.name = name
        self.topics = topics
        self.handler = handler
        # delivery attempts per pending seq; reset once acked
        self.attempts: dict[int, int] = {}


class EventBus:
    """Store-backed pub/sub hub; handlers run on the dispatcher."""

    def __init__(
        self,
        store: Store,
        ttl: timedelta = DEFAULT_TTL,
        max_redeliveries: int = DEFAULT_MAX_REDELIVERIES,
        clock: Optional[Callable[[], datetime]] = None,
    ):
        self._store = store
        self._ttl = ttl
        self._max_redeliveries = max_redeliveries
        self._clock = clock or (lambda: datetime.now(timezone.utc))
        self._subscribers: list[_Subscriber] = []
        self._sub_lock = threading.Lock()
        self._cycle_lock = threading.Lock()
        self._wake = threading.Event()
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self._closed = False

    # -- wiring ----------------------------------------------------------
    def subscribe(self, name: str, topics: Sequence[str], handler: Handler) -> None:
        with self._sub_lock:
            if any(s.name == name for s in self._subscribers):
                raise DuplicateSubscriber(f"subscriber {name!r} already registered")
            self._subscribers.append(_Subscriber(name, frozenset(topics), handler))

    @property
    def closed(self) -> bool:
        return self._closed

    def publish(self, topic: str, payload: str) -> int:
        if self._closed:
            raise BusUnavailable("bus is stopped")
        seq = self._store.bus_append(topic, payload, self._clock())
        self._wake.set()
        return seq

    def current_seq(self) -> int:
        return self._store.bus_max_seq()

    # -- dispatching -----------------------------------------------------
    def _run_cycle(self) -> bool:
        """One snapshot-bounded pass over all subscribers.

        Returns True when any cursor advanced, so callers can tell
        whether another pass could still make progress.
        """
        snapshot = self._store.bus_max_seq()
        with self._sub_lock:
            subscribers = list(self._subscribers)
        progressed = False
        for sub in subscribers:
            cursor = self._store.bus_get_cursor(sub.name)
            if cursor >= snapshot:
                continue
            for seq, topic, payload, _published in self._store.bus_load(cursor):
                if seq > snapshot:
                    break
                if topic in sub.topics:
                    try:
                        sub.handler(topic, payload, seq)
                    except Exception:
                        n = sub.attempts.get(seq, 0) + 1
                        sub.attempts[seq] = n
                        if n <= self._max_redeliveries:
                            logger.warning(
                                "delivery to %s failed for seq %d (attempt %d), "
                                "will redeliver",
                                sub.name, seq, n,
                            )
                            # FIFO: everything behind this message waits
                            break
                        logger.error(
                            "poison message seq %d for subscriber %s, acking "
                            "after %d redeliveries",
                            seq, sub.name, self._max_redeliveries,
                            exc_info=True,
                        )
                sub.attempts.pop(seq, None)
                self._store.bus_set_cursor(sub.name, seq)
                cursor = seq
                progressed = True
        return progressed

    def _loop(self) -> None:
        while not self._stop.is_set():
            self._wake.clear()
            with self._cycle_lock:
                progressed = self._run_cycle()
            if progressed:
                continue
            self._wake.wait(timeout=0.05)

    def start(self) -> None:
        if self._thread is not None:
            return
        self._stop.clear()
        self._thread = threading.Thread(target=self._loop, name="bus-dispatcher", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        if self._thread is None:
            return
        self._stop.set()
        self._wake.set()
        self._thread.join(timeout=5.0)
        self._thread = None

    def close(self) -> None:
        self.stop()
        self._closed = True

    def drain(self, max_cycles: int = 10_000) -> None:
        """Dispatch synchronously until every subscriber is caught up.

        Poison-acking guarantees termination: a failing message blocks
        its subscriber for at most max_redeliveries + 1 cycles.
        """
        for _ in range(max_cycles):
            with self._cycle_lock:
                progressed = self._run_cycle()
            if progressed:
                continue
            target = self._store.bus_max_seq()
            with self._sub_lock:
                names = [s.name for s in self._subscribers]
            if all(self._store.bus_get_cursor(n) >= target for n in names):
                return
        raise BusUnavailable("drain did not converge")

    # -- retention -------------------------------------------------------
    def prune(self) -> int:
        """Apply the retention window to the spill; returns rows dropped."""
        return self._store.bus_prune(self._clock() - self._ttl)
