"""Composition root: builds the store, bus, services, and workers.

Subscriber order is fixed (models, improve, metrics cache) so one bus
cycle trains and predicts before proposals read those predictions.
"""

from __future__ import annotations

import logging
import threading
import uuid
from datetime import datetime
from typing import Callable, Optional

from .adapters.base import ActualTwinReader, ActualTwinWriter
from .adapters.gitlab import GitLabReader, GitLabWriter
from .adapters.simulator import SimConfig, SimulatedPlatform
from .bus import EventBus
from .config import AppConfig
from .errors import InvalidConfig
from .improve import ImprovementEngine
from .ingest import IngestService
from .metrics import MetricsService
from .models import ModelHub
from .store import Store, open_store

log = logging.getLogger(__name__)


class _Periodic(threading.Thread):
    def __init__(self, name: str, interval: float, tick: Callable[[], None]):
        super().__init__(name=name, daemon=True)
        self._interval = interval
        self._tick = tick
        # Not named _stop: Thread.join() calls a private _stop() internally.
        self._halt = threading.Event()

    def run(self) -> None:
        while not self._halt.wait(self._interval):
            try:
                self._tick()
            except Exception:
                log.exception("%s tick failed", self.name)

    def cancel(self) -> None:
        self._halt.set()


class Runtime:
    """Wired application; start() spins up the background workers."""

    def __init__(
        self,
        cfg: AppConfig,
        reader: Optional[ActualTwinReader] = None,
        writer: Optional[ActualTwinWriter] = None,
        clock: Optional[Callable[[], datetime]] = None,
        synchronous: bool = False,
    ):
        self.cfg = cfg
        self.store: Store = open_store(cfg.store.url)
        self.bus = EventBus(self.store, clock=clock)
        if reader is None:
            reader, default_writer = self._build_adapter(cfg)
            writer = writer or default_writer
        self.reader = reader
        self.writer = writer

        token = cfg.ingest.webhook_token
        if token is None and cfg.simulator is not None:
            token = cfg.simulator.webhook_token
        if token is None:
            token = uuid.uuid4().hex
            log.warning("no webhook token configured; generated %s", token)
        self.webhook_token = token

        self.hub = ModelHub(self.store, clock=clock)
        self.ingest = IngestService(
            self.store,
            self.bus,
            reader,
            webhook_token=token,
            deadletter_path=cfg.ingest.deadletter_path,
            clock=clock,
            synchronous=synchronous,
        )
        self.improve = ImprovementEngine(
            self.store, self.hub, writer=writer, config=cfg.improve, clock=clock
        )
        self.metrics = MetricsService(
            self.store, clock=clock, on_firing=self.improve.on_alert
        )
        self.hub.subscribe(self.bus)
        self.improve.subscribe(self.bus)
        self.metrics.subscribe(self.bus)
        self._workers: list[_Periodic] = []
        self._started = False

    def _build_adapter(
        self, cfg: AppConfig
    ) -> tuple[ActualTwinReader, Optional[ActualTwinWriter]]:
        if cfg.adapter.kind == "simulator":
            platform = SimulatedPlatform(
                cfg.simulator or SimConfig(), horizon_seconds=0.0
            )
            return platform, platform
        if not cfg.adapter.base_url:
            raise InvalidConfig("adapter.base_url required for the gitlab adapter")
        reader = GitLabReader(cfg.adapter.base_url, cfg.adapter.token)
        writer = GitLabWriter(cfg.adapter.base_url, cfg.adapter.token)
        return reader, writer

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        self.bus.start()
        if self.cfg.ingest.refresh_enabled:
            self._workers.append(
                _Periodic(
                    "scheduled-refresh",
                    self.cfg.ingest.refresh_interval_seconds,
                    lambda: self.ingest.refresh_once(),
                )
            )
        self._workers.append(
            _Periodic(
                "alert-evaluator",
                self.cfg.service.alert_interval_seconds,
                lambda: self.metrics.evaluate_all(),
            )
        )
        self._workers.append(
            _Periodic("bus-prune", 3600.0, self.bus.prune)
        )
        for worker in self._workers:
            worker.start()

    def stop(self) -> None:
        for worker in self._workers:
            worker.cancel()
        for worker in self._workers:
            worker.join(timeout=5.0)
        self._workers.clear()
        self.ingest.close()
        self.bus.close()
        self.store.close()
        self._started = False

    def drain(self) -> None:
        """Settle queued webhook work and bus deliveries (test hook)."""
        self.ingest.flush()
        self.bus.drain()
