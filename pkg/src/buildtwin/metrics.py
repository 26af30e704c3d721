"""Windowed build metrics and threshold alerting.

Four metrics per window: executions_frequency counts jobs by creation
time, the outcome metrics (mean_duration, failure_ratio,
flaky_failure_ratio) bucket completed jobs by finish time. Windows are
half-open [start, end) on UTC calendar boundaries: weeks start Monday,
months on the 1st, years on Jan 1. Snapshots are computed on read; a
small cache is dropped whenever new data is integrated.
"""

from __future__ import annotations

import calendar
import json
import logging
import threading
from datetime import datetime, timedelta, timezone
from typing import Callable, Optional

import httpx

from .bus import TOPIC_DATA_INTEGRATED, EventBus
from .errors import InvertedRange, UnalignedWindow
from .model import (
    AlertFiring,
    AlertRule,
    JobStatus,
    MetricInterval,
    MetricSnapshot,
    Scope,
    encode_ts,
    utc_ms,
)
from .store import JobQuery, Store

log = logging.getLogger(__name__)

ALERT_STATE_PREFIX = "alert.state."


def floor_window(at: datetime, interval: MetricInterval) -> datetime:
    """Start of the window containing `at`."""
    at = utc_ms(at).astimezone(timezone.utc)
    if interval is MetricInterval.HOURLY:
        return at.replace(minute=0, second=0, microsecond=0)
    day = at.replace(hour=0, minute=0, second=0, microsecond=0)
    if interval is MetricInterval.DAILY:
        return day
    if interval is MetricInterval.WEEKLY:
        return day - timedelta(days=day.weekday())
    if interval is MetricInterval.MONTHLY:
        return day.replace(day=1)
    return day.replace(month=1, day=1)


def advance(window_start: datetime, interval: MetricInterval) -> datetime:
    if interval is MetricInterval.HOURLY:
        return window_start + timedelta(hours=1)
    if interval is MetricInterval.DAILY:
        return window_start + timedelta(days=1)
    if interval is MetricInterval.WEEKLY:
        return window_start + timedelta(days=7)
    if interval is MetricInterval.MONTHLY:
        days = calendar.monthrange(window_start.year, window_start.month)[1]
        return window_start + timedelta(days=days)
    return window_start.replace(year=window_start.year + 1)


def is_aligned(at: datetime, interval: MetricInterval) -> bool:
    return floor_window(at, interval) == utc_ms(at).astimezone(timezone.utc)


def previous_closed_window(now: datetime, interval: MetricInterval) -> datetime:
    """Start of the newest window that ended at or before `now`."""
    current = floor_window(now, interval)
    if interval is MetricInterval.MONTHLY:
        back = (current - timedelta(days=1)).replace(day=1)
    elif interval is MetricInterval.YEARLY:
        back = current.replace(year=current.year - 1)
    else:
        back = floor_window(current - timedelta(seconds=1), interval)
    return back


def compute_snapshot(
    store: Store,
    scope: Scope,
    interval: MetricInterval,
    window_start: datetime,
) -> MetricSnapshot:
    """Compute all four metrics for one boundary-aligned window."""
    if not is_aligned(window_start, interval):
        raise UnalignedWindow(
            f"{encode_ts(utc_ms(window_start))} is not a {interval.value} boundary"
        )
    window_start = utc_ms(window_start).astimezone(timezone.utc)
    window_end = advance(window_start, interval)

    frequency = store.count_jobs(
        JobQuery(project_ids=scope, created_from=window_start, created_to=window_end)
    )
    completed = store.query_jobs(
        JobQuery(
            project_ids=scope,
            statuses=(JobStatus.SUCCESS, JobStatus.FAILED),
            finished_from=window_start,
            finished_to=window_end,
        )
    )
    durations = [j.duration for j in completed if j.duration is not None]
    failed = [j for j in completed if j.status is JobStatus.FAILED]
    flaky = [j for j in failed if j.flaky]

    return MetricSnapshot(
        scope=scope,
        window_start=window_start,
        window_end=window_end,
        interval=interval,
        executions_frequency=frequency,
        mean_duration=sum(durations) / len(durations) if durations else None,
        failure_ratio=len(failed) / len(completed) if completed else None,
        flaky_failure_ratio=len(flaky) / len(failed) if failed else None,
    )


def series(
    store: Store,
    scope: Scope,
    interval: MetricInterval,
    window_from: datetime,
    window_to: datetime,
) -> list[MetricSnapshot]:
    """One snapshot per window in [from, to); gaps stay as empty rows."""
    for edge in (window_from, window_to):
        if not is_aligned(edge, interval):
            raise UnalignedWindow(
                f"{encode_ts(utc_ms(edge))} is not a {interval.value} boundary"
            )
    window_from = utc_ms(window_from).astimezone(timezone.utc)
    window_to = utc_ms(window_to).astimezone(timezone.utc)
    if window_from > window_to:
        raise InvertedRange("from must be <= to")
    out = []
    cursor = window_from
    while cursor < window_to:
        out.append(compute_snapshot(store, scope, interval, cursor))
        cursor = advance(cursor, interval)
    return out


class MetricsService:
    """Cached snapshot reads plus edge-triggered alert evaluation."""

    def __init__(
        self,
        store: Store,
        clock: Optional[Callable[[], datetime]] = None,
        on_firing: Optional[Callable[[AlertFiring, AlertRule], None]] = None,
    ):
        self._store = store
        self._clock = clock or (lambda: datetime.now(timezone.utc))
        self._on_firing = on_firing
        self._cache: dict = {}
        self._cache_lock = threading.Lock()

    def subscribe(self, bus: EventBus) -> None:
        bus.subscribe(
            "metrics-cache", [TOPIC_DATA_INTEGRATED], self._on_data_integrated
        )

    def _on_data_integrated(self, topic: str, payload: str, seq: int) -> None:
        with self._cache_lock:
            self._cache.clear()

    def snapshot(
        self, scope: Scope, interval: MetricInterval, window_start: datetime
    ) -> MetricSnapshot:
        key = (scope, interval, utc_ms(window_start))
        with self._cache_lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        snap = compute_snapshot(self._store, scope, interval, window_start)
        with self._cache_lock:
            self._cache[key] = snap
        return snap

    def series(
        self,
        scope: Scope,
        interval: MetricInterval,
        window_from: datetime,
        window_to: datetime,
    ) -> list[MetricSnapshot]:
        for edge in (window_from, window_to):
            if not is_aligned(edge, interval):
                raise UnalignedWindow(
                    f"{encode_ts(utc_ms(edge))} is not a {interval.value} boundary"
                )
        window_from = utc_ms(window_from).astimezone(timezone.utc)
        window_to = utc_ms(window_to).astimezone(timezone.utc)
        if window_from > window_to:
            raise InvertedRange("from must be <= to")
        out = []
        cursor = window_from
        while cursor < window_to:
            out.append(self.snapshot(scope, interval, cursor))
            cursor = advance(cursor, interval)
        return out

    # -- alerting --------------------------------------------------------
    def evaluate_alerts(
        self, rules: list[AlertRule], now: Optional[datetime] = None
    ) -> list[AlertFiring]:
        """Check each rule on its newest closed window; fire on false→true.

        Edge state persists in the store, so a window that keeps breaching
        fires once, and a recovered-then-breached metric fires again.
        """
        now = now or self._clock()
        firings = []
        for rule in rules:
            window_start = previous_closed_window(now, rule.interval)
            snap = self.snapshot(rule.scope, rule.interval, window_start)
            value = snap.metric(rule.metric)
            holds = value is not None and rule.comparator.holds(value, rule.threshold)
            state_key = ALERT_STATE_PREFIX + rule.rule_id
            raw = self._store.get_kv(state_key)
            held_before = bool(json.loads(raw)["holds"]) if raw else False
            self._store.set_kv(
                state_key,
                json.dumps({"window": encode_ts(window_start), "holds": holds}),
            )
            if holds and not held_before:
                firing = AlertFiring(
                    rule_id=rule.rule_id, snapshot=snap, fired_at=now
                )
                firings.append(firing)
                self._deliver(firing, rule)
        return firings

    def evaluate_all(self, now: Optional[datetime] = None) -> list[AlertFiring]:
        return self.evaluate_alerts(self._store.list_rules(), now)

    def _deliver(self, firing: AlertFiring, rule: AlertRule) -> None:
        if rule.sink == "webhook" and rule.webhook_url:
            try:
                httpx.post(rule.webhook_url, json=firing.to_dict(), timeout=5.0)
            except httpx.HTTPError:
                log.warning("alert webhook delivery failed for %s", rule.rule_id)
        else:
            log.warning(
                "alert %s: %s %s %s (window %s)",
                rule.rule_id,
                rule.metric,
                rule.comparator.value,
                rule.threshold,
                encode_ts(firing.snapshot.window_start),
            )
        if self._on_firing is not None:
            try:
                self._on_firing(firing, rule)
            except Exception:
                log.exception("alert callback failed for %s", rule.rule_id)
