"""Synchronization with the actual twin.

Three intake paths share one pipeline: historical backfill, real-time
webhooks, and a scheduled refresh driven by a persisted high-water
mark. Every path preprocesses raw platform records into domain jobs,
upserts them, recomputes flaky labels for the touched pipelines, and
announces the integrated ids on the bus.
"""

from __future__ import annotations

import json
import logging
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from hmac import compare_digest
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence

from .adapters.base import ActualTwinReader
from .bus import TOPIC_DATA_INTEGRATED, EventBus
from .errors import ActualTwinUnreachable, NotFound, RateLimited, UnparseableRecord
from .features import FEATURE_NAMES
from .model import (
    BuildJob,
    DataIntegratedEvent,
    EventSource,
    JobStatus,
    Project,
    decode_ts,
    encode_ts,
    new_id,
    to_json,
    validate_job,
)
from .store import IGNORED, Store

logger = logging.getLogger(__name__)

WEBHOOK_TOKEN_HEADER = "X-Gitlab-Token"

# Platform status decision table. Unknown strings are quarantined, which
# keeps the metric denominators well-defined.
STATUS_TABLE = {
    "created": JobStatus.PENDING,
    "pending": JobStatus.PENDING,
    "running": JobStatus.RUNNING,
    "success": JobStatus.SUCCESS,
    "failed": JobStatus.FAILED,
    "canceled": JobStatus.CANCELED,
    "skipped": JobStatus.SKIPPED,
    "manual": JobStatus.SKIPPED,
}

_BACKOFF_BASE = 1.0
_BACKOFF_CAP = 60.0


@dataclass(frozen=True)
class BackfillConfig:
    project_ids: tuple[int, ...]
    max_jobs_per_project: Optional[int] = None
    page_size: int = 100
    newest_first: bool = True

    def __post_init__(self):
        if self.max_jobs_per_project is not None and self.max_jobs_per_project < 1:
            raise ValueError("max_jobs_per_project must be >= 1")
        if not 1 <= self.page_size <= 100:
            raise ValueError("page_size must be in [1, 100]")


@dataclass(frozen=True)
class RefreshConfig:
    interval_seconds: int = 300
    enabled: bool = True

    def __post_init__(self):
        if self.interval_seconds < 1:
            raise ValueError("interval_seconds must be >= 1")


@dataclass
class ProjectIngestStats:
    fetched: int = 0
    stored: int = 0
    quarantined: int = 0

    def to_dict(self) -> dict[str, int]:
        return {
            "fetched": self.fetched,
            "stored": self.stored,
            "quarantined": self.quarantined,
        }


@dataclass
class IngestSummary:
    per_project: dict[int, ProjectIngestStats] = field(default_factory=dict)
    events_published: int = 0

    def stats(self, project_id: int) -> ProjectIngestStats:
        return self.per_project.setdefault(project_id, ProjectIngestStats())

    @property
    def fetched(self) -> int:
        return sum(s.fetched for s in self.per_project.values())

    @property
    def stored(self) -> int:
        return sum(s.stored for s in self.per_project.values())

    @property
    def quarantined(self) -> int:
        return sum(s.quarantined for s in self.per_project.values())

    def to_dict(self) -> dict[str, Any]:
        return {
            "fetched": self.fetched,
            "stored": self.stored,
            "quarantined": self.quarantined,
            "events_published": self.events_published,
            "per_project": {
                str(pid): s.to_dict() for pid, s in sorted(self.per_project.items())
            },
        }


def _parse_ts(raw: Any) -> Optional[datetime]:
    if raw is None or raw == "":
        return None
    text = str(raw)
    try:
        return decode_ts(text)
    except ValueError:
        pass
    # legacy hook format: "2021-02-23 02:41:37 UTC"
    if text.endswith(" UTC"):
        try:
            return decode_ts(text[:-4].replace(" ", "T") + "Z")
        except ValueError:
            pass
    raise UnparseableRecord(f"unparseable timestamp {text!r}")


def _get_int(raw: Mapping[str, Any], *keys: str) -> Optional[int]:
    for key in keys:
        value = raw.get(key)
        if value is not None:
            try:
                return int(value)
            except (TypeError, ValueError):
                raise UnparseableRecord(f"field {key} is not an integer")
    return None


def _nonneg(value: Any) -> Optional[float]:
    if value is None:
        return None
    try:
        number = float(value)
    except (TypeError, ValueError):
        return None
    return number if number >= 0 else None


def preprocess(raw: Mapping[str, Any]) -> BuildJob:
    """Normalize one raw platform record (REST or webhook shape).

    All timestamps end up UTC; fields inconsistent with the mapped
    status are dropped rather than defaulted.
    """
    if not isinstance(raw, Mapping):
        raise UnparseableRecord("record is not an object")
    is_hook = "build_id" in raw or raw.get("object_kind") == "build"
    pipeline = raw.get("pipeline") or {}

    job_id = _get_int(raw, "build_id") if is_hook else _get_int(raw, "id")
    project_id = _get_int(raw, "project_id") or _get_int(pipeline, "project_id")
    pipeline_id = (
        _get_int(raw, "pipeline_id") if is_hook else _get_int(pipeline, "id")
    ) or _get_int(raw, "pipeline_id") or _get_int(pipeline, "id")
    name = raw.get("build_name") if is_hook else raw.get("name")
    status_raw = raw.get("build_status") if is_hook else raw.get("status")

    missing = [
        label
        for label, value in [
            ("job id", job_id),
            ("project id", project_id),
            ("pipeline id", pipeline_id),
            ("name", name),
            ("status", status_raw),
        ]
        if value is None
    ]
    if missing:
        raise UnparseableRecord(f"missing required fields: {', '.join(missing)}")

    status = STATUS_TABLE.get(str(status_raw))
    if status is None:
        raise UnparseableRecord(f"unknown status {status_raw!r}")

    prefix = "build_" if is_hook else ""
    created_at = _parse_ts(raw.get(f"{prefix}created_at"))
    if created_at is None:
        raise UnparseableRecord("missing created_at")
    started_at = _parse_ts(raw.get(f"{prefix}started_at"))
    finished_at = _parse_ts(raw.get(f"{prefix}finished_at"))
    duration = _nonneg(raw.get(f"{prefix}duration"))
    queued = _nonneg(raw.get(f"{prefix}queued_duration"))

    if status not in (JobStatus.SUCCESS, JobStatus.FAILED):
        duration = None
    if status in (JobStatus.PENDING, JobStatus.RUNNING):
        finished_at = None
    if status is JobStatus.PENDING:
        started_at = None

    sha = raw.get("sha") or (raw.get("commit") or {}).get("id") or ""
    runner = raw.get("runner") or {}
    runner_id = _get_int(runner, "id") if isinstance(runner, Mapping) else None

    features = raw.get("features") or {}
    if not isinstance(features, Mapping):
        raise UnparseableRecord("features must be an object")
    unknown = sorted(set(features) - set(FEATURE_NAMES))
    if unknown:
        raise UnparseableRecord(f"unknown features: {', '.join(unknown)}")

    job = BuildJob(
        job_id=job_id,
        project_id=project_id,
        pipeline_id=pipeline_id,
        name=str(name),
        ref=str(raw.get("ref") or pipeline.get("ref") or ""),
        commit_sha=str(sha),
        status=status,
        created_at=created_at,
        started_at=started_at,
        finished_at=finished_at,
        queued_duration=queued,
        duration=duration,
        runner_id=runner_id,
        features={k: float(v) for k, v in features.items()},
    )
    violations = validate_job(job)
    if violations:
        raise UnparseableRecord(
            f"record violates invariants: {'; '.join(violations)}"
        )
    return job


def postprocess_flaky(store: Store, project_id: int, pipeline_id: int) -> list[int]:
    """Recompute flaky labels for one pipeline; returns changed job ids.

    A failed job is flaky iff a success exists in its retry group with a
    strictly later created_at. Monotone under growth: once true, a label
    stays true.
    """
    jobs = store.get_pipeline_jobs(project_id, pipeline_id)
    groups: dict[str, list[BuildJob]] = {}
    for job in jobs:
        groups.setdefault(job.name, []).append(job)
    changed: list[int] = []
    for group in groups.values():
        success_times = [j.created_at for j in group if j.status is JobStatus.SUCCESS]
        latest_success = max(success_times) if success_times else None
        for job in group:
            if job.status is not JobStatus.FAILED:
                continue
            label = latest_success is not None and latest_success > job.created_at
            if job.flaky != label:
                updated = store.set_flaky(job.job_id, label)
                if updated.flaky != job.flaky:
                    changed.append(job.job_id)
    return changed


class DeadLetterLog:
    """Append-only quarantine for records ingestion could not parse."""

    def __init__(self, path: Optional[str] = None, keep: int = 1000):
        self._path = Path(path) if path else None
        self._keep = keep
        self.entries: list[dict[str, Any]] = []
        self._lock = threading.Lock()

    def quarantine(self, raw: Any, reason: str, received_at: datetime) -> None:
        entry = {
            "received_at": encode_ts(received_at),
            "reason": reason,
            "raw": raw,
        }
        with self._lock:
            self.entries.append(entry)
            if len(self.entries) > self._keep:
                self.entries.pop(0)
            if self._path:
                self._path.parent.mkdir(parents=True, exist_ok=True)
                with self._path.open("a", encoding="utf-8") as fp:
                    fp.write(json.dumps(entry, sort_keys=True) + "\n")
        logger.warning("quarantined record: %s", reason)


class IngestService:
    """Build data intake with webhook, backfill and refresh paths."""

    def __init__(
        self,
        store: Store,
        bus: EventBus,
        reader: ActualTwinReader,
        webhook_token: str,
        deadletter_path: Optional[str] = None,
        clock: Optional[Callable[[], datetime]] = None,
        synchronous: bool = False,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self._store = store
        self._bus = bus
        self._reader = reader
        self._token = webhook_token
        self._clock = clock or (lambda: datetime.now(timezone.utc))
        self._sleep = sleep
        self._rng = random.Random()
        self.deadletter = DeadLetterLog(deadletter_path)
        self._synchronous = synchronous
        self._executor = None if synchronous else ThreadPoolExecutor(
            max_workers=1, thread_name_prefix="ingest-webhook"
        )

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)

    # -- shared pipeline ---------------------------------------------------
    def _integrate(
        self,
        jobs: Sequence[BuildJob],
        source: EventSource,
        stats: Optional[ProjectIngestStats] = None,
        publish_when_empty: bool = False,
        extra_ids: Sequence[int] = (),
    ) -> tuple[list[int], bool]:
        """Upsert a batch, relabel touched pipelines, publish one event.

        Returns (integrated ids, whether an event went out). With
        publish_when_empty the event still carries the processed ids
        even if every upsert was a no-op (webhook redelivery contract).
        """
        stored_ids: list[int] = []
        processed_ids: list[int] = []
        pipelines: set[tuple[int, int]] = set()
        for job in jobs:
            outcome = self._store.upsert_job(job)
            processed_ids.append(job.job_id)
            pipelines.add((job.project_id, job.pipeline_id))
            if outcome != IGNORED:
                stored_ids.append(job.job_id)
                if stats is not None:
                    stats.stored += 1
        changed: list[int] = []
        for project_id, pipeline_id in sorted(pipelines):
            changed.extend(postprocess_flaky(self._store, project_id, pipeline_id))
        ids = stored_ids if not publish_when_empty else processed_ids
        seen: set[int] = set()
        event_ids = [
            i
            for i in list(ids) + changed + list(extra_ids)
            if not (i in seen or seen.add(i))
        ]
        if not event_ids:
            return stored_ids, False
        event = DataIntegratedEvent(
            event_id=new_id(),
            emitted_at=self._clock(),
            job_ids=tuple(event_ids),
            source=source,
        )
        self._bus.publish(TOPIC_DATA_INTEGRATED, to_json(event))
        return stored_ids, True

    # -- webhook path --------------------------------------------------------
    def handle_webhook(
        self, headers: Mapping[str, str], body: bytes
    ) -> tuple[int, dict[str, Any]]:
        """Token check, parse, enqueue; returns (http status, body)."""
        token = None
        for key, value in headers.items():
            if key.lower() == WEBHOOK_TOKEN_HEADER.lower():
                token = value
                break
        if token is None or not compare_digest(str(token), self._token):
            return 401, {
                "code": "UNAUTHORIZED",
                "message": "invalid webhook token",
                "details": {},
            }
        try:
            payload = json.loads(body)
        except (ValueError, UnicodeDecodeError):
            return 400, {
                "code": "UNPARSEABLE_RECORD",
                "message": "body is not valid JSON",
                "details": {},
            }
        if not isinstance(payload, dict):
            return 400, {
                "code": "UNPARSEABLE_RECORD",
                "message": "body is not a JSON object",
                "details": {},
            }
        if self._synchronous:
            self._process_webhook(payload)
        else:
            self._executor.submit(self._guarded_process, payload)
        return 202, {"status": "accepted"}

    def _guarded_process(self, payload: dict[str, Any]) -> None:
        try:
            self._process_webhook(payload)
        except Exception:
            logger.exception("webhook processing failed")

    def _process_webhook(self, payload: dict[str, Any]) -> None:
        received_at = self._clock()
        try:
            job_id = _get_int(payload, "build_id", "id")
            project_id = _get_int(payload, "project_id")
            if job_id is None or project_id is None:
                raise UnparseableRecord("missing build_id or project_id")
            raw: Mapping[str, Any] = payload
            try:
                raw = self._reader.get_job(project_id, job_id)
            except (NotFound, ActualTwinUnreachable, RateLimited) as exc:
                # fall back to the delivered payload; it carries the
                # same fields, just possibly staler
                logger.warning("job fetch failed (%s), using webhook body", exc)
            job = preprocess(raw)
        except UnparseableRecord as exc:
            self.deadletter.quarantine(payload, exc.message, received_at)
            return
        self._integrate([job], EventSource.WEBHOOK, publish_when_empty=True)

    def flush(self) -> None:
        """Block until queued webhook work is done (test hook)."""
        if self._executor is not None:
            self._executor.submit(lambda: None).result()

    # -- backfill path ---------------------------------------------------------
    def _fetch_page(
        self,
        project_id: int,
        page: int,
        per_page: int,
        updated_after: Optional[datetime] = None,
    ) -> list[dict[str, Any]]:
        attempt = 0
        while True:
            try:
                return self._reader.list_jobs(
                    project_id, page, per_page, updated_after
                )
            except RateLimited as exc:
                delay = exc.retry_after
                if delay is None:
                    delay = min(_BACKOFF_CAP, _BACKOFF_BASE * 2**attempt)
                    delay *= 0.5 + self._rng.random()
                attempt += 1
                logger.info(
                    "rate limited on project %d page %d, backing off %.1fs",
                    project_id, page, delay,
                )
                self._sleep(delay)

    def _register_projects(self, project_ids: Sequence[int]) -> None:
        wanted = set(project_ids)
        try:
            records = self._reader.list_projects()
        except (ActualTwinUnreachable, RateLimited):
            return
        for record in records:
            pid = record.get("id")
            if pid in wanted:
                self._store.upsert_project(
                    Project(
                        project_id=pid,
                        path=record.get("path_with_namespace", f"project-{pid}"),
                        default_ref=record.get("default_branch") or "main",
                    )
                )

    def _ingest_pages(
        self,
        project_id: int,
        source: EventSource,
        summary: IngestSummary,
        page_size: int,
        limit: Optional[int] = None,
        updated_after: Optional[datetime] = None,
    ) -> Optional[datetime]:
        """Page through one project's history; returns max updated_at seen."""
        stats = summary.stats(project_id)
        remaining = limit
        page = 1
        max_updated: Optional[datetime] = None
        while remaining is None or remaining > 0:
            records = self._fetch_page(project_id, page, page_size, updated_after)
            if not records:
                break
            if remaining is not None:
                records = records[:remaining]
            jobs: list[BuildJob] = []
            for record in records:
                stats.fetched += 1
                ts = record.get("updated_at")
                if ts:
                    parsed = _parse_ts(ts)
                    if max_updated is None or parsed > max_updated:
                        max_updated = parsed
                try:
                    jobs.append(preprocess(record))
                except UnparseableRecord as exc:
                    stats.quarantined += 1
                    self.deadletter.quarantine(
                        dict(record), exc.message, self._clock()
                    )
            _, published = self._integrate(jobs, source, stats)
            if published:
                summary.events_published += 1
            if remaining is not None:
                remaining -= len(records)
            if len(records) < page_size:
                break
            page += 1
        return max_updated

    def backfill(self, cfg: BackfillConfig) -> IngestSummary:
        """Pull history newest-first up to the per-project limit."""
        summary = IngestSummary()
        self._register_projects(cfg.project_ids)
        for project_id in cfg.project_ids:
            self._ingest_pages(
                project_id,
                EventSource.BACKFILL,
                summary,
                page_size=cfg.page_size,
                limit=cfg.max_jobs_per_project,
            )
        return summary

    # -- scheduled refresh -------------------------------------------------------
    def refresh_once(self) -> IngestSummary:
        """Fetch deltas past the per-project high-water mark."""
        summary = IngestSummary()
        for project in self._store.list_projects():
            key = f"refresh.hwm.{project.project_id}"
            raw = self._store.get_kv(key)
            hwm = decode_ts(raw) if raw else None
            max_updated = self._ingest_pages(
                project.project_id,
                EventSource.SCHEDULED_REFRESH,
                summary,
                page_size=100,
                updated_after=hwm,
            )
            if max_updated is not None and (hwm is None or max_updated > hwm):
                self._store.set_kv(key, encode_ts(max_updated))
        return summary
