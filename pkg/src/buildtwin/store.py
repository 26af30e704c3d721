"""Embedded persistence for the twin.

Two interchangeable backends behind one contract: a SQLite file store
(WAL, per-thread connections, single writer lock) and a dict-backed
in-memory store for tests. All mutation funnels through upsert_job so
the conflict rules live in exactly one place.
"""

from __future__ import annotations

import json
import logging
import sqlite3
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from datetime import datetime
from typing import Any, Iterable, Optional, Sequence

from .errors import InvalidQuery, NotFound
from .model import (
    AlertRule,
    BuildJob,
    ImprovementAction,
    JobStatus,
    ModelKind,
    PredictionRecord,
    Project,
    decode_ts,
    encode_ts,
    require_valid,
)

logger = logging.getLogger(__name__)

INSERTED = "inserted"
UPDATED = "updated"
IGNORED = "ignored"

# Conflict rank. Terminal states always beat in-flight ones; among the
# in-flight ones the later lifecycle stage wins so shuffled redelivery
# of full-state events converges to the same row.
_STATUS_RANK = {
    JobStatus.CREATED: 0,
    JobStatus.PENDING: 1,
    JobStatus.RUNNING: 2,
    JobStatus.SUCCESS: 3,
    JobStatus.FAILED: 3,
    JobStatus.CANCELED: 3,
    JobStatus.SKIPPED: 3,
}


def merge_flaky(stored: Optional[bool], incoming: Optional[bool]) -> Optional[bool]:
    """Flaky is monotone: once true it stays true; None never erases."""
    if stored is True:
        return True
    if incoming is None:
        return stored
    return incoming


def resolve_upsert(stored: Optional[BuildJob], incoming: BuildJob) -> tuple[str, BuildJob]:
    """Decide what an upsert does; shared by every backend."""
    if stored is None:
        return INSERTED, incoming
    r_in, r_st = _STATUS_RANK[incoming.status], _STATUS_RANK[stored.status]
    if r_in < r_st:
        # stale lifecycle stage arriving late; keep what we have
        return IGNORED, stored
    merged = replace(incoming, flaky=merge_flaky(stored.flaky, incoming.flaky))
    if merged == stored:
        return IGNORED, stored
    return UPDATED, merged


@dataclass(frozen=True)
class UpsertSummary:
    inserted: int = 0
    updated: int = 0
    ignored: int = 0

    def to_dict(self) -> dict[str, int]:
        return {"inserted": self.inserted, "updated": self.updated, "ignored": self.ignored}

    def __add__(self, other: "UpsertSummary") -> "UpsertSummary":
        return UpsertSummary(
            self.inserted + other.inserted,
            self.updated + other.updated,
            self.ignored + other.ignored,
        )


@dataclass(frozen=True)
class JobQuery:
    """Declarative job filter; every field is optional and ANDed."""

    project_ids: Optional[Sequence[int]] = None
    statuses: Optional[Sequence[JobStatus]] = None
    name: Optional[str] = None
    ref: Optional[str] = None
    created_from: Optional[datetime] = None
    created_to: Optional[datetime] = None
    finished_from: Optional[datetime] = None
    finished_to: Optional[datetime] = None
    flaky: Optional[bool] = None
    order_by: str = "created_at"
    descending: bool = False
    limit: Optional[int] = None
    offset: int = 0

    def __post_init__(self):
        if self.order_by not in ("created_at", "finished_at", "job_id"):
            raise InvalidQuery(f"cannot order by {self.order_by!r}")
        if self.limit is not None and self.limit < 0:
            raise InvalidQuery("limit must be >= 0")
        if self.offset < 0:
            raise InvalidQuery("offset must be >= 0")

    def matches(self, job: BuildJob) -> bool:
        if self.project_ids is not None and job.project_id not in self.project_ids:
            return False
        if self.statuses is not None and job.status not in self.statuses:
            return False
        if self.name is not None and job.name != self.name:
            return False
        if self.ref is not None and job.ref != self.ref:
            return False
        if self.created_from is not None and job.created_at < self.created_from:
            return False
        if self.created_to is not None and not job.created_at < self.created_to:
            return False
        if self.finished_from is not None and (
            job.finished_at is None or job.finished_at < self.finished_from
        ):
            return False
        if self.finished_to is not None and (
            job.finished_at is None or not job.finished_at < self.finished_to
        ):
            return False
        if self.flaky is not None and job.flaky is not self.flaky:
            return False
        return True


def _sort_key(job: BuildJob, order_by: str):
    if order_by == "job_id":
        return (job.job_id,)
    if order_by == "finished_at":
        primary = job.finished_at or job.created_at
    else:
        primary = job.created_at
    return (primary, job.job_id)


class Store(ABC):
    """Persistence contract every backend satisfies."""

    # -- jobs -----------------------------------------------------------
    @abstractmethod
    def upsert_job(self, job: BuildJob) -> str:
        """Insert or reconcile one job; returns inserted/updated/ignored."""

    def upsert_jobs(self, jobs: Sequence[BuildJob]) -> UpsertSummary:
        """Validate then upsert a batch; idempotent per job_id."""
        require_valid(jobs)
        counts = {INSERTED: 0, UPDATED: 0, IGNORED: 0}
        for job in jobs:
            counts[self.upsert_job(job)] += 1
        return UpsertSummary(counts[INSERTED], counts[UPDATED], counts[IGNORED])

    @abstractmethod
    def get_job(self, job_id: int) -> BuildJob:
        """Fetch one job or raise NotFound."""

    @abstractmethod
    def query_jobs(self, query: JobQuery) -> list[BuildJob]:
        ...

    @abstractmethod
    def count_jobs(self, query: JobQuery) -> int:
        ...

    @abstractmethod
    def get_group(self, project_id: int, pipeline_id: int, name: str) -> list[BuildJob]:
        """All jobs of one retry group, created_at then job_id ascending."""

    @abstractmethod
    def get_pipeline_jobs(self, project_id: int, pipeline_id: int) -> list[BuildJob]:
        """All jobs of one pipeline, created_at then job_id ascending."""

    def set_flaky(self, job_id: int, flaky: bool) -> BuildJob:
        job = self.get_job(job_id)
        merged = merge_flaky(job.flaky, flaky)
        if merged == job.flaky:
            return job
        updated = job.with_flaky(merged)
        self._overwrite_job(updated)
        return updated

    @abstractmethod
    def _overwrite_job(self, job: BuildJob) -> None:
        """Backend primitive behind set_flaky; bypasses conflict rules."""

    def export_jobs(self) -> list[dict[str, Any]]:
        """Every job as canonical dicts, ordered by job_id."""
        return [
            j.to_dict()
            for j in self.query_jobs(JobQuery(order_by="job_id"))
        ]

    # -- projects -------------------------------------------------------
    @abstractmethod
    def upsert_project(self, project: Project) -> None:
        ...

    @abstractmethod
    def list_projects(self) -> list[Project]:
        ...

    # -- predictions ----------------------------------------------------
    @abstractmethod
    def put_prediction(self, record: PredictionRecord) -> None:
        ...

    @abstractmethod
    def get_prediction(self, prediction_id: str) -> PredictionRecord:
        ...

    @abstractmethod
    def query_predictions(
        self,
        job_id: Optional[int] = None,
        model_kind: Optional[ModelKind] = None,
        anomalies_only: bool = False,
        limit: Optional[int] = None,
    ) -> list[PredictionRecord]:
        """Newest first by predicted_at, prediction_id tiebreak."""

    def attach_actual(
        self, job_id: int, model_kind: ModelKind, actual_value: float
    ) -> PredictionRecord:
        """Fill the actual outcome on the newest matching prediction.

        Idempotent: re-attaching the same value leaves the record as is.
        """
        hits = self.query_predictions(job_id=job_id, model_kind=model_kind, limit=1)
        if not hits:
            raise NotFound(
                f"no {model_kind.value} prediction for job {job_id}"
            )
        record = hits[0]
        if record.actual_value == actual_value:
            return record
        updated = replace(record, actual_value=actual_value)
        self.put_prediction(updated)
        return updated

    # -- idempotency ledgers --------------------------------------------
    @abstractmethod
    def mark_event_processed(self, consumer: str, event_id: str) -> bool:
        """True when first seen for this consumer, False on replay."""

    @abstractmethod
    def mark_trained(self, job_id: int, model_kind: ModelKind) -> bool:
        """True when this job has not yet trained this model kind."""

    # -- key/value ------------------------------------------------------
    @abstractmethod
    def get_kv(self, key: str) -> Optional[str]:
        ...

    @abstractmethod
    def set_kv(self, key: str, value: str) -> None:
        ...

    # -- improvement actions --------------------------------------------
    @abstractmethod
    def put_action(self, action: ImprovementAction) -> None:
        """Insert or replace by action_id."""

    @abstractmethod
    def get_action(self, action_id: str) -> ImprovementAction:
        ...

    @abstractmethod
    def list_actions(self, status: Optional[str] = None) -> list[ImprovementAction]:
        """Newest first by created_at, action_id tiebreak."""

    # -- alert rules ----------------------------------------------------
    @abstractmethod
    def put_rule(self, rule: AlertRule) -> None:
        ...

    @abstractmethod
    def delete_rule(self, rule_id: str) -> None:
        ...

    @abstractmethod
    def list_rules(self) -> list[AlertRule]:
        ...

    # -- bus spill ------------------------------------------------------
    @abstractmethod
    def bus_append(self, topic: str, payload: str, published_at: datetime) -> int:
        """Durably append one message; returns its sequence number."""

    @abstractmethod
    def bus_load(self, after_seq: int = 0) -> list[tuple[int, str, str, datetime]]:
        """Messages with seq > after_seq as (seq, topic, payload, published_at)."""

    @abstractmethod
    def bus_max_seq(self) -> int:
        ...

    @abstractmethod
    def bus_prune(self, cutoff: datetime) -> int:
        """Drop messages published before the cutoff; returns count."""

    @abstractmethod
    def bus_get_cursor(self, subscriber: str) -> int:
        ...

    @abstractmethod
    def bus_set_cursor(self, subscriber: str, seq: int) -> None:
        ...

    def close(self) -> None:
        pass


class MemoryStore(Store):
    """Dict-backed store; single-process, lock-guarded."""

    def __init__(self):
        self._lock = threading.RLock()
        self._jobs: dict[int, BuildJob] = {}
        self._projects: dict[int, Project] = {}
        self._predictions: dict[str, PredictionRecord] = {}
        self._processed: set[tuple[str, str]] = set()
        self._trained: set[tuple[int, str]] = set()
        self._kv: dict[str, str] = {}
        self._actions: dict[str, ImprovementAction] = {}
        self._rules: dict[str, AlertRule] = {}
        self._bus: list[tuple[int, str, str, datetime]] = []
        self._bus_seq = 0
        self._cursors: dict[str, int] = {}

    def upsert_job(self, job: BuildJob) -> str:
        with self._lock:
            outcome, result = resolve_upsert(self._jobs.get(job.job_id), job)
            if outcome != IGNORED:
                self._jobs[job.job_id] = result
            return outcome

    def get_job(self, job_id: int) -> BuildJob:
        with self._lock:
            job = self._jobs.get(job_id)
        if job is None:
            raise NotFound(f"job {job_id} not found")
        return job

    def query_jobs(self, query: JobQuery) -> list[BuildJob]:
        with self._lock:
            hits = [j for j in self._jobs.values() if query.matches(j)]
        hits.sort(key=lambda j: _sort_key(j, query.order_by), reverse=query.descending)
        stop = None if query.limit is None else query.offset + query.limit
        return hits[query.offset:stop]

    def count_jobs(self, query: JobQuery) -> int:
        with self._lock:
            return sum(1 for j in self._jobs.values() if query.matches(j))

    def get_group(self, project_id: int, pipeline_id: int, name: str) -> list[BuildJob]:
        with self._lock:
            hits = [
                j
                for j in self._jobs.values()
                if j.group_key == (project_id, pipeline_id, name)
            ]
        hits.sort(key=lambda j: (j.created_at, j.job_id))
        return hits

    def get_pipeline_jobs(self, project_id: int, pipeline_id: int) -> list[BuildJob]:
        with self._lock:
            hits = [
                j
                for j in self._jobs.values()
                if j.project_id == project_id and j.pipeline_id == pipeline_id
            ]
        hits.sort(key=lambda j: (j.created_at, j.job_id))
        return hits

    def _overwrite_job(self, job: BuildJob) -> None:
        with self._lock:
            self._jobs[job.job_id] = job

    def upsert_project(self, project: Project) -> None:
        with self._lock:
            self._projects[project.project_id] = project

    def list_projects(self) -> list[Project]:
        with self._lock:
            return sorted(self._projects.values(), key=lambda p: p.project_id)

    def put_prediction(self, record: PredictionRecord) -> None:
        with self._lock:
            self._predictions[record.prediction_id] = record

    def get_prediction(self, prediction_id: str) -> PredictionRecord:
        with self._lock:
            rec = self._predictions.get(prediction_id)
        if rec is None:
            raise NotFound(f"prediction {prediction_id} not found")
        return rec

    def query_predictions(
        self,
        job_id: Optional[int] = None,
        model_kind: Optional[ModelKind] = None,
        anomalies_only: bool = False,
        limit: Optional[int] = None,
    ) -> list[PredictionRecord]:
        with self._lock:
            hits = list(self._predictions.values())
        if job_id is not None:
            hits = [r for r in hits if r.job_id == job_id]
        if model_kind is not None:
            hits = [r for r in hits if r.model_kind == model_kind]
        if anomalies_only:
            hits = [r for r in hits if r.anomaly]
        hits.sort(key=lambda r: (r.predicted_at, r.prediction_id), reverse=True)
        return hits if limit is None else hits[:limit]

    def mark_event_processed(self, consumer: str, event_id: str) -> bool:
        with self._lock:
            key = (consumer, event_id)
            if key in self._processed:
                return False
            self._processed.add(key)
            return True

    def mark_trained(self, job_id: int, model_kind: ModelKind) -> bool:
        with self._lock:
            key = (job_id, model_kind.value)
            if key in self._trained:
                return False
            self._trained.add(key)
            return True

    def get_kv(self, key: str) -> Optional[str]:
        with self._lock:
            return self._kv.get(key)

    def set_kv(self, key: str, value: str) -> None:
        with self._lock:
            self._kv[key] = value

    def put_action(self, action: ImprovementAction) -> None:
        with self._lock:
            self._actions[action.action_id] = action

    def get_action(self, action_id: str) -> ImprovementAction:
        with self._lock:
            action = self._actions.get(action_id)
        if action is None:
            raise NotFound(f"action {action_id} not found")
        return action

    def list_actions(self, status: Optional[str] = None) -> list[ImprovementAction]:
        with self._lock:
            hits = list(self._actions.values())
        if status is not None:
            hits = [a for a in hits if a.status.value == status]
        hits.sort(key=lambda a: (a.created_at, a.action_id), reverse=True)
        return hits

    def put_rule(self, rule: AlertRule) -> None:
        with self._lock:
            self._rules[rule.rule_id] = rule

    def delete_rule(self, rule_id: str) -> None:
        with self._lock:
            if rule_id not in self._rules:
                raise NotFound(f"rule {rule_id} not found")
            del self._rules[rule_id]

    def list_rules(self) -> list[AlertRule]:
        with self._lock:
            return sorted(self._rules.values(), key=lambda r: r.rule_id)

    def bus_append(self, topic: str, payload: str, published_at: datetime) -> int:
        with self._lock:
            self._bus_seq += 1
            self._bus.append((self._bus_seq, topic, payload, published_at))
            return self._bus_seq

    def bus_load(self, after_seq: int = 0) -> list[tuple[int, str, str, datetime]]:
        with self._lock:
            return [row for row in self._bus if row[0] > after_seq]

    def bus_max_seq(self) -> int:
        with self._lock:
            return self._bus_seq

    def bus_prune(self, cutoff: datetime) -> int:
        with self._lock:
            keep = [row for row in self._bus if not row[3] < cutoff]
            dropped = len(self._bus) - len(keep)
            self._bus = keep
            return dropped

    def bus_get_cursor(self, subscriber: str) -> int:
        with self._lock:
            return self._cursors.get(subscriber, 0)

    def bus_set_cursor(self, subscriber: str, seq: int) -> None:
        with self._lock:
            self._cursors[subscriber] = seq


_SCHEMA = """
CREATE TABLE IF NOT EXISTS jobs (
    job_id INTEGER PRIMARY KEY,
    project_id INTEGER NOT NULL,
    pipeline_id INTEGER NOT NULL,
    name TEXT NOT NULL,
    ref TEXT NOT NULL,
    commit_sha TEXT NOT NULL,
    status TEXT NOT NULL,
    created_at TEXT NOT NULL,
    started_at TEXT,
    finished_at TEXT,
    queued_duration REAL,
    duration REAL,
    runner_id INTEGER,
    flaky INTEGER,
    features TEXT NOT NULL DEFAULT '{}'
);
CREATE INDEX IF NOT EXISTS idx_jobs_group ON jobs(project_id, pipeline_id, name);
CREATE INDEX IF NOT EXISTS idx_jobs_created ON jobs(created_at);
CREATE INDEX IF NOT EXISTS idx_jobs_finished ON jobs(finished_at);
CREATE TABLE IF NOT EXISTS projects (
    project_id INTEGER PRIMARY KEY,
    doc TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS predictions (
    prediction_id TEXT PRIMARY KEY,
    job_id INTEGER NOT NULL,
    model_kind TEXT NOT NULL,
    predicted_at TEXT NOT NULL,
    anomaly INTEGER,
    doc TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS idx_pred_job ON predictions(job_id);
CREATE TABLE IF NOT EXISTS processed_events (
    consumer TEXT NOT NULL,
    event_id TEXT NOT NULL,
    PRIMARY KEY (consumer, event_id)
);
CREATE TABLE IF NOT EXISTS training_ledger (
    job_id INTEGER NOT NULL,
    model_kind TEXT NOT NULL,
    PRIMARY KEY (job_id, model_kind)
);
CREATE TABLE IF NOT EXISTS kv (
    key TEXT PRIMARY KEY,
    value TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS actions (
    action_id TEXT PRIMARY KEY,
    status TEXT NOT NULL,
    created_at TEXT NOT NULL,
    doc TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS alert_rules (
    rule_id TEXT PRIMARY KEY,
    doc TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS bus_events (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    topic TEXT NOT NULL,
    payload TEXT NOT NULL,
    published_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS bus_cursors (
    subscriber TEXT PRIMARY KEY,
    acked_seq INTEGER NOT NULL
);
"""


def _job_to_row(job: BuildJob) -> tuple:
    return (
        job.job_id,
        job.project_id,
        job.pipeline_id,
        job.name,
        job.ref,
        job.commit_sha,
        job.status.value,
        encode_ts(job.created_at),
        None if job.started_at is None else encode_ts(job.started_at),
        None if job.finished_at is None else encode_ts(job.finished_at),
        job.queued_duration,
        job.duration,
        job.runner_id,
        None if job.flaky is None else int(job.flaky),
        json.dumps(job.features, sort_keys=True),
    )


def _row_to_job(row: sqlite3.Row) -> BuildJob:
    return BuildJob(
        job_id=row["job_id"],
        project_id=row["project_id"],
        pipeline_id=row["pipeline_id"],
        name=row["name"],
        ref=row["ref"],
        commit_sha=row["commit_sha"],
        status=JobStatus(row["status"]),
        created_at=decode_ts(row["created_at"]),
        started_at=None if row["started_at"] is None else decode_ts(row["started_at"]),
        finished_at=None if row["finished_at"] is None else decode_ts(row["finished_at"]),
        queued_duration=row["queued_duration"],
        duration=row["duration"],
        runner_id=row["runner_id"],
        flaky=None if row["flaky"] is None else bool(row["flaky"]),
        features=json.loads(row["features"]),
    )


class SqliteStore(Store):
    """File-backed store. One connection per thread, one writer at a time.

    Timestamps persist as the canonical text encoding, which is fixed
    width, so lexicographic comparison in SQL matches time order.
    """

    def __init__(self, path: str):
        self._path = path
        self._local = threading.local()
        self._write_lock = threading.Lock()
        with self._conn() as conn:
            conn.executescript(_SCHEMA)

    def _conn(self) -> sqlite3.Connection:
        conn = getattr(self._local, "conn", None)
        if conn is None:
            conn = sqlite3.connect(self._path, timeout=30.0)
            conn.row_factory = sqlite3.Row
            conn.execute("PRAGMA journal_mode=WAL")
            conn.execute("PRAGMA synchronous=NORMAL")
            conn.execute("PRAGMA foreign_keys=ON")
            self._local.conn = conn
        return conn

    def close(self) -> None:
        conn = getattr(self._local, "conn", None)
        if conn is not None:
            conn.close()
            self._local.conn = None

    # -- jobs -----------------------------------------------------------
    def upsert_job(self, job: BuildJob) -> str:
        with self._write_lock:
            conn = self._conn()
            row = conn.execute(
                "SELECT * FROM jobs WHERE job_id = ?", (job.job_id,)
            ).fetchone()
            stored = None if row is None else _row_to_job(row)
            outcome, result = resolve_upsert(stored, job)
            if outcome != IGNORED:
                with conn:
                    conn.execute(
                        "INSERT OR REPLACE INTO jobs VALUES "
                        "(?,?,?,?,?,?,?,?,?,?,?,?,?,?,?)",
                        _job_to_row(result),
                    )
            return outcome

    def get_job(self, job_id: int) -> BuildJob:
        row = self._conn().execute(
            "SELECT * FROM jobs WHERE job_id = ?", (job_id,)
        ).fetchone()
        if row is None:
            raise NotFound(f"job {job_id} not found")
        return _row_to_job(row)

    def _build_where(self, query: JobQuery) -> tuple[str, list]:
        clauses: list[str] = []
        params: list = []
        if query.project_ids is not None:
            ids = list(query.project_ids)
            clauses.append(
                f"project_id IN ({','.join('?' * len(ids))})" if ids else "0"
            )
            params.extend(ids)
        if query.statuses is not None:
            vals = [s.value for s in query.statuses]
            clauses.append(f"status IN ({','.join('?' * len(vals))})" if vals else "0")
            params.extend(vals)
        if query.name is not None:
            clauses.append("name = ?")
            params.append(query.name)
        if query.ref is not None:
            clauses.append("ref = ?")
            params.append(query.ref)
        if query.created_from is not None:
            clauses.append("created_at >= ?")
            params.append(encode_ts(query.created_from))
        if query.created_to is not None:
            clauses.append("created_at < ?")
            params.append(encode_ts(query.created_to))
        if query.finished_from is not None:
            clauses.append("finished_at IS NOT NULL AND finished_at >= ?")
            params.append(encode_ts(query.finished_from))
        if query.finished_to is not None:
            clauses.append("finished_at IS NOT NULL AND finished_at < ?")
            params.append(encode_ts(query.finished_to))
        if query.flaky is not None:
            clauses.append("flaky = ?")
            params.append(int(query.flaky))
        where = f" WHERE {' AND '.join(clauses)}" if clauses else ""
        return where, params

    def query_jobs(self, query: JobQuery) -> list[BuildJob]:
        where, params = self._build_where(query)
        direction = "DESC" if query.descending else "ASC"
        if query.order_by == "job_id":
            order = f"job_id {direction}"
        elif query.order_by == "finished_at":
            order = f"COALESCE(finished_at, created_at) {direction}, job_id {direction}"
        else:
            order = f"created_at {direction}, job_id {direction}"
        sql = f"SELECT * FROM jobs{where} ORDER BY {order}"
        if query.limit is not None:
            sql += f" LIMIT {int(query.limit)} OFFSET {int(query.offset)}"
        elif query.offset:
            sql += f" LIMIT -1 OFFSET {int(query.offset)}"
        rows = self._conn().execute(sql, params).fetchall()
        return [_row_to_job(r) for r in rows]

    def count_jobs(self, query: JobQuery) -> int:
        where, params = self._build_where(query)
        row = self._conn().execute(
            f"SELECT COUNT(*) AS n FROM jobs{where}", params
        ).fetchone()
        return row["n"]

    def get_group(self, project_id: int, pipeline_id: int, name: str) -> list[BuildJob]:
        rows = self._conn().execute(
            "SELECT * FROM jobs WHERE project_id = ? AND pipeline_id = ? AND name = ? "
            "ORDER BY created_at, job_id",
            (project_id, pipeline_id, name),
        ).fetchall()
        return [_row_to_job(r) for r in rows]

    def get_pipeline_jobs(self, project_id: int, pipeline_id: int) -> list[BuildJob]:
        rows = self._conn().execute(
            "SELECT * FROM jobs WHERE project_id = ? AND pipeline_id = ? "
            "ORDER BY created_at, job_id",
            (project_id, pipeline_id),
        ).fetchall()
        return [_row_to_job(r) for r in rows]

    def _overwrite_job(self, job: BuildJob) -> None:
        with self._write_lock:
            conn = self._conn()
            with conn:
                conn.execute(
                    "INSERT OR REPLACE INTO jobs VALUES (?,?,?,?,?,?,?,?,?,?,?,?,?,?,?)",
                    _job_to_row(job),
                )

    # -- projects -------------------------------------------------------
    def upsert_project(self, project: Project) -> None:
        with self._write_lock:
            conn = self._conn()
            with conn:
                conn.execute(
                    "INSERT OR REPLACE INTO projects VALUES (?, ?)",
                    (project.project_id, json.dumps(project.to_dict())),
                )

    def list_projects(self) -> list[Project]:
        rows = self._conn().execute(
            "SELECT doc FROM projects ORDER BY project_id"
        ).fetchall()
        return [Project.from_dict(json.loads(r["doc"])) for r in rows]

    # -- predictions ----------------------------------------------------
    def put_prediction(self, record: PredictionRecord) -> None:
        with self._write_lock:
            conn = self._conn()
            with conn:
                conn.execute(
                    "INSERT OR REPLACE INTO predictions VALUES (?,?,?,?,?,?)",
                    (
                        record.prediction_id,
                        record.job_id,
                        record.model_kind.value,
                        encode_ts(record.predicted_at),
                        None if record.anomaly is None else int(record.anomaly),
                        json.dumps(record.to_dict()),
                    ),
                )

    def get_prediction(self, prediction_id: str) -> PredictionRecord:
        row = self._conn().execute(
            "SELECT doc FROM predictions WHERE prediction_id = ?",
            (prediction_id,),
        ).fetchone()
        if row is None:
            raise NotFound(f"prediction {prediction_id} not found")
        return PredictionRecord.from_dict(json.loads(row["doc"]))

    def query_predictions(
        self,
        job_id: Optional[int] = None,
        model_kind: Optional[ModelKind] = None,
        anomalies_only: bool = False,
        limit: Optional[int] = None,
    ) -> list[PredictionRecord]:
        clauses: list[str] = []
        params: list = []
        if job_id is not None:
            clauses.append("job_id = ?")
            params.append(job_id)
        if model_kind is not None:
            clauses.append("model_kind = ?")
            params.append(model_kind.value)
        if anomalies_only:
            clauses.append("anomaly = 1")
        where = f" WHERE {' AND '.join(clauses)}" if clauses else ""
        sql = (
            f"SELECT doc FROM predictions{where} "
            "ORDER BY predicted_at DESC, prediction_id DESC"
        )
        if limit is not None:
            sql += f" LIMIT {int(limit)}"
        rows = self._conn().execute(sql, params).fetchall()
        return [PredictionRecord.from_dict(json.loads(r["doc"])) for r in rows]

    # -- idempotency ledgers --------------------------------------------
    def mark_event_processed(self, consumer: str, event_id: str) -> bool:
        with self._write_lock:
            conn = self._conn()
            with conn:
                cur = conn.execute(
                    "INSERT OR IGNORE INTO processed_events VALUES (?, ?)",
                    (consumer, event_id),
                )
            return cur.rowcount == 1

    def mark_trained(self, job_id: int, model_kind: ModelKind) -> bool:
        with self._write_lock:
            conn = self._conn()
            with conn:
                cur = conn.execute(
                    "INSERT OR IGNORE INTO training_ledger VALUES (?, ?)",
                    (job_id, model_kind.value),
                )
            return cur.rowcount == 1

    # -- key/value ------------------------------------------------------
    def get_kv(self, key: str) -> Optional[str]:
        row = self._conn().execute(
            "SELECT value FROM kv WHERE key = ?", (key,)
        ).fetchone()
        return None if row is None else row["value"]

    def set_kv(self, key: str, value: str) -> None:
        with self._write_lock:
            conn = self._conn()
            with conn:
                conn.execute("INSERT OR REPLACE INTO kv VALUES (?, ?)", (key, value))

    # -- improvement actions --------------------------------------------
    def put_action(self, action: ImprovementAction) -> None:
        with self._write_lock:
            conn = self._conn()
            with conn:
                conn.execute(
                    "INSERT OR REPLACE INTO actions VALUES (?,?,?,?)",
                    (
                        action.action_id,
                        action.status.value,
                        encode_ts(action.created_at),
                        json.dumps(action.to_dict()),
                    ),
                )

    def get_action(self, action_id: str) -> ImprovementAction:
        row = self._conn().execute(
            "SELECT doc FROM actions WHERE action_id = ?", (action_id,)
        ).fetchone()
        if row is None:
            raise NotFound(f"action {action_id} not found")
        return ImprovementAction.from_dict(json.loads(row["doc"]))

    def list_actions(self, status: Optional[str] = None) -> list[ImprovementAction]:
        if status is not None:
            rows = self._conn().execute(
                "SELECT doc FROM actions WHERE status = ? "
                "ORDER BY created_at DESC, action_id DESC",
                (status,),
            ).fetchall()
        else:
            rows = self._conn().execute(
                "SELECT doc FROM actions ORDER BY created_at DESC, action_id DESC"
            ).fetchall()
        return [ImprovementAction.from_dict(json.loads(r["doc"])) for r in rows]

    # -- alert rules ----------------------------------------------------
    def put_rule(self, rule: AlertRule) -> None:
        with self._write_lock:
            conn = self._conn()
            with conn:
                conn.execute(
                    "INSERT OR REPLACE INTO alert_rules VALUES (?, ?)",
                    (rule.rule_id, json.dumps(rule.to_dict())),
                )

    def delete_rule(self, rule_id: str) -> None:
        with self._write_lock:
            conn = self._conn()
            with conn:
                cur = conn.execute(
                    "DELETE FROM alert_rules WHERE rule_id = ?", (rule_id,)
                )
            if cur.rowcount == 0:
                raise NotFound(f"rule {rule_id} not found")

    def list_rules(self) -> list[AlertRule]:
        rows = self._conn().execute(
            "SELECT doc FROM alert_rules ORDER BY rule_id"
        ).fetchall()
        return [AlertRule.from_dict(json.loads(r["doc"])) for r in rows]

    # -- bus spill ------------------------------------------------------
    def bus_append(self, topic: str, payload: str, published_at: datetime) -> int:
        with self._write_lock:
            conn = self._conn()
            with conn:
                cur = conn.execute(
                    "INSERT INTO bus_events (topic, payload, published_at) "
                    "VALUES (?, ?, ?)",
                    (topic, payload, encode_ts(published_at)),
                )
            return cur.lastrowid

    def bus_load(self, after_seq: int = 0) -> list[tuple[int, str, str, datetime]]:
        rows = self._conn().execute(
            "SELECT seq, topic, payload, published_at FROM bus_events "
            "WHERE seq > ? ORDER BY seq",
            (after_seq,),
        ).fetchall()
        return [
            (r["seq"], r["topic"], r["payload"], decode_ts(r["published_at"]))
            for r in rows
        ]

    def bus_max_seq(self) -> int:
        row = self._conn().execute(
            "SELECT COALESCE(MAX(seq), 0) AS m FROM bus_events"
        ).fetchone()
        return row["m"]

    def bus_prune(self, cutoff: datetime) -> int:
        with self._write_lock:
            conn = self._conn()
            with conn:
                cur = conn.execute(
                    "DELETE FROM bus_events WHERE published_at < ?",
                    (encode_ts(cutoff),),
                )
            return cur.rowcount

    def bus_get_cursor(self, subscriber: str) -> int:
        row = self._conn().execute(
            "SELECT acked_seq FROM bus_cursors WHERE subscriber = ?",
            (subscriber,),
        ).fetchone()
        return 0 if row is None else row["acked_seq"]

    def bus_set_cursor(self, subscriber: str, seq: int) -> None:
        with self._write_lock:
            conn = self._conn()
            with conn:
                conn.execute(
                    "INSERT OR REPLACE INTO bus_cursors VALUES (?, ?)",
                    (subscriber, seq),
                )


def open_store(url: str) -> Store:
    """Open a store from a URL-ish spec: 'memory://' or a sqlite path.

    Follows the common database-URL convention: ``sqlite:///twin.db`` is
    relative to the working directory, ``sqlite:////var/lib/twin.db`` is
    absolute.
    """
    if url in ("memory://", ":memory:", "memory"):
        return MemoryStore()
    if url.startswith("sqlite:///"):
        url = url[len("sqlite:///"):]
    elif url.startswith("sqlite://"):
        url = url[len("sqlite://"):]
    return SqliteStore(url)


def import_jobs(store: Store, lines: Iterable[str]) -> int:
    """Load NDJSON job lines through the normal upsert path."""
    n = 0
    for line in lines:
        line = line.strip()
        if not line:
            continue
        store.upsert_job(BuildJob.from_dict(json.loads(line)))
        n += 1
    return n
