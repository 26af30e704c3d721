"""Online predictors for job duration, failure, and flakiness.

The hub owns one learner per (model kind, scope), where scope is either
``project:<id>`` or the cross-project ``shared`` fallback. It subscribes
to integration events: terminal jobs close open predictions, run anomaly
detection, and produce one incremental training step; fresh non-terminal
jobs get one stored prediction per model kind.
"""

from __future__ import annotations

import json
import logging
import math
import threading
from datetime import datetime, timezone
from typing import Callable, Mapping, Optional

from .bus import TOPIC_DATA_INTEGRATED, EventBus
from .errors import MissingActual, NotFound
from .features import compute_features, vector
from .learning import EwLogDuration, OnlineLogisticRegression
from .model import (
    COMPLETED_STATUSES,
    TERMINAL_STATUSES,
    BuildJob,
    DataIntegratedEvent,
    JobStatus,
    ModelKind,
    ModelSnapshot,
    PredictionRecord,
    new_id,
)
from .store import JobQuery, Store

log = logging.getLogger(__name__)

SHARED_SCOPE = "shared"
DEFAULT_DURATION_PRIOR = 300.0
# Classification outcome is a near-certainty miss; duration is >3 sigma.
CLASSIFICATION_LOW = 0.05
CLASSIFICATION_HIGH = 0.95
DURATION_SIGMA_LIMIT = 3.0

_INDEX_KEY = "model.index"


def project_scope(project_id: int) -> str:
    return f"project:{project_id}"


def parse_snapshot_id(snapshot_id: str) -> tuple[ModelKind, str, int]:
    """Split ``kind:scope:count``; scope itself may contain a colon."""
    head, _, count = snapshot_id.rpartition(":")
    kind, _, scope = head.partition(":")
    return ModelKind(kind), scope, int(count)


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


class ModelHub:
    """Owns the online learners and reacts to integration events."""

    def __init__(self, store: Store, clock: Optional[Callable[[], datetime]] = None):
        self._store = store
        self._clock = clock or _utcnow
        self._lock = threading.RLock()
        self._learners: dict[tuple[ModelKind, str], object] = {}
        self._snapshots: dict[str, ModelSnapshot] = {}
        self._index: set[tuple[str, str]] = set()
        raw = store.get_kv(_INDEX_KEY)
        if raw:
            self._index = {tuple(pair) for pair in json.loads(raw)}

    # -- learner lifecycle ------------------------------------------------
    def _new_learner(self, kind: ModelKind):
        if kind is ModelKind.DURATION:
            return EwLogDuration()
        return OnlineLogisticRegression()

    def _learner(self, kind: ModelKind, scope: str):
        key = (kind, scope)
        learner = self._learners.get(key)
        if learner is None:
            learner = self._new_learner(kind)
            raw = self._store.get_kv(f"model.{kind.value}.{scope}")
            if raw:
                learner.set_state(json.loads(raw))
            self._learners[key] = learner
        return learner

    def _persist(self, kind: ModelKind, scope: str) -> None:
        learner = self._learners[(kind, scope)]
        self._store.set_kv(
            f"model.{kind.value}.{scope}", json.dumps(learner.get_state())
        )
        pair = (kind.value, scope)
        if pair not in self._index:
            self._index.add(pair)
            self._store.set_kv(_INDEX_KEY, json.dumps(sorted(self._index)))

    def _trained_count(self, kind: ModelKind, scope: str) -> int:
        return int(getattr(self._learner(kind, scope), "n_observed_", 0))

    # -- snapshots ---------------------------------------------------------
    def current_snapshot(self, kind: ModelKind, scope: str) -> Optional[ModelSnapshot]:
        """Immutable view of the current state; None until first update."""
        with self._lock:
            learner = self._learner(kind, scope)
            count = int(getattr(learner, "n_observed_", 0))
            if count == 0:
                return None
            snapshot_id = f"{kind.value}:{scope}:{count}"
            snap = self._snapshots.get(snapshot_id)
            if snap is None:
                snap = ModelSnapshot(
                    model_snapshot_id=snapshot_id,
                    model_kind=kind,
                    scope=scope,
                    parameters=learner.get_state(),
                    trained_on_count=count,
                    created_at=self._clock(),
                )
                self._snapshots[snapshot_id] = snap
            return snap

    def get_snapshot(self, snapshot_id: str) -> Optional[ModelSnapshot]:
        with self._lock:
            snap = self._snapshots.get(snapshot_id)
            if snap is not None:
                return snap
            kind, scope, count = parse_snapshot_id(snapshot_id)
            if self._trained_count(kind, scope) == count:
                return self.current_snapshot(kind, scope)
            return None

    def list_snapshots(self) -> list[ModelSnapshot]:
        """Current snapshot per known (kind, scope), trained ones only."""
        with self._lock:
            out = []
            for kind_value, scope in sorted(self._index):
                snap = self.current_snapshot(ModelKind(kind_value), scope)
                if snap is not None:
                    out.append(snap)
            return out

    # -- prediction ----------------------------------------------------------
    def _resolve_scope(self, kind: ModelKind, project_id: int) -> Optional[str]:
        for scope in (project_scope(project_id), SHARED_SCOPE):
            if self._trained_count(kind, scope) > 0:
                return scope
        return None

    def duration_prior(self) -> float:
        jobs = self._store.query_jobs(
            JobQuery(
                statuses=tuple(COMPLETED_STATUSES),
                order_by="created_at",
                descending=True,
                limit=200,
            )
        )
        durations = [j.duration for j in jobs if j.duration]
        if durations:
            return float(sum(durations) / len(durations))
        return DEFAULT_DURATION_PRIOR

    def predict(
        self, kind: ModelKind, job: BuildJob, features: Mapping[str, float]
    ) -> PredictionRecord:
        """Predict for one job and store the record.

        Falls back from the project scope to shared, then to an
        uninformed prior (0.5 probability, global mean duration).
        """
        with self._lock:
            scope = self._resolve_scope(kind, job.project_id)
            if scope is None:
                snapshot_id = None
                if kind is ModelKind.DURATION:
                    value = self.duration_prior()
                else:
                    value = 0.5
            else:
                snapshot_id = self.current_snapshot(kind, scope).model_snapshot_id
                learner = self._learner(kind, scope)
                x = vector(features).reshape(1, -1)
                if kind is ModelKind.DURATION:
                    value = float(learner.predict(x)[0])
                else:
                    value = float(learner.predict_proba(x)[0, 1])
            record = PredictionRecord(
                prediction_id=new_id(),
                job_id=job.job_id,
                model_kind=kind,
                predicted_value=value,
                predicted_at=self._clock(),
                model_snapshot_id=snapshot_id,
            )
            self._store.put_prediction(record)
            return record

    # -- training ------------------------------------------------------------
    def _observation(
        self, kind: ModelKind, job: BuildJob
    ) -> Optional[float]:
        """Training target for a terminal job, None when out of scope."""
        if kind is ModelKind.DURATION:
            if job.status in COMPLETED_STATUSES and job.duration:
                return float(job.duration)
            return None
        if kind is ModelKind.FAILURE:
            if job.status in COMPLETED_STATUSES:
                return 1.0 if job.status is JobStatus.FAILED else 0.0
            return None
        if job.status is JobStatus.FAILED:
            if job.flaky:
                return 1.0
            # A lone failure is undecided, not negative: the rerun that
            # would flip the label to flaky may simply not have run yet.
            if self._rerun_completed(job):
                return 0.0
        return None

    def _rerun_completed(self, job: BuildJob) -> bool:
        """A later completed attempt exists in this job's retry group."""
        for other in self._store.get_pipeline_jobs(job.project_id, job.pipeline_id):
            if (
                other.job_id != job.job_id
                and other.name == job.name
                and other.created_at > job.created_at
                and other.status in COMPLETED_STATUSES
            ):
                return True
        return False

    def update(
        self, kind: ModelKind, scope: str, features: Mapping[str, float], y: float
    ) -> None:
        """One incremental step; deterministic given observation order."""
        with self._lock:
            learner = self._learner(kind, scope)
            x = vector(features).reshape(1, -1)
            learner.partial_fit(x, [y])
            self._persist(kind, scope)

    def observe(self, job: BuildJob, features: Mapping[str, float]) -> list[ModelKind]:
        """Train every applicable model kind once per job."""
        trained = []
        for kind in ModelKind:
            y = self._observation(kind, job)
            if y is None:
                continue
            if not self._store.mark_trained(job.job_id, kind):
                continue
            self.update(kind, project_scope(job.project_id), features, y)
            self.update(kind, SHARED_SCOPE, features, y)
            trained.append(kind)
        return trained

    # -- anomaly detection -----------------------------------------------------
    def _sigma_for(self, record: PredictionRecord) -> float:
        if record.model_snapshot_id is not None:
            snap = self.get_snapshot(record.model_snapshot_id)
            if snap is not None and snap.parameters.get("var") is not None:
                return math.sqrt(float(snap.parameters["var"]))
            kind, scope, _ = parse_snapshot_id(record.model_snapshot_id)
            learner = self._learner(kind, scope)
            if getattr(learner, "n_observed_", 0):
                return learner.sigma_
        return math.sqrt(EwLogDuration().initial_variance)

    def detect_anomaly(self, record: PredictionRecord) -> tuple[bool, float]:
        """Flag predicted-vs-actual deviations; score is standardized."""
        if record.actual_value is None:
            raise MissingActual(
                f"prediction {record.prediction_id} has no actual outcome"
            )
        if record.model_kind is ModelKind.DURATION:
            mu = math.log(record.predicted_value)
            sigma = max(self._sigma_for(record), 1e-9)
            score = abs(math.log(record.actual_value) - mu) / sigma
            return score > DURATION_SIGMA_LIMIT, score
        p = record.predicted_value
        actual = record.actual_value
        anomalous = (actual >= 0.5 and p < CLASSIFICATION_LOW) or (
            actual < 0.5 and p > CLASSIFICATION_HIGH
        )
        p_clipped = min(max(p, 1e-9), 1.0 - 1e-9)
        score = abs(actual - p) / math.sqrt(p_clipped * (1.0 - p_clipped))
        return anomalous, score

    # -- event handling ----------------------------------------------------------
    def subscribe(self, bus: EventBus) -> None:
        bus.subscribe("models", [TOPIC_DATA_INTEGRATED], self.on_data_integrated)

    def on_data_integrated(self, topic: str, payload: str, seq: int) -> None:
        """Bus handler: close predictions, detect anomalies, train, predict.

        Idempotent on event_id; per-job errors are logged and skipped so
        one bad record never wedges the subscription.
        """
        event = DataIntegratedEvent.from_dict(json.loads(payload))
        if not self._store.mark_event_processed("models", event.event_id):
            return
        for job_id in event.job_ids:
            try:
                job = self._store.get_job(job_id)
            except NotFound:
                log.warning("event %s names unknown job %s", event.event_id, job_id)
                continue
            try:
                self._handle_job(job)
            except Exception:
                log.exception("model update failed for job %s", job_id)

    def _handle_job(self, job: BuildJob) -> None:
        if job.status in TERMINAL_STATUSES:
            features = compute_features(self._store, job)
            self._close_predictions(job)
            self.observe(job, features)
            if job.status in COMPLETED_STATUSES:
                self._settle_earlier_attempts(job)
            return
        if self._store.query_predictions(job_id=job.job_id, limit=1):
            return
        features = compute_features(self._store, job)
        for kind in ModelKind:
            self.predict(kind, job, features)

    def _settle_earlier_attempts(self, job: BuildJob) -> None:
        """Finish earlier failed attempts this completed rerun decides.

        A failed job's flaky label is only decidable once a later attempt
        completes: success relabels it flaky (handled via the relabel
        event), a second failure confirms it as genuinely failing. Either
        way the earlier attempt's open flaky prediction can now close and
        its training step can run.
        """
        for other in self._store.get_pipeline_jobs(job.project_id, job.pipeline_id):
            if (
                other.status is JobStatus.FAILED
                and other.name == job.name
                and other.created_at < job.created_at
            ):
                self._close_predictions(other)
                self.observe(other, compute_features(self._store, other))

    def _close_predictions(self, job: BuildJob) -> None:
        for kind in ModelKind:
            actual = self._observation(kind, job)
            if actual is None:
                continue
            try:
                record = self._store.attach_actual(job.job_id, kind, actual)
            except NotFound:
                continue
            anomalous, score = self.detect_anomaly(record)
            updated = PredictionRecord(
                prediction_id=record.prediction_id,
                job_id=record.job_id,
                model_kind=record.model_kind,
                predicted_value=record.predicted_value,
                predicted_at=record.predicted_at,
                model_snapshot_id=record.model_snapshot_id,
                actual_value=record.actual_value,
                anomaly=anomalous,
                anomaly_score=score,
            )
            self._store.put_prediction(updated)
