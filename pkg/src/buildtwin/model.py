"""Core domain types of the build-process twin.

All types are immutable values with a canonical JSON encoding (snake_case
keys, RFC 3339 UTC timestamps at millisecond precision). Mutation happens
only through the store module.
"""

from __future__ import annotations

import json
import uuid
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Iterable, Mapping, Optional, Sequence

from .errors import ValidationError

UTC = timezone.utc


class JobStatus(str, Enum):
    CREATED = "created"
    PENDING = "pending"
    RUNNING = "running"
    SUCCESS = "success"
    FAILED = "failed"
    CANCELED = "canceled"
    SKIPPED = "skipped"


#: Statuses from which a job never moves again.
TERMINAL_STATUSES = frozenset(
    {JobStatus.SUCCESS, JobStatus.FAILED, JobStatus.CANCELED, JobStatus.SKIPPED}
)
#: Statuses that carry a pass/fail outcome; all ratio denominators use these.
COMPLETED_STATUSES = frozenset({JobStatus.SUCCESS, JobStatus.FAILED})


def is_terminal(status: JobStatus) -> bool:
    return status in TERMINAL_STATUSES


def is_completed(status: JobStatus) -> bool:
    return status in COMPLETED_STATUSES


def status_precedence(status: JobStatus) -> int:
    """Update precedence: non-terminal < terminal."""
    return 1 if status in TERMINAL_STATUSES else 0


class MetricInterval(str, Enum):
    HOURLY = "hourly"
    DAILY = "daily"
    WEEKLY = "weekly"
    MONTHLY = "monthly"
    YEARLY = "yearly"


class ModelKind(str, Enum):
    DURATION = "duration"
    FAILURE = "failure"
    FLAKY = "flaky"


class EventSource(str, Enum):
    WEBHOOK = "webhook"
    BACKFILL = "backfill"
    SCHEDULED_REFRESH = "scheduled_refresh"


class Comparator(str, Enum):
    GT = ">"
    LT = "<"
    GE = ">="
    LE = "<="

    def holds(self, value: float, threshold: float) -> bool:
        if self is Comparator.GT:
            return value > threshold
        if self is Comparator.LT:
            return value < threshold
        if self is Comparator.GE:
            return value >= threshold
        return value <= threshold


class ActionKind(str, Enum):
    ENABLE_CACHE = "enable_cache"
    RETRY_JOB = "retry_job"
    SET_CI_VARIABLE = "set_ci_variable"
    OPEN_ADVISORY = "open_advisory"


class ActionStatus(str, Enum):
    PROPOSED = "proposed"
    APPROVED = "approved"
    APPLIED = "applied"
    REJECTED = "rejected"
    FAILED = "failed"


#: Legal action state-machine transitions.
ACTION_TRANSITIONS = {
    ActionStatus.PROPOSED: {ActionStatus.APPROVED, ActionStatus.REJECTED},
    ActionStatus.APPROVED: {ActionStatus.APPLIED, ActionStatus.FAILED},
    ActionStatus.APPLIED: set(),
    ActionStatus.REJECTED: set(),
    ActionStatus.FAILED: set(),
}

#: Metric names as they appear in snapshots, alert rules and reports.
METRIC_NAMES = (
    "executions_frequency",
    "mean_duration",
    "failure_ratio",
    "flaky_failure_ratio",
)
RATIO_METRICS = frozenset({"failure_ratio", "flaky_failure_ratio"})


def utc_ms(dt: datetime) -> datetime:
    """Normalize a timestamp to UTC at millisecond precision.

    Naive datetimes are taken to already be UTC.
    """
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=UTC)
    else:
        dt = dt.astimezone(UTC)
    return dt.replace(microsecond=(dt.microsecond // 1000) * 1000)


def encode_ts(dt: datetime) -> str:
    dt = utc_ms(dt)
    return f"{dt:%Y-%m-%dT%H:%M:%S}.{dt.microsecond // 1000:03d}Z"


def decode_ts(raw: str) -> datetime:
    """Parse an RFC 3339 timestamp ('Z' or explicit offset) to UTC."""
    text = raw.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    return utc_ms(datetime.fromisoformat(text))


def new_id() -> str:
    return uuid.uuid4().hex


def _opt_ts(dt: Optional[datetime]) -> Optional[str]:
    return None if dt is None else encode_ts(dt)


def _opt_decode_ts(raw: Optional[str]) -> Optional[datetime]:
    return None if raw is None else decode_ts(raw)


@dataclass(frozen=True)
class Project:
    project_id: int
    path: str
    default_ref: str = "main"

    def to_dict(self) -> dict[str, Any]:
        return {
            "project_id": self.project_id,
            "path": self.path,
            "default_ref": self.default_ref,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Project":
        return cls(
            project_id=int(d["project_id"]),
            path=str(d["path"]),
            default_ref=str(d.get("default_ref", "main")),
        )


@dataclass(frozen=True)
class BuildJob:
    """One CI job execution; the twin's atomic fact."""

    job_id: int
    project_id: int
    pipeline_id: int
    name: str
    ref: str
    commit_sha: str
    status: JobStatus
    created_at: datetime
    started_at: Optional[datetime] = None
    finished_at: Optional[datetime] = None
    queued_duration: Optional[float] = None
    duration: Optional[float] = None
    runner_id: Optional[int] = None
    flaky: Optional[bool] = None
    features: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "status", JobStatus(self.status))
        object.__setattr__(self, "created_at", utc_ms(self.created_at))
        if self.started_at is not None:
            object.__setattr__(self, "started_at", utc_ms(self.started_at))
        if self.finished_at is not None:
            object.__setattr__(self, "finished_at", utc_ms(self.finished_at))

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "job_id": self.job_id,
            "project_id": self.project_id,
            "pipeline_id": self.pipeline_id,
            "name": self.name,
            "ref": self.ref,
            "commit_sha": self.commit_sha,
            "status": self.status.value,
            "created_at": encode_ts(self.created_at),
            "started_at": _opt_ts(self.started_at),
            "finished_at": _opt_ts(self.finished_at),
            "queued_duration": self.queued_duration,
            "duration": self.duration,
            "runner_id": self.runner_id,
            "flaky": self.flaky,
            "features": dict(self.features),
        }
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "BuildJob":
        return cls(
            job_id=int(d["job_id"]),
            project_id=int(d["project_id"]),
            pipeline_id=int(d["pipeline_id"]),
            name=str(d["name"]),
            ref=str(d["ref"]),
            commit_sha=str(d["commit_sha"]),
            status=JobStatus(d["status"]),
            created_at=decode_ts(d["created_at"]),
            started_at=_opt_decode_ts(d.get("started_at")),
            finished_at=_opt_decode_ts(d.get("finished_at")),
            queued_duration=d.get("queued_duration"),
            duration=d.get("duration"),
            runner_id=d.get("runner_id"),
            flaky=d.get("flaky"),
            features={k: float(v) for k, v in (d.get("features") or {}).items()},
        )

    def with_flaky(self, flaky: Optional[bool]) -> "BuildJob":
        return replace(self, flaky=flaky)

    @property
    def group_key(self) -> tuple[int, int, str]:
        """Retry-group identity: reruns share (project, pipeline, name)."""
        return (self.project_id, self.pipeline_id, self.name)


def validate_job(job: BuildJob) -> list[str]:
    """Return every violated invariant of ``job``; empty list means ok.

    Total function: never raises on any BuildJob instance.
    """
    violations: list[str] = []
    if job.started_at is not None and job.started_at < job.created_at:
        violations.append("started_at >= created_at")
    if (
        job.finished_at is not None
        and job.started_at is not None
        and job.finished_at < job.started_at
    ):
        violations.append("finished_at >= started_at")
    if job.finished_at is not None and not is_terminal(job.status):
        violations.append("finished_at present => status terminal")
    if job.queued_duration is not None and job.queued_duration < 0:
        violations.append("queued_duration >= 0")
    if job.duration is not None and job.duration < 0:
        violations.append("duration >= 0")
    if job.duration is not None and not is_completed(job.status):
        violations.append("duration present => status in {success, failed}")
    if job.flaky is True and job.status is not JobStatus.FAILED:
        violations.append("flaky => failed")
    for name, value in job.features.items():
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            violations.append(f"feature {name!r} must be numeric")
    return violations


def require_valid(jobs: Iterable[BuildJob]) -> None:
    """Raise ValidationError listing offending job_ids if any job is invalid."""
    offenders: dict[int, list[str]] = {}
    for job in jobs:
        violations = validate_job(job)
        if violations:
            offenders[job.job_id] = violations
    if offenders:
        raise ValidationError(
            "invalid build jobs",
            details={"job_ids": sorted(offenders), "violations": {str(k): v for k, v in offenders.items()}},
        )


Scope = Optional[tuple[int, ...]]


def normalize_scope(scope: Optional[Sequence[int]]) -> Scope:
    """Scope is either a sorted tuple of project ids or None meaning ALL."""
    if scope is None:
        return None
    return tuple(sorted(set(int(p) for p in scope)))


def scope_to_json(scope: Optional[tuple[int, ...]]) -> Any:
    return None if scope is None else list(scope)


def scope_from_json(raw: Any) -> Optional[tuple[int, ...]]:
    if raw is None or raw == "ALL":
        return None
    return normalize_scope(list(raw))


@dataclass(frozen=True)
class MetricSnapshot:
    """The four build performance metrics over one aligned window."""

    scope: Optional[tuple[int, ...]]
    window_start: datetime
    window_end: datetime
    interval: MetricInterval
    executions_frequency: int
    mean_duration: Optional[float]
    failure_ratio: Optional[float]
    flaky_failure_ratio: Optional[float]

    def __post_init__(self):
        object.__setattr__(self, "window_start", utc_ms(self.window_start))
        object.__setattr__(self, "window_end", utc_ms(self.window_end))

    def metric(self, name: str) -> Optional[float]:
        if name not in METRIC_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def to_dict(self) -> dict[str, Any]:
        return {
            "scope": scope_to_json(self.scope),
            "window_start": encode_ts(self.window_start),
            "window_end": encode_ts(self.window_end),
            "interval": self.interval.value,
            "executions_frequency": self.executions_frequency,
            "mean_duration": self.mean_duration,
            "failure_ratio": self.failure_ratio,
            "flaky_failure_ratio": self.flaky_failure_ratio,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MetricSnapshot":
        return cls(
            scope=scope_from_json(d.get("scope")),
            window_start=decode_ts(d["window_start"]),
            window_end=decode_ts(d["window_end"]),
            interval=MetricInterval(d["interval"]),
            executions_frequency=int(d["executions_frequency"]),
            mean_duration=d.get("mean_duration"),
            failure_ratio=d.get("failure_ratio"),
            flaky_failure_ratio=d.get("flaky_failure_ratio"),
        )


@dataclass(frozen=True)
class ModelSnapshot:
    """Immutable view of model parameters at a trained-count boundary."""

    model_snapshot_id: str
    model_kind: ModelKind
    scope: str
    parameters: Mapping[str, Any]
    trained_on_count: int
    created_at: datetime

    def __post_init__(self):
        object.__setattr__(self, "model_kind", ModelKind(self.model_kind))
        object.__setattr__(self, "created_at", utc_ms(self.created_at))
        object.__setattr__(self, "parameters", dict(self.parameters))

    def to_dict(self) -> dict[str, Any]:
        return {
            "model_snapshot_id": self.model_snapshot_id,
            "model_kind": self.model_kind.value,
            "scope": self.scope,
            "parameters": dict(self.parameters),
            "trained_on_count": self.trained_on_count,
            "created_at": encode_ts(self.created_at),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelSnapshot":
        return cls(
            model_snapshot_id=str(d["model_snapshot_id"]),
            model_kind=ModelKind(d["model_kind"]),
            scope=str(d["scope"]),
            parameters=d.get("parameters", {}),
            trained_on_count=int(d["trained_on_count"]),
            created_at=decode_ts(d["created_at"]),
        )


@dataclass(frozen=True)
class PredictionRecord:
    """Model output paired (later) with the actual outcome."""

    prediction_id: str
    job_id: int
    model_kind: ModelKind
    predicted_value: float
    predicted_at: datetime
    model_snapshot_id: Optional[str] = None
    actual_value: Optional[float] = None
    anomaly: Optional[bool] = None
    anomaly_score: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "model_kind", ModelKind(self.model_kind))
        object.__setattr__(self, "predicted_at", utc_ms(self.predicted_at))

    def to_dict(self) -> dict[str, Any]:
        return {
            "prediction_id": self.prediction_id,
            "job_id": self.job_id,
            "model_kind": self.model_kind.value,
            "predicted_value": self.predicted_value,
            "predicted_at": encode_ts(self.predicted_at),
            "model_snapshot_id": self.model_snapshot_id,
            "actual_value": self.actual_value,
            "anomaly": self.anomaly,
            "anomaly_score": self.anomaly_score,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PredictionRecord":
        return cls(
            prediction_id=str(d["prediction_id"]),
            job_id=int(d["job_id"]),
            model_kind=ModelKind(d["model_kind"]),
            predicted_value=float(d["predicted_value"]),
            predicted_at=decode_ts(d["predicted_at"]),
            model_snapshot_id=d.get("model_snapshot_id"),
            actual_value=d.get("actual_value"),
            anomaly=d.get("anomaly"),
            anomaly_score=d.get("anomaly_score"),
        )


@dataclass(frozen=True)
class DataIntegratedEvent:
    """Bus message announcing newly integrated job ids to subscribers."""

    event_id: str
    emitted_at: datetime
    job_ids: tuple[int, ...]
    source: EventSource

    def __post_init__(self):
        object.__setattr__(self, "emitted_at", utc_ms(self.emitted_at))
        object.__setattr__(self, "job_ids", tuple(int(j) for j in self.job_ids))
        object.__setattr__(self, "source", EventSource(self.source))
        if not self.job_ids:
            raise ValidationError("DataIntegratedEvent.job_ids must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {
            "event_id": self.event_id,
            "emitted_at": encode_ts(self.emitted_at),
            "job_ids": list(self.job_ids),
            "source": self.source.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DataIntegratedEvent":
        return cls(
            event_id=str(d["event_id"]),
            emitted_at=decode_ts(d["emitted_at"]),
            job_ids=tuple(d["job_ids"]),
            source=EventSource(d["source"]),
        )


@dataclass(frozen=True)
class AlertRule:
    rule_id: str
    metric: str
    scope: Optional[tuple[int, ...]]
    interval: MetricInterval
    comparator: Comparator
    threshold: float
    sink: str = "log"
    webhook_url: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "interval", MetricInterval(self.interval))
        object.__setattr__(self, "comparator", Comparator(self.comparator))
        if self.metric not in METRIC_NAMES:
            raise ValidationError(f"unknown metric {self.metric!r}")
        if self.threshold < 0:
            raise ValidationError("threshold >= 0")
        if self.metric in RATIO_METRICS and self.threshold > 1:
            raise ValidationError("ratio-metric thresholds <= 1")
        if self.sink not in ("log", "webhook"):
            raise ValidationError("sink must be 'log' or 'webhook'")
        if self.sink == "webhook" and not self.webhook_url:
            raise ValidationError("webhook sink requires webhook_url")

    def to_dict(self) -> dict[str, Any]:
        return {
            "rule_id": self.rule_id,
            "metric": self.metric,
            "scope": scope_to_json(self.scope),
            "interval": self.interval.value,
            "comparator": self.comparator.value,
            "threshold": self.threshold,
            "sink": self.sink,
            "webhook_url": self.webhook_url,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "AlertRule":
        return cls(
            rule_id=str(d["rule_id"]),
            metric=str(d["metric"]),
            scope=scope_from_json(d.get("scope")),
            interval=MetricInterval(d["interval"]),
            comparator=Comparator(d["comparator"]),
            threshold=float(d["threshold"]),
            sink=str(d.get("sink", "log")),
            webhook_url=d.get("webhook_url"),
        )


@dataclass(frozen=True)
class AlertFiring:
    rule_id: str
    snapshot: MetricSnapshot
    fired_at: datetime

    def __post_init__(self):
        object.__setattr__(self, "fired_at", utc_ms(self.fired_at))

    def to_dict(self) -> dict[str, Any]:
        return {
            "rule_id": self.rule_id,
            "snapshot": self.snapshot.to_dict(),
            "fired_at": encode_ts(self.fired_at),
        }


@dataclass(frozen=True)
class FeatureDelta:
    """Additive delta or absolute override of one named feature."""

    op: str  # "add" | "set"
    value: float

    def __post_init__(self):
        if self.op not in ("add", "set"):
            raise ValidationError(f"feature delta op must be 'add' or 'set', got {self.op!r}")

    def apply(self, current: float) -> float:
        return current + self.value if self.op == "add" else self.value

    def to_dict(self) -> dict[str, Any]:
        return {"op": self.op, "value": self.value}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FeatureDelta":
        return cls(op=str(d["op"]), value=float(d["value"]))


@dataclass(frozen=True)
class JobSampleSpec:
    """Scope plus trailing window length (count of recent terminal jobs)."""

    scope: Optional[tuple[int, ...]] = None
    last_n: int = 200

    def __post_init__(self):
        if self.last_n < 1:
            raise ValidationError("job sample spec must select >= 1 job")

    def to_dict(self) -> dict[str, Any]:
        return {"scope": scope_to_json(self.scope), "last_n": self.last_n}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "JobSampleSpec":
        return cls(scope=scope_from_json(d.get("scope")), last_n=int(d.get("last_n", 200)))


@dataclass(frozen=True)
class Scenario:
    """A named set of feature deltas evaluated against model replicas."""

    scenario_id: str
    label: str
    feature_deltas: dict[str, FeatureDelta] = field(default_factory=dict)
    job_sample_spec: JobSampleSpec = field(default_factory=JobSampleSpec)

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario_id": self.scenario_id,
            "label": self.label,
            "feature_deltas": {k: v.to_dict() for k, v in self.feature_deltas.items()},
            "job_sample_spec": self.job_sample_spec.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Scenario":
        return cls(
            scenario_id=str(d.get("scenario_id") or new_id()),
            label=str(d["label"]),
            feature_deltas={
                k: FeatureDelta.from_dict(v)
                for k, v in (d.get("feature_deltas") or {}).items()
            },
            job_sample_spec=JobSampleSpec.from_dict(d.get("job_sample_spec") or {}),
        )


@dataclass(frozen=True)
class SensitivityEntry:
    baseline_value: float
    scenario_value: float
    delta: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "baseline_value": self.baseline_value,
            "scenario_value": self.scenario_value,
            "delta": self.delta,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SensitivityEntry":
        return cls(
            baseline_value=float(d["baseline_value"]),
            scenario_value=float(d["scenario_value"]),
            delta=float(d["delta"]),
        )


@dataclass(frozen=True)
class SensitivityReport:
    scenario_id: str
    model_snapshot_ids: dict[str, str]
    entries: dict[str, SensitivityEntry]
    sample_size: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario_id": self.scenario_id,
            "model_snapshot_ids": dict(self.model_snapshot_ids),
            "entries": {k: v.to_dict() for k, v in self.entries.items()},
            "sample_size": self.sample_size,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SensitivityReport":
        return cls(
            scenario_id=str(d["scenario_id"]),
            model_snapshot_ids=dict(d["model_snapshot_ids"]),
            entries={k: SensitivityEntry.from_dict(v) for k, v in d["entries"].items()},
            sample_size=int(d["sample_size"]),
        )


@dataclass(frozen=True)
class ActionTarget:
    project_id: int
    job_id: Optional[int] = None

    def to_dict(self) -> dict[str, Any]:
        return {"project_id": self.project_id, "job_id": self.job_id}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ActionTarget":
        return cls(project_id=int(d["project_id"]), job_id=d.get("job_id"))


@dataclass(frozen=True)
class ImprovementAction:
    action_id: str
    kind: ActionKind
    target: ActionTarget
    payload: dict[str, str] = field(default_factory=dict)
    status: ActionStatus = ActionStatus.PROPOSED
    created_at: datetime = field(default_factory=lambda: datetime.now(UTC))
    error: Optional[str] = None
    apply_result: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ActionKind(self.kind))
        object.__setattr__(self, "status", ActionStatus(self.status))
        object.__setattr__(self, "created_at", utc_ms(self.created_at))

    def transition(self, new_status: ActionStatus, **changes: Any) -> "ImprovementAction":
        """Return the action in ``new_status``; raises on an illegal move."""
        from .errors import IllegalTransition

        if new_status not in ACTION_TRANSITIONS[self.status]:
            raise IllegalTransition(
                f"cannot move action from {self.status.value} to {new_status.value}",
                details={"action_id": self.action_id},
            )
        return replace(self, status=new_status, **changes)

    def to_dict(self) -> dict[str, Any]:
        return {
            "action_id": self.action_id,
            "kind": self.kind.value,
            "target": self.target.to_dict(),
            "payload": dict(self.payload),
            "status": self.status.value,
            "created_at": encode_ts(self.created_at),
            "error": self.error,
            "apply_result": self.apply_result,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ImprovementAction":
        return cls(
            action_id=str(d["action_id"]),
            kind=ActionKind(d["kind"]),
            target=ActionTarget.from_dict(d["target"]),
            payload={k: str(v) for k, v in (d.get("payload") or {}).items()},
            status=ActionStatus(d.get("status", "proposed")),
            created_at=decode_ts(d["created_at"]),
            error=d.get("error"),
            apply_result=d.get("apply_result"),
        )


def to_json(obj: Any) -> str:
    """Canonical JSON text for any core type exposing to_dict()."""
    return json.dumps(obj.to_dict(), sort_keys=True, separators=(",", ":"))
