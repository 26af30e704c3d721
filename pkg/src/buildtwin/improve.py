"""Improvement actions: proposal rules, approval flow, and apply.

Predictions and alert firings map to concrete proposals through a fixed
rule table. Every action passes the typed state machine (proposed ->
approved -> applied/failed), and apply reaches the build platform at
most once per action id via a ledger, regardless of crashes or races.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Optional

import numpy as np

from .bus import TOPIC_DATA_INTEGRATED, EventBus
from .errors import NotFound, WriterRejected
from .features import FEATURE_NAMES, compute_features, vector
from .model import (
    ActionKind,
    ActionStatus,
    ActionTarget,
    AlertFiring,
    AlertRule,
    BuildJob,
    DataIntegratedEvent,
    ImprovementAction,
    JobStatus,
    ModelKind,
    PredictionRecord,
    decode_ts,
    encode_ts,
    new_id,
)
from .models import SHARED_SCOPE, ModelHub, project_scope
from .adapters.base import ActualTwinWriter
from .store import Store

log = logging.getLogger(__name__)

CACHE_FILE_PATH = ".cbdt/cache.yml"
ADVISORY_DIR = ".cbdt/advisories"
COOLDOWN_PREFIX = "improve.cooldown."

CACHE_FILE_CONTENT = """\
# Opt-in build cache fragment; include from the project CI config.
cache:
  key: default
  paths:
    - .cache/
"""


@dataclass(frozen=True)
class ImproveConfig:
    long_build_seconds: float = 600.0
    failure_probability_threshold: float = 0.8
    flaky_probability_threshold: float = 0.5
    cooldown_seconds: float = 3600.0
    auto_approve: frozenset = field(default_factory=frozenset)


class ImprovementEngine:
    """Turns model output into reviewable platform changes."""

    def __init__(
        self,
        store: Store,
        hub: ModelHub,
        writer: Optional[ActualTwinWriter] = None,
        config: Optional[ImproveConfig] = None,
        clock: Optional[Callable[[], datetime]] = None,
    ):
        self._store = store
        self._hub = hub
        self._writer = writer
        self._cfg = config or ImproveConfig()
        self._clock = clock or (lambda: datetime.now(timezone.utc))

    # -- proposal rules ---------------------------------------------------
    def subscribe(self, bus: EventBus) -> None:
        bus.subscribe("improve", [TOPIC_DATA_INTEGRATED], self.on_data_integrated)

    def on_data_integrated(self, topic: str, payload: str, seq: int) -> None:
        event = DataIntegratedEvent.from_dict(json.loads(payload))
        if not self._store.mark_event_processed("improve", event.event_id):
            return
        for job_id in event.job_ids:
            try:
                job = self._store.get_job(job_id)
            except NotFound:
                continue
            try:
                for kind in ModelKind:
                    hits = self._store.query_predictions(
                        job_id=job_id, model_kind=kind, limit=1
                    )
                    if hits:
                        self.propose(hits[0], job=job)
            except Exception:
                log.exception("proposal pass failed for job %s", job_id)

    def on_alert(self, firing: AlertFiring, rule: AlertRule) -> None:
        try:
            self.propose(firing)
        except Exception:
            log.exception("proposal pass failed for alert %s", firing.rule_id)

    def propose(
        self,
        trigger: "PredictionRecord | AlertFiring",
        job: Optional[BuildJob] = None,
    ) -> list[ImprovementAction]:
        if isinstance(trigger, AlertFiring):
            return self._propose_for_alert(trigger)
        return self._propose_for_prediction(trigger, job)

    def _propose_for_prediction(
        self, record: PredictionRecord, job: Optional[BuildJob]
    ) -> list[ImprovementAction]:
        if job is None:
            try:
                job = self._store.get_job(record.job_id)
            except NotFound:
                return []
        out = []
        if (
            record.model_kind is ModelKind.DURATION
            and record.predicted_value > self._cfg.long_build_seconds
        ):
            out += self._emit(
                ActionKind.ENABLE_CACHE,
                ActionTarget(project_id=job.project_id),
                {
                    "path": CACHE_FILE_PATH,
                    "content": CACHE_FILE_CONTENT,
                    "message": "Enable CI build cache",
                    "predicted_duration": f"{record.predicted_value:.1f}",
                },
            )
        if (
            record.model_kind is ModelKind.FAILURE
            and record.predicted_value > self._cfg.failure_probability_threshold
        ):
            out += self._emit(
                ActionKind.OPEN_ADVISORY,
                ActionTarget(project_id=job.project_id),
                self._advisory_payload(job, record),
            )
        if (
            record.model_kind is ModelKind.FLAKY
            and job.status is JobStatus.FAILED
            and record.predicted_value > self._cfg.flaky_probability_threshold
        ):
            out += self._emit(
                ActionKind.RETRY_JOB,
                ActionTarget(project_id=job.project_id, job_id=job.job_id),
                {
                    "job_id": str(job.job_id),
                    "flaky_probability": f"{record.predicted_value:.3f}",
                },
            )
        return out

    def _propose_for_alert(self, firing: AlertFiring) -> list[ImprovementAction]:
        snap = firing.snapshot
        if snap.scope is None:
            log.info("alert %s has no project scope; skipping", firing.rule_id)
            return []
        try:
            metric = next(
                r.metric
                for r in self._store.list_rules()
                if r.rule_id == firing.rule_id
            )
        except StopIteration:
            return []
        out = []
        for project_id in snap.scope:
            if metric == "mean_duration":
                out += self._emit(
                    ActionKind.ENABLE_CACHE,
                    ActionTarget(project_id=project_id),
                    {
                        "path": CACHE_FILE_PATH,
                        "content": CACHE_FILE_CONTENT,
                        "message": "Enable CI build cache",
                        "window_mean_duration": f"{snap.mean_duration:.1f}",
                    },
                )
            elif metric in ("failure_ratio", "flaky_failure_ratio"):
                out += self._emit(
                    ActionKind.OPEN_ADVISORY,
                    ActionTarget(project_id=project_id),
                    self._alert_advisory_payload(firing, project_id),
                )
        return out

    def _advisory_payload(
        self, job: BuildJob, record: PredictionRecord
    ) -> dict[str, str]:
        features = compute_features(self._store, job)
        top = self._top_features(job.project_id, features)
        lines = [
            f"Predicted failure probability {record.predicted_value:.2f} "
            f"for job {job.name!r} (job {job.job_id}).",
            "",
            "Highest-weighted features:",
        ]
        lines += [f"- {name}: {value:+.4f}" for name, value in top]
        return {
            "path": f"{ADVISORY_DIR}/job-{job.job_id}.md",
            "content": "\n".join(lines) + "\n",
            "message": f"Failure-risk advisory for job {job.job_id}",
            "features": ",".join(name for name, _ in top),
        }

    def _alert_advisory_payload(
        self, firing: AlertFiring, project_id: int
    ) -> dict[str, str]:
        snap = firing.snapshot
        top = self._top_features(project_id, None)
        lines = [
            f"Alert {firing.rule_id} fired on window "
            f"{encode_ts(snap.window_start)}.",
            f"failure_ratio={snap.failure_ratio} "
            f"flaky_failure_ratio={snap.flaky_failure_ratio}",
            "",
            "Highest-weighted failure-model features:",
        ]
        lines += [f"- {name}: {value:+.4f}" for name, value in top]
        return {
            "path": f"{ADVISORY_DIR}/alert-{firing.rule_id}.md",
            "content": "\n".join(lines) + "\n",
            "message": f"Advisory for alert {firing.rule_id}",
            "features": ",".join(name for name, _ in top),
        }

    def _top_features(
        self, project_id: int, features: Optional[dict]
    ) -> list[tuple[str, float]]:
        """Top-3 failure-model contributions, |w_i * x_i| (or |w_i|)."""
        snap = self._hub.current_snapshot(
            ModelKind.FAILURE, project_scope(project_id)
        ) or self._hub.current_snapshot(ModelKind.FAILURE, SHARED_SCOPE)
        if snap is None or not snap.parameters.get("coef"):
            return []
        coef = np.asarray(snap.parameters["coef"], dtype=float)
        x = vector(features) if features is not None else np.ones_like(coef)
        weighted = coef * x
        order = np.argsort(-np.abs(weighted))[:3]
        return [(FEATURE_NAMES[i], float(weighted[i])) for i in order]

    def _emit(
        self, kind: ActionKind, target: ActionTarget, payload: dict[str, str]
    ) -> list[ImprovementAction]:
        now = self._clock()
        cooldown_key = (
            f"{COOLDOWN_PREFIX}{kind.value}.{target.project_id}:"
            f"{target.job_id if target.job_id is not None else '-'}"
        )
        last = self._store.get_kv(cooldown_key)
        if last is not None:
            elapsed = (now - decode_ts(last)).total_seconds()
            if elapsed < self._cfg.cooldown_seconds:
                return []
        action = ImprovementAction(
            action_id=new_id(),
            kind=kind,
            target=target,
            payload=payload,
            status=ActionStatus.PROPOSED,
            created_at=now,
        )
        self._store.put_action(action)
        self._store.set_kv(cooldown_key, encode_ts(now))
        log.info("proposed %s for project %s", kind.value, target.project_id)
        if kind in self._cfg.auto_approve:
            action = self.approve(action.action_id)
        return [action]

    # -- lifecycle ----------------------------------------------------------
    def approve(self, action_id: str) -> ImprovementAction:
        action = self._store.get_action(action_id).transition(ActionStatus.APPROVED)
        self._store.put_action(action)
        return action

    def reject(self, action_id: str) -> ImprovementAction:
        action = self._store.get_action(action_id).transition(ActionStatus.REJECTED)
        self._store.put_action(action)
        return action

    def apply(
        self, action_id: str, writer: Optional[ActualTwinWriter] = None
    ) -> ImprovementAction:
        """Apply an approved action through the writer, exactly once.

        The apply ledger is burned before the writer call, so a crashed
        or concurrent second apply can never reach the platform twice.
        """
        writer = writer or self._writer
        if writer is None:
            raise WriterRejected("no writer configured")
        action = self._store.get_action(action_id)
        # Raises IllegalTransition unless currently approved.
        action.transition(ActionStatus.APPLIED)
        if not self._store.mark_event_processed("improve.apply", action_id):
            return action
        try:
            result = self._dispatch(writer, action)
        except WriterRejected as exc:
            failed = action.transition(ActionStatus.FAILED, error=str(exc))
            self._store.put_action(failed)
            return failed
        applied = action.transition(ActionStatus.APPLIED, apply_result=result)
        self._store.put_action(applied)
        return applied

    def _dispatch(self, writer: ActualTwinWriter, action: ImprovementAction) -> str:
        project_id = action.target.project_id
        if action.kind is ActionKind.RETRY_JOB:
            return writer.retry_job(project_id, int(action.payload["job_id"]))
        return writer.upsert_file(
            project_id,
            action.payload["path"],
            action.payload["content"],
            action.payload["message"],
        )
