"""Scenario sensitivity analysis over frozen model snapshots.

Scenarios adjust features on a sample of recent jobs and report how the
model outputs move. Evaluation reads snapshot parameters directly (a
replica of the learner, not the learner itself), so it cannot mutate
model state and an identity scenario yields exactly zero deltas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import EmptySample, InvalidQuery, UnknownFeature
from .features import FEATURE_NAMES, compute_features, vector
from .learning import sigmoid
from .model import (
    TERMINAL_STATUSES,
    ModelKind,
    ModelSnapshot,
    Scenario,
    SensitivityEntry,
    SensitivityReport,
)
from .models import SHARED_SCOPE, ModelHub, project_scope
from .store import JobQuery, Store

ENTRY_KINDS: dict[str, ModelKind] = {
    "failure_probability": ModelKind.FAILURE,
    "flaky_probability": ModelKind.FLAKY,
    "expected_duration": ModelKind.DURATION,
}
DIRECTIONS = ("minimize", "maximize")


def snapshot_output(snapshot: ModelSnapshot, x: np.ndarray) -> float:
    """Model output from frozen parameters, never the live learner."""
    params = snapshot.parameters
    if snapshot.model_kind is ModelKind.DURATION:
        return float(math.exp(params["mu"]))
    coef = np.asarray(params["coef"], dtype=float)
    return float(sigmoid(float(x @ coef) + params["intercept"]))


@dataclass(frozen=True)
class RankedScenario:
    rank: int
    scenario: Scenario
    report: SensitivityReport

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "scenario_id": self.scenario.scenario_id,
            "label": self.scenario.label,
            "report": self.report.to_dict(),
        }


class WhatIfService:
    def __init__(self, store: Store, hub: ModelHub):
        self._store = store
        self._hub = hub

    def _sample(self, scenario: Scenario):
        spec = scenario.job_sample_spec
        jobs = self._store.query_jobs(
            JobQuery(
                project_ids=spec.scope,
                statuses=tuple(TERMINAL_STATUSES),
                order_by="created_at",
                descending=True,
                limit=spec.last_n,
            )
        )
        if not jobs:
            raise EmptySample("no terminal jobs in the sampled scope")
        return jobs

    def _snapshot(self, kind: ModelKind, scope: Optional[tuple[int, ...]]):
        if scope is not None and len(scope) == 1:
            snap = self._hub.current_snapshot(kind, project_scope(scope[0]))
            if snap is not None:
                return snap
        return self._hub.current_snapshot(kind, SHARED_SCOPE)

    def evaluate(self, scenario: Scenario) -> SensitivityReport:
        """Mean model outputs over the sample, before and after deltas."""
        unknown = sorted(set(scenario.feature_deltas) - set(FEATURE_NAMES))
        if unknown:
            raise UnknownFeature(f"unknown features: {', '.join(unknown)}")
        jobs = self._sample(scenario)
        baseline_vectors = []
        scenario_vectors = []
        for job in jobs:
            features = compute_features(self._store, job)
            baseline_vectors.append(vector(features))
            shifted = dict(features)
            for name, delta in scenario.feature_deltas.items():
                shifted[name] = delta.apply(shifted[name])
            scenario_vectors.append(vector(shifted))

        snapshot_ids: dict[str, str] = {}
        entries: dict[str, SensitivityEntry] = {}
        for entry_name, kind in ENTRY_KINDS.items():
            snap = self._snapshot(kind, scenario.job_sample_spec.scope)
            if snap is None:
                # Uninformed prior ignores features, so both sides agree.
                prior = (
                    self._hub.duration_prior()
                    if kind is ModelKind.DURATION
                    else 0.5
                )
                entries[entry_name] = SensitivityEntry(prior, prior, 0.0)
                continue
            snapshot_ids[kind.value] = snap.model_snapshot_id
            baseline = [snapshot_output(snap, x) for x in baseline_vectors]
            shifted = [snapshot_output(snap, x) for x in scenario_vectors]
            base_mean = float(np.mean(baseline))
            scen_mean = float(np.mean(shifted))
            entries[entry_name] = SensitivityEntry(
                baseline_value=base_mean,
                scenario_value=scen_mean,
                delta=scen_mean - base_mean,
            )
        return SensitivityReport(
            scenario_id=scenario.scenario_id,
            model_snapshot_ids=snapshot_ids,
            entries=entries,
            sample_size=len(jobs),
        )

    def compare(
        self,
        scenarios: list[Scenario],
        metric: str = "failure_probability",
        direction: str = "minimize",
    ) -> list[RankedScenario]:
        """Rank scenarios by metric delta; ties break on the label."""
        if metric not in ENTRY_KINDS:
            raise InvalidQuery(f"unknown metric {metric!r}")
        if direction not in DIRECTIONS:
            raise InvalidQuery(f"direction must be one of {DIRECTIONS}")
        if not scenarios:
            raise InvalidQuery("compare needs at least one scenario")
        sign = 1.0 if direction == "minimize" else -1.0
        scored = [(s, self.evaluate(s)) for s in scenarios]
        scored.sort(key=lambda sr: (sign * sr[1].entries[metric].delta, sr[0].label))
        return [
            RankedScenario(rank=i + 1, scenario=s, report=r)
            for i, (s, r) in enumerate(scored)
        ]
