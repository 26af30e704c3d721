"""Scenario evaluation: zero-delta identity, purity, ranking."""

import math
from datetime import timedelta

import numpy as np
import pytest

from buildtwin.errors import EmptySample, InvalidQuery, UnknownFeature
from buildtwin.features import compute_features
from buildtwin.learning import sigmoid
from buildtwin.model import (
    FeatureDelta,
    JobSampleSpec,
    JobStatus,
    ModelKind,
    ModelSnapshot,
    Scenario,
)
from buildtwin.models import SHARED_SCOPE, ModelHub
from buildtwin.store import MemoryStore
from buildtwin.whatif import ENTRY_KINDS, RankedScenario, WhatIfService, snapshot_output

from conftest import T0, make_job


def scenario(deltas=None, scope=None, label="s", sid="sc-1", last_n=50):
    return Scenario(
        scenario_id=sid,
        label=label,
        feature_deltas=deltas or {},
        job_sample_spec=JobSampleSpec(scope=scope, last_n=last_n),
    )


def seeded(store, hub, n=30):
    """Store n terminal jobs and train all three kinds on them."""
    for i in range(1, n + 1):
        status = JobStatus.FAILED if i % 3 == 0 else JobStatus.SUCCESS
        job = make_job(
            i, status=status, flaky=(i % 6 == 0) if status is JobStatus.FAILED else None,
            created_at=T0 + timedelta(minutes=i),
            duration=100.0 + 10.0 * (i % 7),
        )
        store.upsert_job(job)
        hub.observe(job, compute_features(store, job))


def make_world():
    store = MemoryStore()
    hub = ModelHub(store, clock=lambda: T0)
    return store, hub, WhatIfService(store, hub)


# -- snapshot_output is a pure replica -----------------------------------------


def test_snapshot_output_replicates_classifier():
    snap = ModelSnapshot(
        model_snapshot_id="failure:shared:3",
        model_kind=ModelKind.FAILURE,
        scope=SHARED_SCOPE,
        parameters={"coef": [0.5, -1.0], "intercept": 0.25, "n_observed": 3},
        trained_on_count=3,
        created_at=T0,
    )
    x = np.array([2.0, 1.0])
    want = float(sigmoid(2.0 * 0.5 - 1.0 + 0.25))
    assert snapshot_output(snap, x) == want


def test_snapshot_output_replicates_duration_model():
    snap = ModelSnapshot(
        model_snapshot_id="duration:shared:5",
        model_kind=ModelKind.DURATION,
        scope=SHARED_SCOPE,
        parameters={"mu": math.log(180.0), "var": 0.1, "n_observed": 5},
        trained_on_count=5,
        created_at=T0,
    )
    assert snapshot_output(snap, np.zeros(7)) == pytest.approx(180.0)


# -- evaluate -------------------------------------------------------------------


def test_zero_delta_scenario_yields_exact_zeros_and_no_mutation():
    store, hub, service = make_world()
    seeded(store, hub)
    counts_before = {
        kind: hub.current_snapshot(kind, SHARED_SCOPE).trained_on_count
        for kind in ModelKind
    }
    predictions_before = len(store.query_predictions())

    report = service.evaluate(scenario())
    for entry in report.entries.values():
        assert entry.delta == 0.0
        assert entry.baseline_value == entry.scenario_value

    for kind in ModelKind:
        assert hub.current_snapshot(kind, SHARED_SCOPE).trained_on_count == counts_before[kind]
    assert len(store.query_predictions()) == predictions_before


def test_add_zero_is_also_identity():
    store, hub, service = make_world()
    seeded(store, hub)
    report = service.evaluate(
        scenario(deltas={"queued_duration": FeatureDelta(op="add", value=0.0)})
    )
    assert all(e.delta == 0.0 for e in report.entries.values())


def test_report_shape_and_snapshot_citations():
    store, hub, service = make_world()
    seeded(store, hub)
    report = service.evaluate(scenario(sid="sc-9"))
    assert report.scenario_id == "sc-9"
    assert set(report.entries) == set(ENTRY_KINDS)
    assert report.sample_size == 30
    assert set(report.model_snapshot_ids) == {"failure", "flaky", "duration"}
    for kind_value, snapshot_id in report.model_snapshot_ids.items():
        assert snapshot_id.startswith(f"{kind_value}:")


def test_untrained_world_reports_priors_with_zero_delta():
    store, hub, service = make_world()
    store.upsert_jobs([make_job(i, duration=240.0, created_at=T0 + timedelta(minutes=i))
                       for i in range(1, 4)])
    report = service.evaluate(
        scenario(deltas={"queued_duration": FeatureDelta(op="add", value=0.4)})
    )
    assert report.model_snapshot_ids == {}
    assert report.entries["failure_probability"].baseline_value == 0.5
    assert report.entries["expected_duration"].baseline_value == 240.0
    for entry in report.entries.values():
        assert entry.delta == 0.0


def test_duration_is_insensitive_to_features_by_design():
    store, hub, service = make_world()
    seeded(store, hub)
    report = service.evaluate(
        scenario(deltas={"queued_duration": FeatureDelta(op="add", value=0.5)})
    )
    assert report.entries["expected_duration"].delta == 0.0
    assert report.entries["failure_probability"].delta != 0.0


def test_delta_direction_follows_trained_weights():
    store, hub, service = make_world()
    # failures arrive exactly when queued_duration is high
    for i in range(1, 41):
        failed = i % 2 == 0
        job = make_job(
            i, status=JobStatus.FAILED if failed else JobStatus.SUCCESS,
            queued_duration=4000.0 if failed else 1.0,
            created_at=T0 + timedelta(minutes=i),
        )
        store.upsert_job(job)
        hub.observe(job, compute_features(store, job))

    up = service.evaluate(
        scenario(deltas={"queued_duration": FeatureDelta(op="add", value=0.5)})
    )
    down = service.evaluate(
        scenario(deltas={"queued_duration": FeatureDelta(op="set", value=0.0)})
    )
    assert up.entries["failure_probability"].delta > 0.0
    assert down.entries["failure_probability"].delta < 0.0


def test_evaluate_is_deterministic():
    store, hub, service = make_world()
    seeded(store, hub)
    s = scenario(deltas={"recent_failure_rate": FeatureDelta(op="set", value=0.9)})
    first = service.evaluate(s)
    second = service.evaluate(s)
    assert first.to_dict() == second.to_dict()


def test_sample_scope_and_limits():
    store, hub, service = make_world()
    seeded(store, hub)
    report = service.evaluate(scenario(last_n=5))
    assert report.sample_size == 5
    with pytest.raises(EmptySample):
        service.evaluate(scenario(scope=(404,)))


def test_unknown_feature_rejected():
    store, hub, service = make_world()
    seeded(store, hub)
    with pytest.raises(UnknownFeature):
        service.evaluate(scenario(deltas={"warp_factor": FeatureDelta(op="add", value=1.0)}))


def test_sample_ignores_running_jobs():
    store, hub, service = make_world()
    seeded(store, hub, n=3)
    store.upsert_job(make_job(99, status=JobStatus.RUNNING,
                              created_at=T0 + timedelta(hours=2)))
    report = service.evaluate(scenario())
    assert report.sample_size == 3


# -- compare -----------------------------------------------------------------------


def test_compare_ranks_by_delta_with_label_ties():
    store, hub, service = make_world()
    seeded(store, hub)
    scenarios = [
        scenario(deltas={"recent_failure_rate": FeatureDelta(op="set", value=1.0)},
                 label="high", sid="a"),
        scenario(label="nb", sid="c"),
        scenario(deltas={"recent_failure_rate": FeatureDelta(op="set", value=0.0)},
                 label="low", sid="b"),
        scenario(label="na", sid="d"),
    ]
    deltas = {
        s.label: service.evaluate(s).entries["failure_probability"].delta
        for s in scenarios
    }
    assert deltas["high"] != deltas["low"]  # the deltas actually separate

    ranked = service.compare(scenarios, metric="failure_probability",
                             direction="minimize")
    want = sorted(deltas, key=lambda label: (deltas[label], label))
    assert [r.scenario.label for r in ranked] == want
    assert [r.rank for r in ranked] == [1, 2, 3, 4]
    assert all(isinstance(r, RankedScenario) for r in ranked)
    # the two zero-delta scenarios tie and break on label
    na, nb = (want.index("na"), want.index("nb"))
    assert nb == na + 1

    flipped = service.compare(scenarios, metric="failure_probability",
                              direction="maximize")
    assert [r.scenario.label for r in flipped] == sorted(
        deltas, key=lambda label: (-deltas[label], label)
    )


def test_compare_validates_inputs():
    store, hub, service = make_world()
    seeded(store, hub, n=2)
    with pytest.raises(InvalidQuery):
        service.compare([scenario()], metric="happiness")
    with pytest.raises(InvalidQuery):
        service.compare([scenario()], direction="sideways")
    with pytest.raises(InvalidQuery):
        service.compare([])


def test_project_scope_prefers_project_snapshot():
    store, hub, service = make_world()
    seeded(store, hub)  # trains project:1 and shared
    report = service.evaluate(scenario(scope=(1,)))
    assert report.model_snapshot_ids["failure"].startswith("failure:project:1:")
    pooled = service.evaluate(scenario())
    assert pooled.model_snapshot_ids["failure"].startswith("failure:shared:")
