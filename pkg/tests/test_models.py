"""Model hub: scope fallback, snapshots, anomaly rules, event handling."""

import math
from datetime import timedelta

import pytest

from buildtwin.bus import EventBus
from buildtwin.errors import MissingActual
from buildtwin.features import FEATURE_NAMES
from buildtwin.models import (
    CLASSIFICATION_HIGH,
    CLASSIFICATION_LOW,
    SHARED_SCOPE,
    ModelHub,
    parse_snapshot_id,
    project_scope,
)
from buildtwin.model import (
    DataIntegratedEvent,
    EventSource,
    JobStatus,
    ModelKind,
    PredictionRecord,
    new_id,
    to_json,
)
from buildtwin.store import MemoryStore

from conftest import T0, make_job

FEATS = {name: 0.5 for name in FEATURE_NAMES}


def make_hub(store=None):
    store = store or MemoryStore()
    return store, ModelHub(store, clock=lambda: T0)


def event_payload(job_ids, event_id=None):
    return to_json(
        DataIntegratedEvent(
            event_id=event_id or new_id(),
            emitted_at=T0,
            job_ids=tuple(job_ids),
            source=EventSource.WEBHOOK,
        )
    )


def prediction(kind=ModelKind.DURATION, predicted=100.0, actual=None,
               snapshot_id=None, pid="p1"):
    return PredictionRecord(
        prediction_id=pid,
        job_id=1,
        model_kind=kind,
        predicted_value=predicted,
        predicted_at=T0,
        model_snapshot_id=snapshot_id,
        actual_value=actual,
    )


# -- priors and scope fallback ------------------------------------------------


def test_untrained_predictions_are_priors():
    store, hub = make_hub()
    job = make_job(1, status=JobStatus.RUNNING)
    failure = hub.predict(ModelKind.FAILURE, job, FEATS)
    assert failure.predicted_value == 0.5
    assert failure.model_snapshot_id is None
    duration = hub.predict(ModelKind.DURATION, job, FEATS)
    assert duration.predicted_value == 300.0


def test_duration_prior_uses_observed_mean():
    store, hub = make_hub()
    store.upsert_jobs([
        make_job(1, duration=100.0),
        make_job(2, duration=200.0, created_at=T0 + timedelta(minutes=1)),
    ])
    assert hub.duration_prior() == 150.0
    record = hub.predict(ModelKind.DURATION, make_job(9, status=JobStatus.RUNNING), FEATS)
    assert record.predicted_value == 150.0


def test_scope_falls_back_to_shared_then_project_wins():
    store, hub = make_hub()
    hub.update(ModelKind.FAILURE, SHARED_SCOPE, FEATS, 1.0)
    job = make_job(1, status=JobStatus.RUNNING)
    record = hub.predict(ModelKind.FAILURE, job, FEATS)
    assert record.model_snapshot_id == "failure:shared:1"

    hub.update(ModelKind.FAILURE, project_scope(1), FEATS, 1.0)
    record = hub.predict(ModelKind.FAILURE, job, FEATS)
    assert record.model_snapshot_id == "failure:project:1:1"


# -- snapshots -------------------------------------------------------------------


def test_snapshot_ids_parse_back():
    kind, scope, count = parse_snapshot_id("duration:project:12:34")
    assert (kind, scope, count) == (ModelKind.DURATION, "project:12", 34)
    kind, scope, count = parse_snapshot_id("flaky:shared:7")
    assert (kind, scope, count) == (ModelKind.FLAKY, "shared", 7)


def test_snapshots_are_immutable_and_cited():
    store, hub = make_hub()
    hub.update(ModelKind.DURATION, SHARED_SCOPE, FEATS, 100.0)
    first = hub.current_snapshot(ModelKind.DURATION, SHARED_SCOPE)
    assert first.trained_on_count == 1
    assert first.parameters["mu"] == math.log(100.0)
    frozen = dict(first.parameters)

    hub.update(ModelKind.DURATION, SHARED_SCOPE, FEATS, 900.0)
    second = hub.current_snapshot(ModelKind.DURATION, SHARED_SCOPE)
    assert second.model_snapshot_id != first.model_snapshot_id
    assert hub.get_snapshot(first.model_snapshot_id).parameters == frozen
    assert first.parameters == frozen


def test_snapshot_registry_reuses_same_object():
    _, hub = make_hub()
    hub.update(ModelKind.FAILURE, SHARED_SCOPE, FEATS, 0.0)
    assert hub.current_snapshot(ModelKind.FAILURE, SHARED_SCOPE) is hub.current_snapshot(
        ModelKind.FAILURE, SHARED_SCOPE
    )


def test_list_snapshots_covers_trained_scopes():
    _, hub = make_hub()
    hub.update(ModelKind.FAILURE, SHARED_SCOPE, FEATS, 1.0)
    hub.update(ModelKind.DURATION, project_scope(2), FEATS, 60.0)
    ids = [s.model_snapshot_id for s in hub.list_snapshots()]
    assert ids == ["duration:project:2:1", "failure:shared:1"]


def test_hub_restart_restores_learners_and_snapshots():
    store, hub = make_hub()
    for y in (1.0, 0.0, 1.0):
        hub.update(ModelKind.FAILURE, SHARED_SCOPE, FEATS, y)
    job = make_job(1, status=JobStatus.RUNNING)
    before = hub.predict(ModelKind.FAILURE, job, FEATS)

    revived = ModelHub(store, clock=lambda: T0)
    after = revived.predict(ModelKind.FAILURE, job, FEATS)
    assert after.predicted_value == before.predicted_value
    assert after.model_snapshot_id == before.model_snapshot_id
    # lazy rebuild: the snapshot is reconstructable from persisted state
    snap = revived.get_snapshot(before.model_snapshot_id)
    assert snap is not None
    assert snap.trained_on_count == 3
    assert [s.model_snapshot_id for s in revived.list_snapshots()] == [
        "failure:shared:3"
    ]


# -- training targets ----------------------------------------------------------


def test_observe_trains_applicable_kinds_once():
    store, hub = make_hub()
    job = make_job(1, status=JobStatus.FAILED, flaky=True)
    trained = hub.observe(job, FEATS)
    assert trained == [ModelKind.DURATION, ModelKind.FAILURE, ModelKind.FLAKY]
    # both scopes took the update
    assert hub.current_snapshot(ModelKind.FAILURE, project_scope(1)).trained_on_count == 1
    assert hub.current_snapshot(ModelKind.FAILURE, SHARED_SCOPE).trained_on_count == 1
    # the ledger blocks retraining on redelivery
    assert hub.observe(job, FEATS) == []


def test_success_job_does_not_train_flaky_model():
    _, hub = make_hub()
    trained = hub.observe(make_job(1, status=JobStatus.SUCCESS), FEATS)
    assert ModelKind.FLAKY not in trained
    assert hub.current_snapshot(ModelKind.FLAKY, SHARED_SCOPE) is None


def test_lone_failure_leaves_flaky_label_undecided():
    store, hub = make_hub()
    job = make_job(1, status=JobStatus.FAILED, flaky=False)
    store.upsert_job(job)
    assert hub.observe(job, FEATS) == [ModelKind.DURATION, ModelKind.FAILURE]
    assert hub.current_snapshot(ModelKind.FLAKY, SHARED_SCOPE) is None
    # a completed rerun decides the label; the next observation trains it
    store.upsert_job(
        make_job(2, status=JobStatus.FAILED, created_at=T0 + timedelta(seconds=60))
    )
    assert hub.observe(job, FEATS) == [ModelKind.FLAKY]


def test_canceled_job_trains_nothing():
    _, hub = make_hub()
    assert hub.observe(make_job(1, status=JobStatus.CANCELED), FEATS) == []


# -- anomaly rules ----------------------------------------------------------------


def test_duration_anomaly_uses_three_sigma_log_rule():
    _, hub = make_hub()
    # no snapshot cited: sigma falls back to sqrt(0.25) = 0.5
    calm = prediction(predicted=100.0, actual=100.0 * math.exp(1.4))
    anomalous, score = hub.detect_anomaly(calm)
    assert not anomalous
    assert score == pytest.approx(2.8)

    wild = prediction(predicted=100.0, actual=100.0 * math.exp(1.6))
    anomalous, score = hub.detect_anomaly(wild)
    assert anomalous
    assert score == pytest.approx(3.2)


def test_duration_sigma_comes_from_cited_snapshot():
    _, hub = make_hub()
    for d in (100.0, 260.0, 40.0, 310.0, 90.0):
        hub.update(ModelKind.DURATION, SHARED_SCOPE, FEATS, d)
    snap = hub.current_snapshot(ModelKind.DURATION, SHARED_SCOPE)
    sigma = math.sqrt(snap.parameters["var"])
    assert sigma != 0.5

    predicted = math.exp(snap.parameters["mu"])
    barely = prediction(predicted=predicted,
                        actual=predicted * math.exp(3.01 * sigma),
                        snapshot_id=snap.model_snapshot_id)
    anomalous, score = hub.detect_anomaly(barely)
    assert anomalous
    assert score == pytest.approx(3.01, rel=1e-6)


@pytest.mark.parametrize(
    "actual,p,expected",
    [
        (1.0, CLASSIFICATION_LOW - 0.01, True),
        (1.0, CLASSIFICATION_LOW + 0.01, False),
        (0.0, CLASSIFICATION_HIGH + 0.01, True),
        (0.0, CLASSIFICATION_HIGH - 0.01, False),
        (1.0, 0.5, False),
    ],
)
def test_classification_anomaly_rule(actual, p, expected):
    _, hub = make_hub()
    record = prediction(kind=ModelKind.FAILURE, predicted=p, actual=actual)
    anomalous, score = hub.detect_anomaly(record)
    assert anomalous is expected
    assert score == pytest.approx(abs(actual - p) / math.sqrt(p * (1 - p)))


def test_classification_score_is_finite_at_extremes():
    _, hub = make_hub()
    record = prediction(kind=ModelKind.FLAKY, predicted=0.0, actual=1.0)
    anomalous, score = hub.detect_anomaly(record)
    assert anomalous
    assert math.isfinite(score)


def test_detect_anomaly_requires_actual():
    _, hub = make_hub()
    with pytest.raises(MissingActual):
        hub.detect_anomaly(prediction(actual=None))


# -- event handling ---------------------------------------------------------------


def test_event_is_processed_once():
    store, hub = make_hub()
    store.upsert_job(make_job(1, status=JobStatus.FAILED))
    payload = event_payload([1], event_id="e1")
    hub.on_data_integrated("build-data.integrated", payload, 1)
    count = hub.current_snapshot(ModelKind.FAILURE, SHARED_SCOPE).trained_on_count
    hub.on_data_integrated("build-data.integrated", payload, 1)
    assert hub.current_snapshot(ModelKind.FAILURE, SHARED_SCOPE).trained_on_count == count


def test_unknown_job_in_event_is_skipped():
    store, hub = make_hub()
    store.upsert_job(make_job(2, status=JobStatus.FAILED))
    hub.on_data_integrated("build-data.integrated", event_payload([404, 2]), 1)
    assert hub.current_snapshot(ModelKind.FAILURE, SHARED_SCOPE).trained_on_count == 1


def test_running_job_gets_predictions_exactly_once():
    store, hub = make_hub()
    store.upsert_job(make_job(1, status=JobStatus.RUNNING))
    hub.on_data_integrated("build-data.integrated", event_payload([1]), 1)
    first = store.query_predictions(job_id=1)
    assert sorted(p.model_kind for p in first) == sorted(ModelKind)
    hub.on_data_integrated("build-data.integrated", event_payload([1]), 2)
    assert len(store.query_predictions(job_id=1)) == 3


def test_terminal_event_closes_predictions_then_trains():
    store, hub = make_hub()
    store.upsert_job(make_job(1, status=JobStatus.RUNNING))
    hub.on_data_integrated("build-data.integrated", event_payload([1]), 1)

    store.upsert_job(make_job(1, status=JobStatus.FAILED, flaky=True))
    hub.on_data_integrated("build-data.integrated", event_payload([1]), 2)

    by_kind = {p.model_kind: p for p in store.query_predictions(job_id=1)}
    assert by_kind[ModelKind.FAILURE].actual_value == 1.0
    assert by_kind[ModelKind.FLAKY].actual_value == 1.0
    assert by_kind[ModelKind.DURATION].actual_value == 300.0
    for record in by_kind.values():
        assert record.anomaly is not None
        assert record.anomaly_score is not None
    # anomaly evaluation happened against the pre-update (prior) model
    assert by_kind[ModelKind.FAILURE].anomaly is False
    assert hub.current_snapshot(ModelKind.FAILURE, SHARED_SCOPE).trained_on_count == 1

    # a later duplicate with a fresh event id still trains nothing new
    hub.on_data_integrated("build-data.integrated", event_payload([1]), 3)
    assert hub.current_snapshot(ModelKind.FAILURE, SHARED_SCOPE).trained_on_count == 1


def test_failed_rerun_settles_earlier_attempt():
    store, hub = make_hub()
    store.upsert_job(make_job(1, status=JobStatus.RUNNING))
    hub.on_data_integrated("build-data.integrated", event_payload([1]), 1)
    store.upsert_job(make_job(1, status=JobStatus.FAILED, flaky=False))
    hub.on_data_integrated("build-data.integrated", event_payload([1]), 2)
    # undecided until a rerun completes: prediction open, no training step
    flaky = store.query_predictions(job_id=1, model_kind=ModelKind.FLAKY)[0]
    assert flaky.actual_value is None
    assert hub.current_snapshot(ModelKind.FLAKY, SHARED_SCOPE) is None

    rerun = make_job(
        2, status=JobStatus.FAILED, flaky=False,
        created_at=T0 + timedelta(seconds=120),
    )
    store.upsert_job(rerun)
    hub.on_data_integrated("build-data.integrated", event_payload([2]), 3)
    flaky = store.query_predictions(job_id=1, model_kind=ModelKind.FLAKY)[0]
    assert flaky.actual_value == 0.0
    # only the first attempt is decided; the rerun itself awaits its own
    assert hub.current_snapshot(ModelKind.FLAKY, SHARED_SCOPE).trained_on_count == 1


def test_success_rerun_relabels_and_trains_flaky_positive():
    store, hub = make_hub()
    store.upsert_job(make_job(1, status=JobStatus.FAILED, flaky=False))
    hub.on_data_integrated("build-data.integrated", event_payload([1]), 1)
    assert hub.current_snapshot(ModelKind.FLAKY, SHARED_SCOPE) is None

    # intake relabels the failure when its rerun succeeds, then republishes it
    store.set_flaky(1, True)
    store.upsert_job(
        make_job(2, status=JobStatus.SUCCESS, created_at=T0 + timedelta(seconds=120))
    )
    hub.on_data_integrated("build-data.integrated", event_payload([2, 1]), 2)
    assert hub.current_snapshot(ModelKind.FLAKY, SHARED_SCOPE).trained_on_count == 1
    # the single observation was positive, so the estimate moved above prior
    record = hub.predict(
        ModelKind.FLAKY, make_job(3, status=JobStatus.RUNNING), FEATS
    )
    assert record.predicted_value > 0.5


def test_subscribe_wires_into_bus():
    store, hub = make_hub()
    bus = EventBus(store, clock=lambda: T0)
    hub.subscribe(bus)
    store.upsert_job(make_job(1, status=JobStatus.SUCCESS))
    bus.publish("build-data.integrated", event_payload([1]))
    bus.drain()
    assert hub.current_snapshot(ModelKind.FAILURE, SHARED_SCOPE).trained_on_count == 1
