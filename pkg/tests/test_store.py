"""Store contract: upsert conflict rules, queries, ledgers, persistence.

The query test uses a brute-force oracle over random datasets; the
upsert tests pin the convergence property ingestion relies on.
"""

import json
import random
from datetime import timedelta

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from buildtwin.errors import NotFound, ValidationError
from buildtwin.model import (
    AlertRule,
    JobStatus,
    ModelKind,
    PredictionRecord,
    Project,
)
from buildtwin.store import (
    IGNORED,
    INSERTED,
    UPDATED,
    JobQuery,
    MemoryStore,
    SqliteStore,
    import_jobs,
    merge_flaky,
    open_store,
    resolve_upsert,
)

from conftest import T0, make_job


def lifecycle_versions(job_id=1, outcome=JobStatus.SUCCESS):
    """The four full-state records one job emits over its life."""
    base = dict(job_id=job_id, created_at=T0)
    created = make_job(status=JobStatus.CREATED, **base)
    pending = make_job(status=JobStatus.PENDING, **base)
    running = make_job(
        status=JobStatus.RUNNING, started_at=T0 + timedelta(seconds=5), **base
    )
    terminal = make_job(status=outcome, **base)
    return [created, pending, running, terminal]


def test_upsert_insert_then_ignore_duplicate(store):
    job = make_job(1)
    assert store.upsert_job(job) == INSERTED
    assert store.upsert_job(job) == IGNORED
    assert store.get_job(1) == job


def test_upsert_keeps_terminal_over_stale_running(store):
    versions = lifecycle_versions()
    store.upsert_job(versions[3])
    assert store.upsert_job(versions[2]) == IGNORED
    assert store.get_job(1).status is JobStatus.SUCCESS


def test_upsert_lifecycle_upgrades(store):
    versions = lifecycle_versions()
    outcomes = [store.upsert_job(v) for v in versions]
    assert outcomes == [INSERTED, UPDATED, UPDATED, UPDATED]
    assert store.get_job(1).status is JobStatus.SUCCESS


@given(st.permutations(range(8)))
@settings(max_examples=60, deadline=None)
def test_upsert_shuffled_double_delivery_converges(order):
    """Any duplicated, reordered lifecycle delivery ends at the terminal row."""
    versions = lifecycle_versions()
    deliveries = (versions + versions)
    store = MemoryStore()
    for idx in order:
        store.upsert_job(deliveries[idx])
    assert store.get_job(1) == versions[3]


def test_flaky_merge_is_monotone():
    assert merge_flaky(True, None) is True
    assert merge_flaky(True, False) is True
    assert merge_flaky(False, True) is True
    assert merge_flaky(None, None) is None
    assert merge_flaky(False, None) is False


def test_set_flaky_survives_redelivery(store):
    terminal = lifecycle_versions(outcome=JobStatus.FAILED)[3]
    store.upsert_job(terminal)
    store.set_flaky(1, True)
    # late duplicate of the terminal record carries flaky=None
    assert store.upsert_job(terminal) == IGNORED
    assert store.get_job(1).flaky is True


def test_set_flaky_never_clears(store):
    store.upsert_job(lifecycle_versions(outcome=JobStatus.FAILED)[3])
    store.set_flaky(1, True)
    updated = store.set_flaky(1, False)
    assert updated.flaky is True


def test_resolve_upsert_merged_equal_is_ignored():
    stored = make_job(1, status=JobStatus.FAILED, flaky=True)
    incoming = stored.with_flaky(None)
    outcome, merged = resolve_upsert(stored, incoming)
    assert outcome == IGNORED
    assert merged == stored


def test_upsert_jobs_validates_batch_before_writing(store):
    good = make_job(1)
    bad = make_job(2, flaky=True)  # flaky while not failed
    with pytest.raises(ValidationError):
        store.upsert_jobs([good, bad])
    with pytest.raises(NotFound):
        store.get_job(1)


def test_upsert_jobs_summary_counts(store):
    versions = lifecycle_versions()
    summary = store.upsert_jobs([versions[0], versions[3], versions[3]])
    assert summary.to_dict() == {"inserted": 1, "updated": 1, "ignored": 1}


# -- queries ---------------------------------------------------------------


def _random_jobs(rng, n):
    jobs = []
    for i in range(1, n + 1):
        status = rng.choice(list(JobStatus))
        created = T0 + timedelta(minutes=rng.randrange(0, 600))
        kw = dict(
            job_id=i,
            project_id=rng.choice([1, 2, 3]),
            pipeline_id=rng.randrange(1, 6),
            name=rng.choice(["build", "test", "deploy"]),
            ref=rng.choice(["main", "dev"]),
            status=status,
            created_at=created,
        )
        if status in (JobStatus.SUCCESS, JobStatus.FAILED):
            kw["started_at"] = created + timedelta(seconds=10)
            kw["finished_at"] = created + timedelta(seconds=rng.randrange(60, 900))
            kw["duration"] = float(rng.randrange(50, 800))
            if status is JobStatus.FAILED and rng.random() < 0.4:
                kw["flaky"] = True
        jobs.append(make_job(**kw))
    return jobs


def _brute_force(jobs, query: JobQuery):
    hits = [j for j in jobs if query.matches(j)]
    key = {
        "created_at": lambda j: (j.created_at, j.job_id),
        "finished_at": lambda j: (j.finished_at or j.created_at, j.job_id),
        "job_id": lambda j: j.job_id,
    }[query.order_by]
    hits.sort(key=key, reverse=query.descending)
    end = None if query.limit is None else query.offset + query.limit
    return hits[query.offset : end]


QUERIES = [
    JobQuery(),
    JobQuery(project_ids=(1,)),
    JobQuery(statuses=(JobStatus.FAILED, JobStatus.SUCCESS), name="build"),
    JobQuery(flaky=True),
    JobQuery(created_from=T0 + timedelta(minutes=60), created_to=T0 + timedelta(minutes=300)),
    JobQuery(finished_from=T0, finished_to=T0 + timedelta(minutes=400)),
    JobQuery(order_by="finished_at", descending=True, limit=7),
    JobQuery(order_by="job_id", descending=True, limit=5, offset=3),
    JobQuery(ref="dev", limit=4),
]


def test_query_matches_brute_force_on_both_backends(store):
    jobs = _random_jobs(random.Random(42), 120)
    store.upsert_jobs(jobs)
    for query in QUERIES:
        got = store.query_jobs(query)
        want = _brute_force(jobs, query)
        assert got == want, query
        assert store.count_jobs(query) == len([j for j in jobs if query.matches(j)])


@given(st.integers(min_value=0, max_value=2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_query_oracle_randomized(seed):
    rng = random.Random(seed)
    jobs = _random_jobs(rng, rng.randrange(0, 60))
    store = MemoryStore()
    store.upsert_jobs(jobs)
    for query in QUERIES:
        assert store.query_jobs(query) == _brute_force(jobs, query)


def test_half_open_created_range(store):
    store.upsert_jobs([make_job(1, created_at=T0), make_job(2, created_at=T0 + timedelta(hours=1))])
    hits = store.query_jobs(JobQuery(created_from=T0, created_to=T0 + timedelta(hours=1)))
    assert [j.job_id for j in hits] == [1]


def test_get_group_and_pipeline(store):
    store.upsert_jobs(
        [
            make_job(1, pipeline_id=5, name="test", status=JobStatus.FAILED),
            make_job(2, pipeline_id=5, name="test", created_at=T0 + timedelta(minutes=5)),
            make_job(3, pipeline_id=5, name="build"),
            make_job(4, pipeline_id=6, name="test"),
        ]
    )
    group = store.get_group(1, 5, "test")
    assert [j.job_id for j in group] == [1, 2]
    pipeline = store.get_pipeline_jobs(1, 5)
    assert sorted(j.job_id for j in pipeline) == [1, 2, 3]


def test_export_import_round_trip(store):
    jobs = _random_jobs(random.Random(7), 40)
    store.upsert_jobs(jobs)
    docs = store.export_jobs()
    other = MemoryStore()
    n = import_jobs(other, (json.dumps(d) for d in docs))
    assert n == len(jobs)
    assert other.export_jobs() == docs


# -- predictions ---------------------------------------------------------


def _prediction(pid, job_id=1, kind=ModelKind.FAILURE, at=None, **kw):
    return PredictionRecord(
        prediction_id=pid,
        job_id=job_id,
        model_kind=kind,
        predicted_value=0.4,
        predicted_at=at or T0,
        **kw,
    )


def test_predictions_newest_first(store):
    store.put_prediction(_prediction("a", at=T0))
    store.put_prediction(_prediction("b", at=T0 + timedelta(seconds=1)))
    store.put_prediction(_prediction("c", at=T0 + timedelta(seconds=1)))
    got = [p.prediction_id for p in store.query_predictions()]
    assert got == ["c", "b", "a"]


def test_attach_actual_idempotent(store):
    store.put_prediction(_prediction("a"))
    first = store.attach_actual(1, ModelKind.FAILURE, 1.0)
    second = store.attach_actual(1, ModelKind.FAILURE, 1.0)
    assert first.actual_value == second.actual_value == 1.0
    with pytest.raises(NotFound):
        store.attach_actual(99, ModelKind.FAILURE, 1.0)


def test_anomalies_only_filter(store):
    store.put_prediction(_prediction("a", anomaly=True, actual_value=1.0, anomaly_score=5.0))
    store.put_prediction(_prediction("b"))
    assert [p.prediction_id for p in store.query_predictions(anomalies_only=True)] == ["a"]


# -- ledgers and kv ---------------------------------------------------------


def test_event_ledger_once(store):
    assert store.mark_event_processed("models", "e1") is True
    assert store.mark_event_processed("models", "e1") is False
    assert store.mark_event_processed("improve", "e1") is True


def test_training_ledger_once(store):
    assert store.mark_trained(1, ModelKind.FAILURE) is True
    assert store.mark_trained(1, ModelKind.FAILURE) is False
    assert store.mark_trained(1, ModelKind.FLAKY) is True


def test_kv(store):
    assert store.get_kv("missing") is None
    store.set_kv("k", "v1")
    store.set_kv("k", "v2")
    assert store.get_kv("k") == "v2"


def test_projects(store):
    store.upsert_project(Project(project_id=1, path="acme/app", default_ref="trunk"))
    store.upsert_project(Project(project_id=1, path="acme/app2", default_ref="trunk"))
    projects = store.list_projects()
    assert len(projects) == 1
    assert projects[0].path == "acme/app2"


def test_rules_crud(store):
    rule = AlertRule(
        rule_id="r1",
        metric="failure_ratio",
        scope=(1,),
        interval="hourly",
        comparator=">",
        threshold=0.5,
    )
    store.put_rule(rule)
    assert store.list_rules() == [rule]
    store.delete_rule("r1")
    assert store.list_rules() == []
    with pytest.raises(NotFound):
        store.delete_rule("r1")


# -- bus spill ----------------------------------------------------------------


def test_bus_append_load_prune(store):
    s1 = store.bus_append("t", "a", T0)
    s2 = store.bus_append("t", "b", T0 + timedelta(days=1))
    assert s2 == s1 + 1
    assert [p for _, _, p, _ in store.bus_load(0)] == ["a", "b"]
    assert [p for _, _, p, _ in store.bus_load(s1)] == ["b"]
    assert store.bus_max_seq() == s2
    store.bus_prune(T0 + timedelta(hours=1))
    assert [p for _, _, p, _ in store.bus_load(0)] == ["b"]


def test_bus_cursors(store):
    assert store.bus_get_cursor("models") == 0
    store.bus_set_cursor("models", 5)
    assert store.bus_get_cursor("models") == 5


# -- backend specifics ----------------------------------------------------------


def test_sqlite_persists_across_reopen(tmp_path):
    path = str(tmp_path / "p.db")
    store = SqliteStore(path)
    store.upsert_job(make_job(1))
    store.set_kv("k", "v")
    store.close()
    reopened = SqliteStore(path)
    assert reopened.get_job(1) == make_job(1)
    assert reopened.get_kv("k") == "v"
    reopened.close()


def test_open_store_dispatch(tmp_path):
    mem = open_store("memory://")
    assert isinstance(mem, MemoryStore)
    lite = open_store(str(tmp_path / "x.db"))
    assert isinstance(lite, SqliteStore)
    lite.close()


def test_sqlite_url_slash_count_picks_relative_or_absolute(tmp_path, monkeypatch):
    # three slashes: relative to the working directory
    monkeypatch.chdir(tmp_path)
    rel = open_store("sqlite:///rel.db")
    rel.close()
    assert (tmp_path / "rel.db").exists()
    # four slashes: absolute path
    target = tmp_path / "abs.db"
    abs_store = open_store(f"sqlite:///{target}")
    abs_store.close()
    assert target.exists()
