import logging
from datetime import datetime, timedelta, timezone

import pytest

from buildtwin.model import BuildJob, JobStatus
from buildtwin.store import MemoryStore, SqliteStore

logging.getLogger("buildtwin").setLevel(logging.ERROR)

T0 = datetime(2025, 6, 2, 12, 0, 0, tzinfo=timezone.utc)  # a Monday


def make_job(job_id=1, **overrides) -> BuildJob:
    """A valid completed job; override any field for the case at hand."""
    status = overrides.pop("status", JobStatus.SUCCESS)
    created_at = overrides.pop("created_at", T0)
    fields = dict(
        job_id=job_id,
        project_id=1,
        pipeline_id=10,
        name="build",
        ref="main",
        commit_sha="c0ffee",
        status=status,
        created_at=created_at,
    )
    if status in (JobStatus.SUCCESS, JobStatus.FAILED):
        fields["started_at"] = created_at + timedelta(seconds=5)
        fields["finished_at"] = created_at + timedelta(seconds=305)
        fields["duration"] = 300.0
        fields["queued_duration"] = 5.0
    fields.update(overrides)
    return BuildJob(**fields)


@pytest.fixture(params=["memory", "sqlite"])
def store(request, tmp_path):
    if request.param == "memory":
        backend = MemoryStore()
    else:
        backend = SqliteStore(str(tmp_path / "twin.db"))
    yield backend
    backend.close()


@pytest.fixture
def mem_store():
    backend = MemoryStore()
    yield backend
    backend.close()
