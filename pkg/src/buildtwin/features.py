"""Feature schema and per-job feature computation.

One fixed, ordered schema shared by all model kinds. Trailing-window
features look strictly BEFORE the job's own created_at so a vector is
reproducible no matter when it is computed.

All values are encoded into O(1) ranges (fractions of a cycle, log
seconds over ten): the online learner runs a fixed-rate gradient step,
and raw-second features would saturate it within a few updates.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import SchemaMismatch
from .model import COMPLETED_STATUSES, BuildJob, JobStatus
from .store import JobQuery, Store

FEATURE_NAMES = (
    "hour_of_day",
    "day_of_week",
    "queued_duration",
    "recent_failure_rate",
    "recent_mean_duration",
    "rerun_index",
    "ref_is_default",
)

SCHEMA_VERSION = "v1"
TRAILING_WINDOW = 50


def feature_schema() -> dict:
    return {"version": SCHEMA_VERSION, "features": list(FEATURE_NAMES)}


def compute_features(store: Store, job: BuildJob) -> dict[str, float]:
    """Derive the full feature map for one job from stored history.

    Declared features on the job itself win over derived values.
    """
    recent = store.query_jobs(
        JobQuery(
            project_ids=[job.project_id],
            name=job.name,
            statuses=list(COMPLETED_STATUSES),
            created_to=job.created_at,
            order_by="created_at",
            descending=True,
            limit=TRAILING_WINDOW,
        )
    )
    n = len(recent)
    failed = sum(1 for j in recent if j.status is JobStatus.FAILED)
    durations = [j.duration for j in recent if j.duration is not None]

    group = store.get_group(job.project_id, job.pipeline_id, job.name)
    rerun_index = sum(
        1 for j in group if j.created_at < job.created_at and j.job_id != job.job_id
    )

    default_ref = "main"
    for project in store.list_projects():
        if project.project_id == job.project_id:
            default_ref = project.default_ref
            break

    mean_duration = (sum(durations) / len(durations)) if durations else 0.0
    features = {
        "hour_of_day": job.created_at.hour / 24.0,
        "day_of_week": job.created_at.weekday() / 7.0,
        "queued_duration": float(np.log1p(job.queued_duration or 0.0)) / 10.0,
        # Laplace smoothing keeps the rate defined on an empty window
        "recent_failure_rate": (failed + 1.0) / (n + 2.0),
        "recent_mean_duration": float(np.log1p(mean_duration)) / 10.0,
        "rerun_index": float(rerun_index),
        "ref_is_default": 1.0 if job.ref == default_ref else 0.0,
    }
    features.update(job.features)
    return features


def vector(features: dict[str, float], names: Sequence[str] = FEATURE_NAMES) -> np.ndarray:
    """Order a feature map into the schema's vector; reject mismatches."""
    missing = [n for n in names if n not in features]
    if missing:
        raise SchemaMismatch(f"missing features: {', '.join(missing)}")
    unknown = sorted(set(features) - set(names))
    if unknown:
        raise SchemaMismatch(f"unknown features: {', '.join(unknown)}")
    return np.array([float(features[n]) for n in names], dtype=float)
