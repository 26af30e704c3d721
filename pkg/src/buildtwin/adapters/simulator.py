"""Deterministic build-platform simulator.

Generates a full job history up front (seeded, so byte-reproducible),
then exposes three views of it:

- a reader that honors a virtual clock, so a job looks pending, running
  or finished depending on "now";
- the corresponding stream of webhook deliveries in time order;
- a writer that records CI variables / file upserts and can schedule
  reruns.

Failures are drawn per retry CHAIN, not per attempt. A chain is clean
(one success), flaky (one failed attempt, then a successful rerun) or
hard (initial attempt plus every retry failed). The chain-type mix is
calibrated so the OBSERVED failure ratio and flaky failure ratio of the
generated history converge to the configured targets; per-attempt coin
flips cannot hit both targets at once under a retry policy.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from typing import Any, Iterator, Optional

from ..errors import InvalidConfig, NotFound, WriterRejected
from ..model import encode_ts, utc_ms
from .base import ActualTwinReader, ActualTwinWriter, check_page_args

SIM_EPOCH = datetime(2025, 6, 1, tzinfo=timezone.utc)

_CLEAN, _FLAKY, _HARD = "clean", "flaky", "hard"


@dataclass(frozen=True)
class RegimeChange:
    """From at_seconds on, sampled durations are scaled by the factor."""

    at_seconds: float
    duration_factor: float
    project_id: Optional[int] = None
    name: Optional[str] = None

    def applies(self, project_id: int, name: str) -> bool:
        if self.project_id is not None and self.project_id != project_id:
            return False
        if self.name is not None and self.name != name:
            return False
        return True


@dataclass(frozen=True)
class SimProjectConfig:
    project_id: int
    path: str = ""
    default_ref: str = "main"
    arrival_rate_per_second: float = 0.1
    duration_log_mean: float = math.log(300.0)
    duration_log_sigma: float = 0.5
    p_fail: float = 0.1
    p_flaky: float = 0.0
    max_retries: int = 1
    retry_delay_seconds: float = 30.0
    queued_mean_seconds: float = 5.0
    job_names: tuple[str, ...] = ("build",)
    p_feature_ref: float = 0.0

    def validate(self) -> None:
        if self.arrival_rate_per_second <= 0:
            raise InvalidConfig("arrival_rate_per_second must be > 0")
        if self.duration_log_sigma < 0:
            raise InvalidConfig("duration_log_sigma must be >= 0")
        if not 0.0 <= self.p_fail <= 1.0:
            raise InvalidConfig("p_fail must be in [0, 1]")
        if not 0.0 <= self.p_flaky <= 1.0:
            raise InvalidConfig("p_flaky must be in [0, 1]")
        if self.max_retries < 0:
            raise InvalidConfig("max_retries must be >= 0")
        if self.retry_delay_seconds <= 0:
            raise InvalidConfig("retry_delay_seconds must be > 0")
        if self.queued_mean_seconds < 0:
            raise InvalidConfig("queued_mean_seconds must be >= 0")
        if not self.job_names:
            raise InvalidConfig("job_names must be non-empty")
        if not 0.0 <= self.p_feature_ref <= 1.0:
            raise InvalidConfig("p_feature_ref must be in [0, 1]")
        chain_mix(self.p_fail, self.p_flaky, self.max_retries)


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    projects: tuple[SimProjectConfig, ...] = (SimProjectConfig(project_id=1),)
    start_time: datetime = SIM_EPOCH
    webhook_token: str = "sim-token"
    regime_changes: tuple[RegimeChange, ...] = ()

    def validate(self) -> None:
        if not self.projects:
            raise InvalidConfig("at least one project required")
        ids = [p.project_id for p in self.projects]
        if len(set(ids)) != len(ids):
            raise InvalidConfig("duplicate project_id in simulator config")
        for project in self.projects:
            project.validate()
        for change in self.regime_changes:
            if change.duration_factor <= 0:
                raise InvalidConfig("duration_factor must be > 0")
            if change.at_seconds < 0:
                raise InvalidConfig("regime change at_seconds must be >= 0")


def chain_mix(p_fail: float, p_flaky: float, max_retries: int) -> tuple[float, float]:
    """Probabilities (flaky_chain, hard_chain) hitting the target ratios.

    With T = expected failed jobs per chain, the targets pin
      1/T = 1/p_fail - p_flaky - (1 - p_flaky) * m / (1 + m).
    Flaky chains contribute the one flaky-labeled failure each; hard
    chains contribute 1 + m plain failures.
    """
    if p_fail == 0.0:
        return 0.0, 0.0
    if p_flaky > 0.0 and max_retries < 1:
        raise InvalidConfig("p_flaky > 0 requires max_retries >= 1")
    m = max_retries
    inv_t = 1.0 / p_fail - p_flaky - (1.0 - p_flaky) * m / (1.0 + m)
    if inv_t <= 0.0:
        raise InvalidConfig("p_fail is unreachable under the retry policy")
    t = 1.0 / inv_t
    flaky = p_flaky * t
    hard = t * (1.0 - p_flaky) / (1.0 + m)
    if flaky + hard > 1.0 + 1e-12:
        raise InvalidConfig("p_fail/p_flaky targets are jointly infeasible")
    return flaky, hard


@dataclass
class SimJob:
    """Ground-truth record of one generated job attempt."""

    job_id: int
    project_id: int
    pipeline_id: int
    name: str
    ref: str
    sha: str
    outcome: str  # success | failed
    created_at: datetime
    started_at: datetime
    finished_at: datetime
    queued_duration: float
    duration: float
    runner_id: int

    def status_at(self, now: datetime) -> str:
        if now < self.started_at:
            return "created"
        if now < self.finished_at:
            return "running"
        return self.outcome

    def updated_at(self, now: datetime) -> datetime:
        if now < self.started_at:
            return self.created_at
        if now < self.finished_at:
            return self.started_at
        return self.finished_at


@dataclass(frozen=True)
class WebhookDelivery:
    at: datetime
    headers: dict[str, str]
    body: dict[str, Any]


def _event_body(job: SimJob, stage: str, token_status: str) -> dict[str, Any]:
    started = stage in ("running", "terminal")
    finished = stage == "terminal"
    return {
        "object_kind": "build",
        "build_id": job.job_id,
        "build_name": job.name,
        "build_status": token_status,
        "project_id": job.project_id,
        "pipeline_id": job.pipeline_id,
        "ref": job.ref,
        "sha": job.sha,
        "build_created_at": encode_ts(job.created_at),
        "build_started_at": encode_ts(job.started_at) if started else None,
        "build_finished_at": encode_ts(job.finished_at) if finished else None,
        "build_queued_duration": job.queued_duration if started else None,
        "build_duration": job.duration if finished else None,
        "runner": {"id": job.runner_id},
    }


class SimulatedPlatform(ActualTwinReader, ActualTwinWriter):
    """Reader + writer over one generated history, with a virtual clock."""

    def __init__(self, config: SimConfig, horizon_seconds: float):
        config.validate()
        # horizon 0 is a valid degenerate case: an empty platform that
        # only serves webhook pushes and write-backs
        if horizon_seconds < 0:
            raise InvalidConfig("horizon must be >= 0")
        self.config = config
        self.horizon_seconds = horizon_seconds
        self.jobs: list[SimJob] = []
        self._by_id: dict[int, SimJob] = {}
        self._by_project: dict[int, list[SimJob]] = {}
        self._deliveries: Optional[list[WebhookDelivery]] = None
        self._next_id = 1
        self.ci_variables: dict[tuple[int, str], str] = {}
        self.files: dict[tuple[int, str], str] = {}
        self._injected_read_errors: list[Exception] = []
        self._retry_rng = random.Random(config.seed * 7919 + 17)
        self._generate()
        self.now = self.end_time

    # -- generation ------------------------------------------------------
    @property
    def end_time(self) -> datetime:
        return self.config.start_time + timedelta(seconds=self.horizon_seconds)

    def _factor_at(self, project_id: int, name: str, offset: float) -> float:
        factor = 1.0
        best = -1.0
        for change in self.config.regime_changes:
            if change.applies(project_id, name) and change.at_seconds <= offset:
                if change.at_seconds > best:
                    best = change.at_seconds
                    factor = change.duration_factor
        return factor

    def _generate(self) -> None:
        start = utc_ms(self.config.start_time)
        chains: list[tuple[float, int, list[SimJob]]] = []
        for project in self.config.projects:
            rng = random.Random(f"{self.config.seed}/{project.project_id}")
            flaky_p, hard_p = chain_mix(
                project.p_fail, project.p_flaky, project.max_retries
            )
            t = 0.0
            chain_no = 0
            while True:
                t += rng.expovariate(project.arrival_rate_per_second)
                if t >= self.horizon_seconds:
                    break
                chain_no += 1
                draw = rng.random()
                if draw < flaky_p:
                    outcomes = ["failed", "success"]
                elif draw < flaky_p + hard_p:
                    outcomes = ["failed"] * (1 + project.max_retries)
                else:
                    outcomes = ["success"]
                name = (
                    project.job_names[0]
                    if len(project.job_names) == 1
                    else rng.choice(project.job_names)
                )
                ref = project.default_ref
                if project.p_feature_ref > 0 and rng.random() < project.p_feature_ref:
                    ref = f"topic/{chain_no}"
                sha = f"{rng.getrandbits(160):040x}"
                attempts: list[SimJob] = []
                offset = t
                for outcome in outcomes:
                    queued = (
                        rng.expovariate(1.0 / project.queued_mean_seconds)
                        if project.queued_mean_seconds > 0
                        else 0.0
                    )
                    base = rng.lognormvariate(
                        project.duration_log_mean, project.duration_log_sigma
                    )
                    duration = base * self._factor_at(project.project_id, name, offset)
                    created = utc_ms(start + timedelta(seconds=offset))
                    started = utc_ms(created + timedelta(seconds=queued))
                    finished = utc_ms(started + timedelta(seconds=duration))
                    attempts.append(
                        SimJob(
                            job_id=0,  # assigned after the global sort
                            project_id=project.project_id,
                            pipeline_id=0,
                            name=name,
                            ref=ref,
                            sha=sha,
                            outcome=outcome,
                            created_at=created,
                            started_at=started,
                            finished_at=finished,
                            queued_duration=queued,
                            duration=duration,
                            runner_id=rng.randint(1, 5),
                        )
                    )
                    offset = (
                        (finished - start).total_seconds()
                        + project.retry_delay_seconds
                    )
                chains.append((t, project.project_id, attempts))

        chains.sort(key=lambda c: (c[0], c[1]))
        for pipeline_id, (_, _, attempts) in enumerate(chains, start=1):
            for job in attempts:
                job.pipeline_id = pipeline_id
        all_jobs = [job for _, _, attempts in chains for job in attempts]
        all_jobs.sort(key=lambda j: (j.created_at, j.project_id, j.pipeline_id))
        for job in all_jobs:
            job.job_id = self._next_id
            self._next_id += 1
        self.jobs = all_jobs
        self._by_id = {j.job_id: j for j in all_jobs}
        for job in all_jobs:
            self._by_project.setdefault(job.project_id, []).append(job)

    # -- virtual clock ---------------------------------------------------
    def set_now(self, now: datetime) -> None:
        self.now = utc_ms(now)

    def advance(self, seconds: float) -> None:
        self.set_now(self.now + timedelta(seconds=seconds))

    # -- webhook stream ----------------------------------------------------
    def all_deliveries(self) -> list[WebhookDelivery]:
        """Every webhook event of the generated history, time-ordered."""
        if self._deliveries is None:
            headers = {"X-Gitlab-Token": self.config.webhook_token}
            stages = []
            for job in self.jobs:
                stages.append((job.created_at, job.job_id, 0, job, "created", "created"))
                stages.append((job.started_at, job.job_id, 1, job, "running", "running"))
                stages.append(
                    (job.finished_at, job.job_id, 2, job, "terminal", job.outcome)
                )
            stages.sort(key=lambda s: (s[0], s[1], s[2]))
            self._deliveries = [
                WebhookDelivery(at, dict(headers), _event_body(job, stage, status))
                for at, _, _, job, stage, status in stages
            ]
        return self._deliveries

    def stream(self, until: Optional[datetime] = None) -> Iterator[WebhookDelivery]:
        """Yield deliveries in order, advancing the clock to each one."""
        for delivery in self.all_deliveries():
            if until is not None and delivery.at > until:
                break
            self.set_now(delivery.at)
            yield delivery
        if until is not None:
            self.set_now(until)
        else:
            self.set_now(self.end_time)

    # -- reader ------------------------------------------------------------
    def inject_read_error(self, exc: Exception) -> None:
        self._injected_read_errors.append(exc)

    def _maybe_fail(self) -> None:
        if self._injected_read_errors:
            raise self._injected_read_errors.pop(0)

    def list_projects(self) -> list[dict[str, Any]]:
        self._maybe_fail()
        return [
            {
                "id": p.project_id,
                "path_with_namespace": p.path or f"sim/project-{p.project_id}",
                "default_branch": p.default_ref,
            }
            for p in self.config.projects
        ]

    def _raw(self, job: SimJob) -> dict[str, Any]:
        now = self.now
        started = now >= job.started_at
        finished = now >= job.finished_at
        return {
            "id": job.job_id,
            "name": job.name,
            "ref": job.ref,
            "stage": "build",
            "status": job.status_at(now),
            "created_at": encode_ts(job.created_at),
            "started_at": encode_ts(job.started_at) if started else None,
            "finished_at": encode_ts(job.finished_at) if finished else None,
            "queued_duration": job.queued_duration if started else None,
            "duration": job.duration if finished else None,
            "commit": {"id": job.sha},
            "pipeline": {
                "id": job.pipeline_id,
                "project_id": job.project_id,
                "ref": job.ref,
            },
            "runner": {"id": job.runner_id},
            "updated_at": encode_ts(job.updated_at(now)),
        }

    def list_jobs(
        self,
        project_id: int,
        page: int,
        per_page: int = 100,
        updated_after: Optional[datetime] = None,
    ) -> list[dict[str, Any]]:
        check_page_args(page, per_page)
        self._maybe_fail()
        if project_id not in {p.project_id for p in self.config.projects}:
            raise NotFound(f"project {project_id} not found")
        visible = [
            j for j in self._by_project.get(project_id, []) if j.created_at <= self.now
        ]
        if updated_after is not None:
            cutoff = utc_ms(updated_after)
            visible = [j for j in visible if j.updated_at(self.now) > cutoff]
        visible.sort(key=lambda j: j.job_id, reverse=True)
        lo = (page - 1) * per_page
        return [self._raw(j) for j in visible[lo:lo + per_page]]

    def get_job(self, project_id: int, job_id: int) -> dict[str, Any]:
        self._maybe_fail()
        job = self._by_id.get(job_id)
        if job is None or job.project_id != project_id or job.created_at > self.now:
            raise NotFound(f"job {job_id} not found in project {project_id}")
        return self._raw(job)

    # -- writer ------------------------------------------------------------
    def set_ci_variable(self, project_id: int, key: str, value: str) -> str:
        self.ci_variables[(project_id, key)] = value
        return f"var:{key}"

    def upsert_file(self, project_id: int, path: str, content: str, message: str) -> str:
        self.files[(project_id, path)] = content
        return f"file:{path}"

    def retry_job(self, project_id: int, job_id: int) -> str:
        job = self._by_id.get(job_id)
        if job is None or job.project_id != project_id:
            raise WriterRejected(f"job {job_id} not found in project {project_id}")
        if job.status_at(self.now) != "failed":
            raise WriterRejected(f"job {job_id} is not in a retryable state")
        project = next(
            p for p in self.config.projects if p.project_id == project_id
        )
        queued = (
            self._retry_rng.expovariate(1.0 / project.queued_mean_seconds)
            if project.queued_mean_seconds > 0
            else 0.0
        )
        duration = self._retry_rng.lognormvariate(
            project.duration_log_mean, project.duration_log_sigma
        )
        created = utc_ms(self.now)
        started = utc_ms(created + timedelta(seconds=queued))
        rerun = SimJob(
            job_id=self._next_id,
            project_id=project_id,
            pipeline_id=job.pipeline_id,
            name=job.name,
            ref=job.ref,
            sha=job.sha,
            outcome="success",
            created_at=created,
            started_at=started,
            finished_at=utc_ms(started + timedelta(seconds=duration)),
            queued_duration=queued,
            duration=duration,
            runner_id=self._retry_rng.randint(1, 5),
        )
        self._next_id += 1
        self.jobs.append(rerun)
        self._by_id[rerun.job_id] = rerun
        self._by_project.setdefault(project_id, []).append(rerun)
        return f"job:{rerun.job_id}"


def simulate(config: SimConfig, horizon_seconds: float) -> SimulatedPlatform:
    """Build the platform for a run of the given virtual length."""
    return SimulatedPlatform(config, horizon_seconds)
