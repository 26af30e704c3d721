"""Operator command line: serve, backfill, replay, simulate, inspect.

Exit codes: 0 success, 1 usage/config error, 2 remote platform error,
3 local I/O error. Failures print the error envelope as JSON on stderr.
"""

from __future__ import annotations

import json
import logging
import re
import sys
import time
from typing import Any, Mapping, Optional

import click

from . import __version__
from .adapters.base import MAX_PER_PAGE, ActualTwinReader, check_page_args
from .adapters.simulator import SimulatedPlatform
from .config import AppConfig, load as load_config
from .errors import (
    ActualTwinUnreachable,
    BuildTwinError,
    InvalidConfig,
    InvalidQuery,
    NotFound,
    RateLimited,
    StorageUnavailable,
    Unauthorized,
    UnparseableRecord,
    WriterRejected,
)
from .ingest import WEBHOOK_TOKEN_HEADER, BackfillConfig
from .metrics import series as metric_series
from .model import MetricInterval, decode_ts, normalize_scope
from .runtime import Runtime
from .store import JobQuery, open_store

log = logging.getLogger(__name__)

_REMOTE_ERRORS = (ActualTwinUnreachable, RateLimited, WriterRejected, Unauthorized)
_LOCAL_ERRORS = (StorageUnavailable,)

_DURATION_RE = re.compile(r"^(\d+(?:\.\d+)?)([smhd]?)$")
_DURATION_UNITS = {"": 1.0, "s": 1.0, "m": 60.0, "h": 3600.0, "d": 86400.0}


def parse_duration(text: str) -> float:
    m = _DURATION_RE.match(text.strip())
    if not m:
        raise InvalidConfig(f"bad duration {text!r} (use e.g. 90s, 15m, 2h, 1d)")
    return float(m.group(1)) * _DURATION_UNITS[m.group(2)]


def _parse_when(text: str):
    try:
        return decode_ts(text if "T" in text else f"{text}T00:00:00Z")
    except (ValueError, TypeError) as exc:
        raise InvalidQuery(f"bad timestamp {text!r}") from exc


def _emit(data: Any) -> None:
    click.echo(json.dumps(data, indent=2, sort_keys=True))


def _load(config_path: Optional[str], store_url: Optional[str]) -> AppConfig:
    cfg = load_config(config_path)
    if store_url:
        from dataclasses import replace

        cfg = replace(cfg, store=replace(cfg.store, url=store_url))
    return cfg


@click.group()
@click.version_option(version=__version__, prog_name="buildtwin")
def cli() -> None:
    """Digital-twin service for CI build pipelines."""
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s"
    )


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--host", default=None, help="Bind address (overrides config).")
@click.option("--port", type=int, default=None, help="Bind port (overrides config).")
@click.option("--store", "store_url", default=None, help="Store URL override.")
def serve(config_path, host, port, store_url) -> None:
    """Run the API service with all background workers attached."""
    import uvicorn

    from .api import create_app

    cfg = _load(config_path, store_url)
    runtime = Runtime(cfg)
    app = create_app(runtime)
    runtime.start()
    try:
        uvicorn.run(
            app,
            host=host or cfg.service.host,
            port=port or cfg.service.port,
            log_level="info",
        )
    finally:
        runtime.stop()


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--store", "store_url", default=None)
@click.option("--projects", default=None, help="Comma-separated ids; default: all.")
@click.option("--limit", type=int, default=None, help="Max fetched jobs per project.")
@click.option("--page-size", type=int, default=MAX_PER_PAGE)
def backfill(config_path, store_url, projects, limit, page_size) -> None:
    """Pull job history from the platform into the store."""
    cfg = _load(config_path, store_url)
    runtime = Runtime(cfg, synchronous=True)
    try:
        if projects:
            ids = [int(p) for p in projects.split(",")]
        else:
            ids = [int(p["id"]) for p in runtime.reader.list_projects()]
        summary = runtime.ingest.backfill(
            BackfillConfig(
                project_ids=tuple(ids),
                max_jobs_per_project=limit or cfg.ingest.max_history_jobs,
                page_size=page_size,
            )
        )
        runtime.drain()
        _emit(summary.to_dict())
    finally:
        runtime.stop()


def _iter_ndjson(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise UnparseableRecord(f"{path}:{line_no}: {exc}") from exc


def _record_to_raw(record: Mapping[str, Any]) -> Mapping[str, Any]:
    """Accept canonical dumps, webhook bodies, or dead-letter entries."""
    if "raw" in record and "reason" in record:
        record = record["raw"]
    if not isinstance(record, Mapping):
        raise UnparseableRecord("record is not an object")
    if "object_kind" in record or "build_id" in record or "id" in record:
        return record
    if "job_id" in record:
        raw: dict[str, Any] = {
            "id": record["job_id"],
            "name": record.get("name"),
            "status": record.get("status"),
            "ref": record.get("ref"),
            "created_at": record.get("created_at"),
            "started_at": record.get("started_at"),
            "finished_at": record.get("finished_at"),
            "duration": record.get("duration"),
            "queued_duration": record.get("queued_duration"),
            "sha": record.get("commit_sha"),
            "pipeline": {
                "id": record.get("pipeline_id"),
                "project_id": record.get("project_id"),
                "ref": record.get("ref"),
            },
            "features": record.get("features") or {},
        }
        if record.get("runner_id") is not None:
            raw["runner"] = {"id": record["runner_id"]}
        return raw
    raise UnparseableRecord("unrecognized record shape")


class FixtureReader(ActualTwinReader):
    """Serves the records of a replay file as the platform of record."""

    def __init__(self):
        self._records: dict[tuple[int, int], dict] = {}

    @staticmethod
    def _ids(raw: Mapping[str, Any]) -> tuple[int, int]:
        pipeline = raw.get("pipeline") or {}
        job_id = raw.get("build_id") or raw.get("id")
        project_id = raw.get("project_id") or pipeline.get("project_id")
        if job_id is None or project_id is None:
            raise UnparseableRecord("record lacks job/project ids")
        return int(project_id), int(job_id)

    def put(self, raw: Mapping[str, Any]) -> tuple[int, int]:
        key = self._ids(raw)
        self._records[key] = dict(raw)
        return key

    def list_projects(self) -> list[dict]:
        ids = sorted({p for p, _ in self._records})
        return [
            {"id": p, "path_with_namespace": f"replay/{p}", "default_branch": "main"}
            for p in ids
        ]

    def list_jobs(self, project_id, page=1, per_page=MAX_PER_PAGE, updated_after=None):
        check_page_args(page, per_page)
        jobs = [
            raw
            for (p, _), raw in sorted(self._records.items(), reverse=True)
            if p == project_id
        ]
        start = (page - 1) * per_page
        return jobs[start : start + per_page]

    def get_job(self, project_id, job_id):
        raw = self._records.get((int(project_id), int(job_id)))
        if raw is None:
            raise NotFound(f"job {job_id} not in replay fixture")
        return raw


@cli.command()
@click.option("--file", "path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--store", "store_url", default=None)
@click.option("--speed", type=float, default=0.0, help="Pacing multiplier; 0 = flat out.")
def replay(path, config_path, store_url, speed) -> None:
    """Feed an NDJSON dump through the real webhook path."""
    cfg = _load(config_path, store_url)
    reader = FixtureReader()
    runtime = Runtime(cfg, reader=reader, synchronous=True)
    headers = {WEBHOOK_TOKEN_HEADER: runtime.webhook_token}
    accepted = rejected = 0
    previous_created = None
    try:
        for record in _iter_ndjson(path):
            try:
                raw = _record_to_raw(record)
                project_id, job_id = reader.put(raw)
            except UnparseableRecord as exc:
                log.warning("skipping replay record: %s", exc.message)
                rejected += 1
                continue
            if speed > 0:
                created = raw.get("created_at") or raw.get("build_created_at")
                if created and previous_created:
                    gap = (
                        _parse_when(created) - _parse_when(previous_created)
                    ).total_seconds()
                    if gap > 0:
                        time.sleep(gap / speed)
                previous_created = created or previous_created
            body = json.dumps(
                {
                    "object_kind": "build",
                    "build_id": job_id,
                    "project_id": project_id,
                }
            ).encode()
            status, _ = runtime.ingest.handle_webhook(headers, body)
            if status == 202:
                accepted += 1
            else:
                rejected += 1
        runtime.drain()
        _emit(
            {
                "accepted": accepted,
                "rejected": rejected,
                "jobs_stored": runtime.store.count_jobs(JobQuery()),
            }
        )
    finally:
        runtime.stop()


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--store", "store_url", default=None)
@click.option("--horizon", default="1h", help="Simulated span, e.g. 30m, 2h, 1d.")
def simulate(config_path, store_url, horizon) -> None:
    """Generate simulator traffic and run it through the full twin."""
    cfg = _load(config_path, store_url)
    if cfg.simulator is None:
        raise InvalidConfig("config has no [simulator] section")
    horizon_seconds = parse_duration(horizon)
    platform = SimulatedPlatform(cfg.simulator, horizon_seconds=horizon_seconds)
    runtime = Runtime(cfg, reader=platform, writer=platform, synchronous=True)
    try:
        delivered = 0
        for delivery in platform.stream():
            body = json.dumps(delivery.body).encode()
            runtime.ingest.handle_webhook(delivery.headers, body)
            # settle subscribers at each virtual instant so models see
            # jobs in the state they were delivered in
            runtime.drain()
            delivered += 1
        _emit(
            {
                "deliveries": delivered,
                "jobs_stored": runtime.store.count_jobs(JobQuery()),
                "predictions": len(runtime.store.query_predictions()),
                "anomalies": len(
                    runtime.store.query_predictions(anomalies_only=True)
                ),
                "actions": len(runtime.store.list_actions()),
            }
        )
    finally:
        runtime.stop()


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--store", "store_url", default=None)
@click.option("--scope", default=None, help="Comma-separated project ids; default all.")
@click.option(
    "--interval",
    type=click.Choice([i.value for i in MetricInterval]),
    default="daily",
)
@click.option("--from", "window_from", required=True, help="Window start (aligned).")
@click.option("--to", "window_to", required=True, help="Window end (aligned).")
@click.option("--json", "as_json", is_flag=True, default=False)
def metrics(config_path, store_url, scope, interval, window_from, window_to, as_json):
    """Print the metric series for a window range."""
    cfg = _load(config_path, store_url)
    store = open_store(cfg.store.url)
    try:
        scope_ids = (
            normalize_scope([int(p) for p in scope.split(",")]) if scope else None
        )
        snaps = metric_series(
            store,
            scope_ids,
            MetricInterval(interval),
            _parse_when(window_from),
            _parse_when(window_to),
        )
        if as_json:
            _emit({"series": [s.to_dict() for s in snaps]})
            return
        header = (
            f"{'window_start':<22}{'frequency':>10}{'mean_duration':>15}"
            f"{'failure_ratio':>15}{'flaky_ratio':>13}"
        )
        click.echo(header)
        for snap in snaps:
            d = snap.to_dict()

            def fmt(value, places):
                return "-" if value is None else f"{value:.{places}f}"

            click.echo(
                f"{d['window_start']:<22}{d['executions_frequency']:>10}"
                f"{fmt(d['mean_duration'], 1):>15}"
                f"{fmt(d['failure_ratio'], 3):>15}"
                f"{fmt(d['flaky_failure_ratio'], 3):>13}"
            )
    finally:
        store.close()


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--store", "store_url", default=None)
@click.option("--out", "out_path", type=click.Path(), default=None)
def dump(config_path, store_url, out_path) -> None:
    """Export all stored jobs as NDJSON (replayable)."""
    cfg = _load(config_path, store_url)
    store = open_store(cfg.store.url)
    try:
        lines = [
            json.dumps(doc, sort_keys=True) for doc in store.export_jobs()
        ]
        text = "\n".join(lines) + ("\n" if lines else "")
        if out_path:
            with open(out_path, "w", encoding="utf-8") as fh:
                fh.write(text)
            click.echo(json.dumps({"jobs": len(lines), "file": out_path}))
        else:
            click.echo(text, nl=False)
    finally:
        store.close()


def main(argv: Optional[list[str]] = None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except BuildTwinError as exc:
        sys.stderr.write(json.dumps(exc.envelope(), sort_keys=True) + "\n")
        if isinstance(exc, _REMOTE_ERRORS):
            return 2
        if isinstance(exc, _LOCAL_ERRORS):
            return 3
        return 1
    except OSError as exc:
        envelope = {"code": "IO_ERROR", "message": str(exc), "details": {}}
        sys.stderr.write(json.dumps(envelope, sort_keys=True) + "\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
