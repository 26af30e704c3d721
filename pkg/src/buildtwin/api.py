"""HTTP surface over the runtime; everything the console consumes.

Read endpoints are open; mutating endpoints require a bearer token when
one is configured. All errors use the envelope {code, message, details}.
Request bodies are parsed by the domain types rather than schema models
so the HTTP layer stays a thin adapter.
"""

from __future__ import annotations

import logging
import os
from datetime import datetime
from hmac import compare_digest
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from starlette.exceptions import HTTPException as StarletteHTTPException

from . import __version__
from .errors import BuildTwinError, InvalidQuery, RateLimited, Unauthorized
from .features import feature_schema
from .model import (
    AlertRule,
    JobStatus,
    MetricInterval,
    ModelKind,
    Scenario,
    Scope,
    decode_ts,
    new_id,
    normalize_scope,
)
from .runtime import Runtime
from .store import JobQuery
from .whatif import WhatIfService

log = logging.getLogger(__name__)

DEFAULT_LIMIT = 100
MAX_LIMIT = 1000


def _parse_ts(value: str, name: str) -> datetime:
    try:
        return decode_ts(value)
    except (ValueError, TypeError) as exc:
        raise InvalidQuery(f"bad timestamp for {name!r}: {value!r}") from exc


def _parse_scope(value: Optional[str]) -> Scope:
    if value is None or value in ("", "all", "ALL"):
        return None
    try:
        return normalize_scope([int(p) for p in value.split(",")])
    except ValueError as exc:
        raise InvalidQuery(f"bad scope {value!r}") from exc


def _parse_limit(value: Optional[int]) -> int:
    if value is None:
        return DEFAULT_LIMIT
    if value < 1 or value > MAX_LIMIT:
        raise InvalidQuery(f"limit must be in [1, {MAX_LIMIT}]")
    return value


def _find_ui_dir() -> Optional[Path]:
    override = os.environ.get("CBDT_UI_DIR")
    candidates = [Path(override)] if override else []
    candidates.append(Path.cwd() / "frontend" / "dist")
    candidates.append(Path(__file__).resolve().parents[2] / "frontend" / "dist")
    for cand in candidates:
        if cand.is_dir():
            return cand
    return None


def create_app(runtime: Runtime) -> FastAPI:
    app = FastAPI(title="buildtwin", version=__version__, docs_url=None, redoc_url=None)
    app.state.runtime = runtime
    store = runtime.store
    whatif = WhatIfService(store, runtime.hub)

    app.add_middleware(
        CORSMiddleware,
        allow_origins=list(runtime.cfg.service.cors_origins),
        allow_methods=["*"],
        allow_headers=["*"],
    )

    def require_write_token(request: Request) -> None:
        expected = runtime.cfg.service.api_token
        if not expected:
            return
        header = request.headers.get("authorization", "")
        token = header[7:] if header.lower().startswith("bearer ") else ""
        if not compare_digest(token, expected):
            raise Unauthorized("missing or invalid API token")

    # -- error handling ---------------------------------------------------
    @app.exception_handler(BuildTwinError)
    async def domain_error(request: Request, exc: BuildTwinError):
        headers = {}
        if isinstance(exc, RateLimited) and exc.retry_after is not None:
            headers["Retry-After"] = str(int(exc.retry_after))
        return JSONResponse(
            status_code=exc.http_status, content=exc.envelope(), headers=headers
        )

    @app.exception_handler(RequestValidationError)
    async def request_error(request: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=400,
            content={
                "code": "INVALID_QUERY",
                "message": "invalid request",
                "details": {"errors": [str(e.get("msg", e)) for e in exc.errors()]},
            },
        )

    @app.exception_handler(StarletteHTTPException)
    async def http_error(request: Request, exc: StarletteHTTPException):
        code = "NOT_FOUND" if exc.status_code == 404 else "HTTP_ERROR"
        return JSONResponse(
            status_code=exc.status_code,
            content={"code": code, "message": str(exc.detail), "details": {}},
        )

    @app.exception_handler(Exception)
    async def fallback_error(request: Request, exc: Exception):
        log.exception("unhandled error on %s", request.url.path)
        return JSONResponse(
            status_code=500,
            content={"code": "INTERNAL", "message": "internal error", "details": {}},
        )

    # -- service ----------------------------------------------------------
    @app.get("/health")
    def health():
        try:
            store.get_kv("health.probe")
            store_state = "ok"
        except Exception:
            store_state = "error"
        return {
            "status": "ok" if store_state == "ok" else "degraded",
            "store": store_state,
            "bus": "ok" if not runtime.bus.closed else "error",
        }

    @app.get("/version")
    def version():
        return {"version": __version__}

    # -- ingestion ----------------------------------------------------------
    @app.post("/webhooks/jobs")
    async def webhook_jobs(request: Request):
        body = await request.body()
        status, payload = runtime.ingest.handle_webhook(request.headers, body)
        return JSONResponse(status_code=status, content=payload)

    # -- jobs -----------------------------------------------------------------
    @app.get("/jobs")
    def list_jobs(
        project_id: Optional[str] = None,
        status: Optional[str] = None,
        name: Optional[str] = None,
        ref: Optional[str] = None,
        created_from: Optional[str] = None,
        created_to: Optional[str] = None,
        finished_from: Optional[str] = None,
        finished_to: Optional[str] = None,
        flaky: Optional[bool] = None,
        order_by: str = "created_at",
        descending: bool = True,
        limit: Optional[int] = None,
        offset: int = 0,
    ):
        statuses = None
        if status is not None:
            try:
                statuses = tuple(JobStatus(s) for s in status.split(","))
            except ValueError as exc:
                raise InvalidQuery(f"unknown status {status!r}") from exc
        query = JobQuery(
            project_ids=_parse_scope(project_id),
            statuses=statuses,
            name=name,
            ref=ref,
            created_from=_parse_ts(created_from, "created_from") if created_from else None,
            created_to=_parse_ts(created_to, "created_to") if created_to else None,
            finished_from=_parse_ts(finished_from, "finished_from") if finished_from else None,
            finished_to=_parse_ts(finished_to, "finished_to") if finished_to else None,
            flaky=flaky,
            order_by=order_by,
            descending=descending,
            limit=_parse_limit(limit),
            offset=offset,
        )
        jobs = store.query_jobs(query)
        return {"jobs": [j.to_dict() for j in jobs], "count": len(jobs)}

    @app.get("/jobs/{job_id}")
    def get_job(job_id: int):
        return store.get_job(job_id).to_dict()

    @app.get("/projects")
    def list_projects():
        return {"projects": [p.to_dict() for p in store.list_projects()]}

    # -- metrics ---------------------------------------------------------------
    # "from"/"to" clash with Python keywords, so they are read off the
    # raw query string instead of declared parameters.
    @app.get("/metrics/series")
    def metrics_series(request: Request, interval: str, scope: Optional[str] = None):
        params = request.query_params
        if "from" not in params or "to" not in params:
            raise InvalidQuery("query params 'from' and 'to' are required")
        try:
            iv = MetricInterval(interval)
        except ValueError as exc:
            raise InvalidQuery(f"unknown interval {interval!r}") from exc
        snaps = runtime.metrics.series(
            _parse_scope(scope),
            iv,
            _parse_ts(params["from"], "from"),
            _parse_ts(params["to"], "to"),
        )
        return {"series": [s.to_dict() for s in snaps]}

    # -- alert rules --------------------------------------------------------------
    @app.get("/alerts")
    def list_alerts():
        return {"rules": [r.to_dict() for r in store.list_rules()]}

    @app.post("/alerts", status_code=201)
    async def create_alert(request: Request):
        require_write_token(request)
        data = await request.json()
        if not isinstance(data, dict):
            raise InvalidQuery("alert rule body must be a JSON object")
        data.setdefault("rule_id", new_id())
        rule = AlertRule.from_dict(data)
        store.put_rule(rule)
        return rule.to_dict()

    @app.delete("/alerts/{rule_id}")
    def delete_alert(rule_id: str, request: Request):
        require_write_token(request)
        store.delete_rule(rule_id)
        return {"deleted": rule_id}

    # -- models ----------------------------------------------------------------
    @app.get("/predictions")
    def list_predictions(
        job_id: Optional[int] = None,
        model_kind: Optional[str] = None,
        limit: Optional[int] = None,
    ):
        kind = None
        if model_kind is not None:
            try:
                kind = ModelKind(model_kind)
            except ValueError as exc:
                raise InvalidQuery(f"unknown model kind {model_kind!r}") from exc
        records = store.query_predictions(
            job_id=job_id, model_kind=kind, limit=_parse_limit(limit)
        )
        return {"predictions": [r.to_dict() for r in records]}

    @app.get("/anomalies")
    def list_anomalies(request: Request, limit: Optional[int] = None):
        params = request.query_params
        window_from = _parse_ts(params["from"], "from") if "from" in params else None
        window_to = _parse_ts(params["to"], "to") if "to" in params else None
        records = store.query_predictions(anomalies_only=True)
        if window_from is not None:
            records = [r for r in records if r.predicted_at >= window_from]
        if window_to is not None:
            records = [r for r in records if r.predicted_at < window_to]
        records = records[: _parse_limit(limit)]
        return {"anomalies": [r.to_dict() for r in records]}

    @app.get("/models/snapshots")
    def list_snapshots():
        return {"snapshots": [s.to_dict() for s in runtime.hub.list_snapshots()]}

    @app.get("/models/feature-schema")
    def get_feature_schema():
        return feature_schema()

    # -- what-if ------------------------------------------------------------------
    @app.post("/whatif/evaluate")
    async def whatif_evaluate(request: Request):
        data = await request.json()
        if not isinstance(data, dict):
            raise InvalidQuery("scenario body must be a JSON object")
        scenario = _scenario_from(data)
        return whatif.evaluate(scenario).to_dict()

    @app.post("/whatif/compare")
    async def whatif_compare(request: Request):
        data = await request.json()
        if not isinstance(data, dict) or not isinstance(data.get("scenarios"), list):
            raise InvalidQuery("body must carry a 'scenarios' array")
        scenarios = [_scenario_from(s) for s in data["scenarios"]]
        ranked = whatif.compare(
            scenarios,
            metric=data.get("metric", "failure_probability"),
            direction=data.get("direction", "minimize"),
        )
        return {"ranking": [r.to_dict() for r in ranked]}

    # -- improvement actions ----------------------------------------------------------
    @app.get("/actions")
    def list_actions(status: Optional[str] = None):
        return {"actions": [a.to_dict() for a in store.list_actions(status=status)]}

    @app.post("/actions/{action_id}/approve")
    def approve_action(action_id: str, request: Request):
        require_write_token(request)
        return runtime.improve.approve(action_id).to_dict()

    @app.post("/actions/{action_id}/reject")
    def reject_action(action_id: str, request: Request):
        require_write_token(request)
        return runtime.improve.reject(action_id).to_dict()

    @app.post("/actions/{action_id}/apply")
    def apply_action(action_id: str, request: Request):
        require_write_token(request)
        return runtime.improve.apply(action_id).to_dict()

    ui_dir = _find_ui_dir()
    if ui_dir is not None:
        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app


def _scenario_from(data: dict) -> Scenario:
    try:
        data = dict(data)
        data.setdefault("scenario_id", new_id())
        data.setdefault("label", data["scenario_id"])
        return Scenario.from_dict(data)
    except (KeyError, ValueError, TypeError) as exc:
        raise InvalidQuery(f"bad scenario: {exc}") from exc
