"""GitLab-compatible HTTP adapter.

Covers exactly the surfaces the twin needs: project lookup, job listing
with pagination, single-job fetch, CI variables, job retry, and
single-file upserts. Auth is a PRIVATE-TOKEN header.
"""

from __future__ import annotations

import logging
from datetime import datetime
from typing import Any, Optional
from urllib.parse import quote

import httpx

from ..errors import ActualTwinUnreachable, NotFound, RateLimited, WriterRejected
from ..model import decode_ts
from .base import ActualTwinReader, ActualTwinWriter, check_page_args

logger = logging.getLogger(__name__)


def _retry_after(response: httpx.Response) -> Optional[float]:
    raw = response.headers.get("Retry-After")
    try:
        return None if raw is None else float(raw)
    except ValueError:
        return None


class _GitLabClient:
    def __init__(
        self,
        base_url: str,
        token: str,
        timeout: float = 30.0,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        self._http = httpx.Client(
            base_url=base_url.rstrip("/"),
            headers={"PRIVATE-TOKEN": token},
            timeout=timeout,
            transport=transport,
        )

    def request(self, method: str, path: str, **kw) -> httpx.Response:
        try:
            response = self._http.request(method, path, **kw)
        except httpx.HTTPError as exc:
            raise ActualTwinUnreachable(f"{method} {path}: {exc}") from exc
        if response.status_code == 429:
            raise RateLimited(
                f"{method} {path} rate limited", retry_after=_retry_after(response)
            )
        return response

    def close(self) -> None:
        self._http.close()


def _record_updated_at(record: dict[str, Any]) -> Optional[datetime]:
    for key in ("updated_at", "finished_at", "started_at", "created_at"):
        value = record.get(key)
        if value:
            return decode_ts(value)
    return None


class GitLabReader(ActualTwinReader):
    def __init__(
        self,
        base_url: str,
        token: str,
        timeout: float = 30.0,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        self._client = _GitLabClient(base_url, token, timeout, transport)

    def close(self) -> None:
        self._client.close()

    def list_projects(self) -> list[dict[str, Any]]:
        response = self._client.request(
            "GET", "/api/v4/projects", params={"membership": True, "per_page": 100}
        )
        if response.status_code != 200:
            raise ActualTwinUnreachable(
                f"project listing failed with {response.status_code}"
            )
        return response.json()

    def list_jobs(
        self,
        project_id: int,
        page: int,
        per_page: int = 100,
        updated_after: Optional[datetime] = None,
    ) -> list[dict[str, Any]]:
        check_page_args(page, per_page)
        response = self._client.request(
            "GET",
            f"/api/v4/projects/{project_id}/jobs",
            params={"page": page, "per_page": per_page},
        )
        if response.status_code == 404:
            raise NotFound(f"project {project_id} not found")
        if response.status_code != 200:
            raise ActualTwinUnreachable(
                f"job listing failed with {response.status_code}"
            )
        records = response.json()
        if updated_after is not None:
            # the platform's job list has no server-side updated filter;
            # drop stale records here, newest-first order is preserved
            records = [
                r
                for r in records
                if (ts := _record_updated_at(r)) is not None and ts > updated_after
            ]
        return records

    def get_job(self, project_id: int, job_id: int) -> dict[str, Any]:
        response = self._client.request(
            "GET", f"/api/v4/projects/{project_id}/jobs/{job_id}"
        )
        if response.status_code == 404:
            raise NotFound(f"job {job_id} not found in project {project_id}")
        if response.status_code != 200:
            raise ActualTwinUnreachable(f"job fetch failed with {response.status_code}")
        return response.json()


class GitLabWriter(ActualTwinWriter):
    def __init__(
        self,
        base_url: str,
        token: str,
        timeout: float = 30.0,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        self._client = _GitLabClient(base_url, token, timeout, transport)
        self._default_branch: dict[int, str] = {}

    def close(self) -> None:
        self._client.close()

    def _branch(self, project_id: int) -> str:
        if project_id not in self._default_branch:
            response = self._client.request("GET", f"/api/v4/projects/{project_id}")
            if response.status_code != 200:
                raise WriterRejected(
                    f"cannot resolve default branch for project {project_id}"
                )
            self._default_branch[project_id] = response.json().get(
                "default_branch", "main"
            )
        return self._default_branch[project_id]

    def set_ci_variable(self, project_id: int, key: str, value: str) -> str:
        body = {"key": key, "value": value}
        response = self._client.request(
            "POST", f"/api/v4/projects/{project_id}/variables", json=body
        )
        if response.status_code == 400:
            # variable exists, switch to update
            response = self._client.request(
                "PUT",
                f"/api/v4/projects/{project_id}/variables/{quote(key, safe='')}",
                json={"value": value},
            )
        if response.status_code not in (200, 201):
            raise WriterRejected(
                f"set_ci_variable {key} rejected with {response.status_code}",
                details={"body": response.text[:500]},
            )
        return f"var:{key}"

    def retry_job(self, project_id: int, job_id: int) -> str:
        response = self._client.request(
            "POST", f"/api/v4/projects/{project_id}/jobs/{job_id}/retry"
        )
        if response.status_code not in (200, 201):
            raise WriterRejected(
                f"retry of job {job_id} rejected with {response.status_code}",
                details={"body": response.text[:500]},
            )
        new_id = response.json().get("id")
        return f"job:{new_id}"

    def upsert_file(self, project_id: int, path: str, content: str, message: str) -> str:
        url = f"/api/v4/projects/{project_id}/repository/files/{quote(path, safe='')}"
        body = {
            "branch": self._branch(project_id),
            "content": content,
            "commit_message": message,
        }
        response = self._client.request("PUT", url, json=body)
        if response.status_code in (400, 404):
            # file absent, create instead of update
            response = self._client.request("POST", url, json=body)
        if response.status_code not in (200, 201):
            raise WriterRejected(
                f"file upsert {path} rejected with {response.status_code}",
                details={"body": response.text[:500]},
            )
        return f"file:{path}"
