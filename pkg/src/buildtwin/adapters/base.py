"""Actual-twin boundary contracts.

Readers return raw platform-shaped job records (dicts mirroring the
GitLab jobs API); translating them into domain types is the ingest
module's job. Writers push approved improvements back to the platform.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from datetime import datetime
from typing import Any, Optional

from ..errors import InvalidQuery

MAX_PER_PAGE = 100


def check_page_args(page: int, per_page: int) -> None:
    if page < 1:
        raise InvalidQuery("page must be >= 1")
    if not 1 <= per_page <= MAX_PER_PAGE:
        raise InvalidQuery(f"per_page must be in [1, {MAX_PER_PAGE}]")


class ActualTwinReader(ABC):
    @abstractmethod
    def list_projects(self) -> list[dict[str, Any]]:
        """Raw project records visible to the adapter's credentials."""

    @abstractmethod
    def list_jobs(
        self,
        project_id: int,
        page: int,
        per_page: int = MAX_PER_PAGE,
        updated_after: Optional[datetime] = None,
    ) -> list[dict[str, Any]]:
        """One page of raw job records, newest first.

        With updated_after set, only records changed strictly after the
        cutoff are returned. Page sizes may then run short of per_page;
        the union over all pages is exactly the newer records, still
        newest first and duplicate-free.
        """

    @abstractmethod
    def get_job(self, project_id: int, job_id: int) -> dict[str, Any]:
        """Raw record for one job; NotFound if the platform lacks it."""


class ActualTwinWriter(ABC):
    """Write-back surface; every call returns the platform's response id."""

    @abstractmethod
    def set_ci_variable(self, project_id: int, key: str, value: str) -> str:
        ...

    @abstractmethod
    def retry_job(self, project_id: int, job_id: int) -> str:
        ...

    @abstractmethod
    def upsert_file(self, project_id: int, path: str, content: str, message: str) -> str:
        ...
