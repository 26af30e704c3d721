"""Exception taxonomy shared by all buildtwin modules.

Every error that crosses a module boundary (and therefore the HTTP API)
carries a stable machine-readable ``code`` so the CLI and console can
surface it in the uniform envelope {code, message, details}.
"""

from __future__ import annotations

from typing import Any


class BuildTwinError(Exception):
    """Base class for all domain errors."""

    code = "INTERNAL"
    http_status = 500

    def __init__(self, message: str, details: dict[str, Any] | None = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def envelope(self) -> dict[str, Any]:
        return {"code": self.code, "message": self.message, "details": self.details}


class ValidationError(BuildTwinError):
    code = "VALIDATION_ERROR"
    http_status = 422


class InvalidQuery(BuildTwinError):
    code = "INVALID_QUERY"
    http_status = 400


class NotFound(BuildTwinError):
    code = "NOT_FOUND"
    http_status = 404


class StorageUnavailable(BuildTwinError):
    code = "STORAGE_UNAVAILABLE"
    http_status = 503


class BusUnavailable(BuildTwinError):
    code = "BUS_UNAVAILABLE"
    http_status = 503


class DuplicateSubscriber(BuildTwinError):
    code = "DUPLICATE_SUBSCRIBER"
    http_status = 409


class UnparseableRecord(BuildTwinError):
    code = "UNPARSEABLE_RECORD"
    http_status = 400


class ActualTwinUnreachable(BuildTwinError):
    code = "ACTUAL_TWIN_UNREACHABLE"
    http_status = 502


class RateLimited(BuildTwinError):
    code = "RATE_LIMITED"
    http_status = 429

    def __init__(self, message: str, retry_after: float | None = None, **kw):
        super().__init__(message, **kw)
        self.retry_after = retry_after


class UnalignedWindow(BuildTwinError):
    code = "UNALIGNED_WINDOW"
    http_status = 400


class InvertedRange(BuildTwinError):
    code = "INVERTED_RANGE"
    http_status = 400


class SchemaMismatch(BuildTwinError):
    code = "SCHEMA_MISMATCH"
    http_status = 422


class MissingActual(BuildTwinError):
    code = "MISSING_ACTUAL"
    http_status = 422


class EmptySample(BuildTwinError):
    code = "EMPTY_SAMPLE"
    http_status = 422


class UnknownFeature(BuildTwinError):
    code = "UNKNOWN_FEATURE"
    http_status = 422


class IllegalTransition(BuildTwinError):
    code = "ILLEGAL_TRANSITION"
    http_status = 409


class WriterRejected(BuildTwinError):
    code = "WRITER_REJECTED"
    http_status = 502


class InvalidConfig(BuildTwinError):
    code = "INVALID_CONFIG"
    http_status = 400


class Unauthorized(BuildTwinError):
    code = "UNAUTHORIZED"
    http_status = 401
