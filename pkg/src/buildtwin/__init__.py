"""Digital-twin toolkit for CI build pipelines.

Ingests build-job telemetry from the CI platform (webhooks, backfill,
scheduled refresh), keeps an embedded queryable store, learns online
models for duration/failure/flakiness, computes windowed metrics with
alerting, answers what-if scenarios, and proposes improvement actions
that can be applied back to the platform after approval.
"""

__version__ = "0.1.0"
