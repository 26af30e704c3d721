"""Record console test fixtures from the twin's HTTP API.

Boots the service with the simulator adapter, streams a few hours of
generated history through the real webhook endpoint, then saves selected
responses verbatim under tests/fixtures/. Rerun after API changes:

    python3 tests/record_fixtures.py
"""

import json
import math
import pathlib

from fastapi.testclient import TestClient

from buildtwin.adapters.simulator import SimConfig, SimProjectConfig, SimulatedPlatform
from buildtwin.api import create_app
from buildtwin.config import AdapterConfig, AppConfig, IngestConfig, ServiceConfig, StoreConfig
from buildtwin.runtime import Runtime

FIXTURES = pathlib.Path(__file__).parent / "fixtures"
TOKEN = "fixture-hook-token"


def save(name: str, payload) -> None:
    path = FIXTURES / f"{name}.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"wrote {path.name}")


def main() -> None:
    FIXTURES.mkdir(exist_ok=True)
    cfg = AppConfig(
        store=StoreConfig(url="memory://"),
        service=ServiceConfig(alert_interval_seconds=3600.0),
        ingest=IngestConfig(webhook_token=TOKEN, refresh_enabled=False),
        adapter=AdapterConfig(kind="simulator"),
    )
    runtime = Runtime(cfg, synchronous=True)
    client = TestClient(create_app(runtime), raise_server_exceptions=False)

    source = SimulatedPlatform(
        SimConfig(
            seed=1207,
            projects=(
                SimProjectConfig(
                    project_id=1,
                    path="platform/build-core",
                    arrival_rate_per_second=0.03,
                    duration_log_mean=math.log(650.0),
                    duration_log_sigma=0.35,
                    p_fail=0.3,
                    p_flaky=0.6,
                    max_retries=1,
                ),
                SimProjectConfig(
                    project_id=2,
                    path="platform/docs-site",
                    arrival_rate_per_second=0.01,
                    duration_log_mean=math.log(120.0),
                    p_fail=0.1,
                ),
            ),
            webhook_token=TOKEN,
        ),
        horizon_seconds=3 * 3600.0,
    )
    for i, delivery in enumerate(source.all_deliveries()):
        res = client.post(
            "/webhooks/jobs",
            content=json.dumps(delivery.body).encode(),
            headers=dict(delivery.headers),
        )
        assert res.status_code == 202, res.text
        if i % 100 == 0:
            runtime.drain()
    runtime.drain()

    # Two hand-rolled extreme jobs so the anomaly feed has entries.
    for job_id, duration in ((900001, 9000.0), (900002, 7000.0)):
        base = {
            "object_kind": "build",
            "build_id": job_id,
            "project_id": 1,
            "pipeline_id": job_id,
            "build_name": "build",
            "ref": "main",
            "sha": "feeddead",
            "build_created_at": "2025-06-01T02:30:00Z",
        }
        running = dict(base, build_status="running", build_started_at="2025-06-01T02:30:05Z")
        done = dict(
            running,
            build_status="success",
            build_finished_at="2025-06-01T05:00:05Z",
            build_duration=duration,
        )
        for body in (running, done):
            res = client.post(
                "/webhooks/jobs",
                content=json.dumps(body).encode(),
                headers={"X-Gitlab-Token": TOKEN},
            )
            assert res.status_code == 202, res.text
        runtime.drain()

    tripping = client.post(
        "/alerts",
        json={
            "metric": "failure_ratio",
            "scope": None,
            "interval": "hourly",
            "comparator": ">",
            "threshold": 0.2,
        },
    )
    assert tripping.status_code == 201, tripping.text
    quiet = client.post(
        "/alerts",
        json={
            "metric": "mean_duration",
            "scope": None,
            "interval": "hourly",
            "comparator": ">",
            "threshold": 5000.0,
        },
    )
    assert quiet.status_code == 201, quiet.text

    save("health", client.get("/health").json())
    save("projects", client.get("/projects").json())
    save(
        "metrics_series_hourly",
        client.get(
            "/metrics/series",
            params={
                "interval": "hourly",
                "from": "2025-06-01T00:00:00Z",
                "to": "2025-06-01T03:00:00Z",
            },
        ).json(),
    )
    save(
        "metrics_series_empty",
        client.get(
            "/metrics/series",
            params={
                "interval": "hourly",
                "from": "2024-01-01T00:00:00Z",
                "to": "2024-01-01T03:00:00Z",
            },
        ).json(),
    )
    save("alerts", client.get("/alerts").json())
    save("feature_schema", client.get("/models/feature-schema").json())
    save("snapshots", client.get("/models/snapshots").json())

    scenario = {
        "label": "slower-queue",
        "feature_deltas": {
            "queued_duration": {"op": "add", "value": 0.4},
            "recent_failure_rate": {"op": "add", "value": 0.2},
        },
        "job_sample_spec": {"last_n": 100},
    }
    identity = {"label": "identity", "feature_deltas": {}, "job_sample_spec": {"last_n": 100}}
    evaluated = client.post("/whatif/evaluate", json=scenario)
    assert evaluated.status_code == 200, evaluated.text
    save("whatif_evaluate", evaluated.json())
    zero = client.post("/whatif/evaluate", json=identity)
    assert zero.status_code == 200, zero.text
    save("whatif_evaluate_zero", zero.json())
    compared = client.post(
        "/whatif/compare", json={"scenarios": [scenario, identity]}
    )
    assert compared.status_code == 200, compared.text
    save("whatif_compare", compared.json())

    actions = client.get("/actions").json()["actions"]
    proposed = [a for a in actions if a["status"] == "proposed"]
    assert len(proposed) >= 3, f"need >=3 proposed actions, got {len(proposed)}"
    approved = client.post(f"/actions/{proposed[0]['action_id']}/approve")
    assert approved.status_code == 200, approved.text
    save("action_approve", approved.json())
    applied = client.post(f"/actions/{proposed[0]['action_id']}/apply")
    assert applied.status_code == 200, applied.text
    save("action_apply", applied.json())
    rejected = client.post(f"/actions/{proposed[1]['action_id']}/reject")
    assert rejected.status_code == 200, rejected.text
    save("action_reject", rejected.json())
    save("actions", client.get("/actions").json())

    anomalies = client.get("/anomalies", params={"limit": 20}).json()
    assert anomalies["anomalies"], "expected at least one anomaly"
    save("anomalies", anomalies)

    runtime.stop()
    print("done")


if __name__ == "__main__":
    main()
