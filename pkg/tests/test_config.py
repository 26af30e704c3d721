"""Configuration loading: TOML file, environment overrides, validation."""

from datetime import datetime, timezone

import pytest

from buildtwin.adapters.simulator import SIM_EPOCH
from buildtwin.config import ENV_MAP, AppConfig, apply_env, from_dict, load, load_file
from buildtwin.errors import InvalidConfig
from buildtwin.model import ActionKind

FULL_TOML = """
[store]
url = "sqlite:///tmp/twin.db"

[service]
host = "0.0.0.0"
port = 9000
api_token = "svc-token"
cors_origins = ["http://console.local"]
alert_interval_seconds = 10.0

[ingest]
webhook_token = "hook-token"
refresh_interval_seconds = 15.0
refresh_enabled = false
max_history_jobs = 500
page_size = 50
deadletter_path = "dead.jsonl"

[adapter]
kind = "simulator"

[improve]
long_build_seconds = 900.0
auto_approve = ["enable_cache"]

[simulator]
seed = 11
webhook_token = "sim-hook"
start_time = "2025-01-01T00:00:00Z"

[[simulator.projects]]
project_id = 7
p_fail = 0.2
p_flaky = 0.5
job_names = ["build", "test"]

[[simulator.regime_changes]]
at_seconds = 3600.0
duration_factor = 2.0
project_id = 7
"""


def write_toml(tmp_path, text):
    path = tmp_path / "twin.toml"
    path.write_text(text)
    return str(path)


def test_defaults_without_file_or_env():
    cfg = load(None, env={})
    assert cfg == AppConfig()
    assert cfg.store.url == "buildtwin.db"
    assert cfg.adapter.kind == "gitlab"
    assert cfg.service.api_token is None
    assert cfg.ingest.refresh_interval_seconds == 60.0
    assert cfg.simulator is None


def test_full_file_parses_every_section(tmp_path):
    cfg = load_file(write_toml(tmp_path, FULL_TOML))
    assert cfg.store.url == "sqlite:///tmp/twin.db"
    assert cfg.service.port == 9000
    assert cfg.service.cors_origins == ("http://console.local",)
    assert cfg.ingest.refresh_enabled is False
    assert cfg.ingest.page_size == 50
    assert cfg.adapter.kind == "simulator"
    assert cfg.improve.long_build_seconds == 900.0
    assert cfg.improve.auto_approve == frozenset({ActionKind.ENABLE_CACHE})
    sim = cfg.simulator
    assert sim.seed == 11
    assert sim.webhook_token == "sim-hook"
    assert sim.start_time == datetime(2025, 1, 1, tzinfo=timezone.utc)
    assert sim.projects[0].project_id == 7
    assert sim.projects[0].job_names == ("build", "test")
    assert sim.regime_changes[0].duration_factor == 2.0


def test_sim_start_time_defaults_to_epoch():
    cfg = from_dict({"simulator": {"projects": [{"project_id": 1}]}})
    assert cfg.simulator.start_time == SIM_EPOCH


def test_unknown_section_rejected():
    with pytest.raises(InvalidConfig, match="telemetry"):
        from_dict({"telemetry": {}})


def test_unknown_key_in_section_rejected():
    with pytest.raises(InvalidConfig, match="portt"):
        from_dict({"service": {"portt": 8000}})


def test_unknown_adapter_kind_rejected():
    with pytest.raises(InvalidConfig, match="jenkins"):
        from_dict({"adapter": {"kind": "jenkins"}})


def test_unknown_auto_approve_action_rejected():
    with pytest.raises(InvalidConfig):
        from_dict({"improve": {"auto_approve": ["reboot_everything"]}})


def test_invalid_simulator_settings_rejected():
    with pytest.raises(InvalidConfig):
        from_dict({"simulator": {"projects": [{"project_id": 1, "p_fail": 2.0}]}})
    with pytest.raises(InvalidConfig):
        from_dict({"simulator": {"projects": [{"project_id": 1, "nope": True}]}})
    with pytest.raises(InvalidConfig):
        from_dict({"simulator": {"projects": [
            {"project_id": 1}, {"project_id": 1},
        ]}})


def test_malformed_toml_names_the_file(tmp_path):
    path = write_toml(tmp_path, "[store\nurl =")
    with pytest.raises(InvalidConfig, match="twin.toml"):
        load_file(path)


def test_env_overrides_every_mapped_variable():
    env = {
        "DATA_REFRESH_INTERVAL": "7.5",
        "CBDT_WEBHOOK_TOKEN": "env-hook",
        "CBDT_MAX_HISTORY_JOBS": "250",
        "CBDT_AT_BASE_URL": "https://gl.example",
        "CBDT_AT_TOKEN": "env-at",
        "CBDT_API_TOKEN": "env-api",
    }
    assert set(env) == set(ENV_MAP)
    cfg = apply_env(AppConfig(), env)
    assert cfg.ingest.refresh_interval_seconds == 7.5
    assert cfg.ingest.webhook_token == "env-hook"
    assert cfg.ingest.max_history_jobs == 250
    assert cfg.adapter.base_url == "https://gl.example"
    assert cfg.adapter.token == "env-at"
    assert cfg.service.api_token == "env-api"


def test_env_wins_over_file(tmp_path):
    path = write_toml(tmp_path, FULL_TOML)
    cfg = load(path, env={"CBDT_WEBHOOK_TOKEN": "env-hook"})
    assert cfg.ingest.webhook_token == "env-hook"
    # untouched file values survive
    assert cfg.ingest.max_history_jobs == 500


def test_blank_env_values_are_ignored():
    cfg = apply_env(AppConfig(), {"CBDT_API_TOKEN": ""})
    assert cfg.service.api_token is None


def test_env_cast_failure_is_invalid_config():
    with pytest.raises(InvalidConfig, match="DATA_REFRESH_INTERVAL"):
        apply_env(AppConfig(), {"DATA_REFRESH_INTERVAL": "fast"})


def test_apply_env_does_not_mutate_input():
    base = AppConfig()
    apply_env(base, {"CBDT_API_TOKEN": "x"})
    assert base.service.api_token is None
