"""Service configuration: TOML file, environment, then flag overrides.

Precedence is flags > environment > file > defaults. Environment names
are fixed: DATA_REFRESH_INTERVAL, CBDT_WEBHOOK_TOKEN,
CBDT_MAX_HISTORY_JOBS, CBDT_AT_BASE_URL, CBDT_AT_TOKEN, CBDT_API_TOKEN.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from typing import Any, Mapping, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .errors import InvalidConfig
from .adapters.simulator import RegimeChange, SimConfig, SimProjectConfig
from .improve import ImproveConfig
from .model import ActionKind, decode_ts


@dataclass(frozen=True)
class StoreConfig:
    url: str = "buildtwin.db"


@dataclass(frozen=True)
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8000
    api_token: Optional[str] = None
    cors_origins: tuple[str, ...] = ("http://localhost:5173",)
    alert_interval_seconds: float = 30.0


@dataclass(frozen=True)
class IngestConfig:
    webhook_token: Optional[str] = None
    refresh_interval_seconds: float = 60.0
    refresh_enabled: bool = True
    max_history_jobs: int = 1000
    page_size: int = 100
    deadletter_path: Optional[str] = None


@dataclass(frozen=True)
class AdapterConfig:
    kind: str = "gitlab"  # "gitlab" | "simulator"
    base_url: Optional[str] = None
    token: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("gitlab", "simulator"):
            raise InvalidConfig(f"unknown adapter kind {self.kind!r}")


@dataclass(frozen=True)
class AppConfig:
    store: StoreConfig = field(default_factory=StoreConfig)
    service: ServiceConfig = field(default_factory=ServiceConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    improve: ImproveConfig = field(default_factory=ImproveConfig)
    simulator: Optional[SimConfig] = None


ENV_MAP = {
    "DATA_REFRESH_INTERVAL": ("ingest", "refresh_interval_seconds", float),
    "CBDT_WEBHOOK_TOKEN": ("ingest", "webhook_token", str),
    "CBDT_MAX_HISTORY_JOBS": ("ingest", "max_history_jobs", int),
    "CBDT_AT_BASE_URL": ("adapter", "base_url", str),
    "CBDT_AT_TOKEN": ("adapter", "token", str),
    "CBDT_API_TOKEN": ("service", "api_token", str),
}


def _build_section(cls, data: Mapping[str, Any]):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise InvalidConfig(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    coerced = dict(data)
    try:
        if cls is ServiceConfig and "cors_origins" in coerced:
            coerced["cors_origins"] = tuple(coerced["cors_origins"])
        if cls is ImproveConfig and "auto_approve" in coerced:
            coerced["auto_approve"] = frozenset(
                ActionKind(k) for k in coerced["auto_approve"]
            )
        return cls(**coerced)
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(str(exc)) from exc


def parse_sim_config(data: Mapping[str, Any]) -> SimConfig:
    """Build a validated simulator config from a parsed TOML table."""
    try:
        projects = tuple(
            SimProjectConfig(
                **{
                    **p,
                    "job_names": tuple(p.get("job_names", ("build",))),
                }
            )
            for p in data.get("projects", [])
        )
        changes = tuple(
            RegimeChange(**c) for c in data.get("regime_changes", [])
        )
        extra = {}
        if "start_time" in data:
            extra["start_time"] = decode_ts(data["start_time"])
        cfg = SimConfig(
            seed=int(data.get("seed", 0)),
            projects=projects,
            webhook_token=str(data.get("webhook_token", "sim-token")),
            regime_changes=changes,
            **extra,
        )
    except (TypeError, ValueError, KeyError) as exc:
        raise InvalidConfig(f"bad simulator config: {exc}") from exc
    cfg.validate()
    return cfg


def from_dict(data: Mapping[str, Any]) -> AppConfig:
    sections = {
        "store": StoreConfig,
        "service": ServiceConfig,
        "ingest": IngestConfig,
        "adapter": AdapterConfig,
        "improve": ImproveConfig,
    }
    unknown = sorted(set(data) - set(sections) - {"simulator"})
    if unknown:
        raise InvalidConfig(f"unknown config sections: {', '.join(unknown)}")
    kwargs: dict[str, Any] = {}
    for name, cls in sections.items():
        if name in data:
            kwargs[name] = _build_section(cls, data[name])
    if "simulator" in data:
        kwargs["simulator"] = parse_sim_config(data["simulator"])
    return AppConfig(**kwargs)


def load_file(path: str) -> AppConfig:
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise InvalidConfig(f"{path}: {exc}") from exc
    return from_dict(data)


def apply_env(cfg: AppConfig, env: Optional[Mapping[str, str]] = None) -> AppConfig:
    env = os.environ if env is None else env
    for var, (section, attr, cast) in ENV_MAP.items():
        raw = env.get(var)
        if raw is None or raw == "":
            continue
        try:
            value = cast(raw)
        except ValueError as exc:
            raise InvalidConfig(f"{var}={raw!r}: {exc}") from exc
        cfg = replace(cfg, **{section: replace(getattr(cfg, section), **{attr: value})})
    return cfg


def load(
    path: Optional[str] = None, env: Optional[Mapping[str, str]] = None
) -> AppConfig:
    cfg = load_file(path) if path else AppConfig()
    return apply_env(cfg, env)
