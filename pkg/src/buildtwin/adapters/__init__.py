from .base import ActualTwinReader, ActualTwinWriter
from .gitlab import GitLabReader, GitLabWriter
from .simulator import (
    RegimeChange,
    SimConfig,
    SimProjectConfig,
    SimulatedPlatform,
    simulate,
)

__all__ = [
    "ActualTwinReader",
    "ActualTwinWriter",
    "GitLabReader",
    "GitLabWriter",
    "RegimeChange",
    "SimConfig",
    "SimProjectConfig",
    "SimulatedPlatform",
    "simulate",
]
