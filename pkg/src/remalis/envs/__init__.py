"""Simulated cooperative task environments."""
from .base import (
    ConfigError,
    EnvStep,
    WorldInfo,
    alignment,
    coordination_time,
    generate_mission,
)
from .traffic import TrafficConfig, TrafficWorld
from .web import WebConfig, WebWorld


def make_env(kind: str, tier: str, n_agents: int = 3, horizon: int = 30, **kw):
    if kind == "traffic":
        return TrafficWorld(TrafficConfig(tier=tier, n_agents=n_agents,
                                          horizon=horizon, **kw))
    if kind == "web":
        return WebWorld(WebConfig(tier=tier, n_agents=n_agents,
                                  horizon=horizon, **kw))
    raise ConfigError(f"unknown environment kind {kind!r}")


__all__ = [
    "ConfigError", "EnvStep", "WorldInfo", "alignment", "coordination_time",
    "generate_mission", "TrafficConfig", "TrafficWorld", "WebConfig",
    "WebWorld", "make_env",
]
