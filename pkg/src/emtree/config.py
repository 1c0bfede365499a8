"""Builder configuration: depth, per-level lifetimes, and tuning factors."""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

from .clock import DAY, HOUR, MINUTE, Duration

# Default lifetimes: 15 minutes for raw observations, one hour for events,
# one day for goal-level nodes; higher levels reuse the goal lifetime and the
# doubling factor provides the growth.
DEFAULT_LIFETIMES: tuple[Duration, ...] = (15 * MINUTE, HOUR, DAY, DAY)

# Actions that close a goal; anything unknown counts as non-interaction.
DEFAULT_INTERACTION_ACTIONS = frozenset(
    {
        "Pickup", "Place", "PutDown", "Open", "Close", "ToggleOn", "ToggleOff",
        "Slice", "Pour", "Clean", "Wash", "Load", "Unload", "Handover",
        "Receive", "MeetPerson", "Dialog",
    }
)


@dataclass(frozen=True)
class BuilderConfig:
    max_depth: int = 8
    lifetimes: tuple[Duration, ...] = DEFAULT_LIFETIMES
    cluster_gap_factor: float = 10.0
    visibility_window_factor: float = 3.0
    push_prevention_factor: float = 5.0
    interaction_actions: frozenset[str] = DEFAULT_INTERACTION_ACTIONS
    rule_based_low_levels: bool = True

    def __post_init__(self):
        if self.max_depth < 3:
            raise ValueError("max_depth must be at least 3")
        if not self.lifetimes or any(dt <= 0 for dt in self.lifetimes):
            raise ValueError("all lifetimes must be positive")

    def lifetime(self, level: int) -> Duration:
        """Default lifetime for a level; the last entry covers higher levels."""
        return self.lifetimes[min(level, len(self.lifetimes) - 1)]

    @classmethod
    def from_dict(cls, data: dict) -> "BuilderConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in data.items() if k in known}
        if "lifetimes" in kwargs:
            kwargs["lifetimes"] = tuple(int(v) for v in kwargs["lifetimes"])
        if "interaction_actions" in kwargs:
            kwargs["interaction_actions"] = frozenset(kwargs["interaction_actions"])
        return cls(**kwargs)


def load_config_file(path: str | Path) -> dict:
    """Parse a JSON or YAML config file into a plain dict."""
    text = Path(path).read_text(encoding="utf-8")
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        return yaml.safe_load(text) or {}
    return json.loads(text)
