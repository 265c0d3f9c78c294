"""Driver trait learning and personalized HMI intervention in a highway merge simulator."""
from __future__ import annotations

__version__ = "0.1.0"

from .cognitive import ARCHETYPES, AIAction, DriverProfile, HumanAction, archetype_profile
from .env import HMIwayEnv, RewardBreakdown, ScenarioConfig

__all__ = ["ARCHETYPES", "AIAction", "DriverProfile", "HMIwayEnv", "HumanAction",
           "RewardBreakdown", "ScenarioConfig", "archetype_profile", "__version__"]
