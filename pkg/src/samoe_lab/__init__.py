"""Desk-scale lab for scene-adaptive expert merging in flow-matching planners."""

from .numerics import Rng
from .planner import Planner, PlannerConfig

__all__ = ["Planner", "PlannerConfig", "Rng"]
__version__ = "0.1.0"
