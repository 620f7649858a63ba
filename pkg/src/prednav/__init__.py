"""Predictive-occupancy-map navigation: simulator, predictor, controller."""

from .grid import Cell, OccupancyGrid, PlanningMap
from .sensor import Environment
from .trajopt import ControlInput, RobotState, Trajectory

__all__ = [
    "Cell",
    "ControlInput",
    "Environment",
    "OccupancyGrid",
    "PlanningMap",
    "RobotState",
    "Trajectory",
]
__version__ = "0.1.0"
