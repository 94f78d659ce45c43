"""Robust adaptive tube MPC with online set-membership identification for a
time-varying jammed-hinge plant, plus the simulation harness around it."""

from .plant import PlantConfig, TruthSchedule
from .polytope import Polytope, solve_lp

__all__ = ["PlantConfig", "TruthSchedule", "Polytope", "solve_lp"]
__version__ = "0.1.0"
