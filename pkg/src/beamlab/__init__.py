"""Simulation and spectral verification of a disturbance-rejecting tip-mass beam controller."""

from .core import DisturbanceSpec, Grid, Params, make_grid
from .dynamics import Scenario, published_scenario, run

__all__ = ["DisturbanceSpec", "Grid", "Params", "Scenario", "make_grid", "published_scenario", "run"]
__version__ = "0.1.0"
