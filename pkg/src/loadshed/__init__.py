"""Learning decentralised optimal load-shedding rules from local grid measurements.

The pipeline: parse a grid case (:mod:`loadshed.casefile`), simulate
post-contingency operating points (:mod:`loadshed.powerflow`), solve the DC
optimal load-shedding problem for nodal multipliers (:mod:`loadshed.ols`),
train one small network per load bus on local measurements
(:mod:`loadshed.learning`), and check which contingencies local data can
tell apart (:mod:`loadshed.identifiability`).
"""

from .casefile import load_case, parse_case
from .network import FlexibilityCost, NetworkCase
from .ols import recover_shedding, solve_case
from .powerflow import Contingency, solve_ac, solve_dc

__all__ = [
    "Contingency", "FlexibilityCost", "NetworkCase", "load_case", "parse_case",
    "recover_shedding", "solve_ac", "solve_case", "solve_dc",
]
__version__ = "0.1.0"
