"""Numerical toolkit for symplectic twist maps on T*T^d.

Generating functions, the twist map and its tangent, fixed-endpoint action
minimization, discrete weak KAM quantities and invariant Lagrangian graphs.
"""
from __future__ import annotations

from .action import f_profile, min_action, min_cycle, minimize_endpoints
from .dynamics import PhasePoint, PhaseRegion, conjugate_scan, green_slope, orbit, shift, twist_map
from .errors import TwistKamError
from .genfun import GeneratingFunction, audit, make_family
from .grids import LagrangianGraph, TorusGrid
from .invariant_graphs import build_graph, compare_graphs, foliation_section, graph_cohomology, periodic_fiber
from .weakkam import alpha_profile, aubry_partner, dual_aubry_graph, mane, potential_audits, stilde

__version__ = "0.1.0"

__all__ = [
    "GeneratingFunction", "LagrangianGraph", "PhasePoint", "PhaseRegion", "TorusGrid", "TwistKamError",
    "alpha_profile", "aubry_partner", "audit", "build_graph", "compare_graphs", "conjugate_scan",
    "dual_aubry_graph", "f_profile", "foliation_section", "graph_cohomology", "green_slope", "make_family",
    "mane", "min_action", "min_cycle", "minimize_endpoints", "orbit", "periodic_fiber", "potential_audits",
    "shift", "stilde", "twist_map",
]
