"""Location estimation from pairwise line measurements by semidefinite relaxation."""

from .core import (CostOperators, DegenerateEdgeError, Formation, InputError, LocationSet,
                   MeasurementGraph, SolverError, build_cost_operators, formation_from_locations,
                   line_projection, load_graph, make_rng, save_graph)
from .rigidity import RigidityReport, extract_max_rigid_components, test_parallel_rigidity
from .sdr import GramSolution, SdrConfig, adm_solve, least_squares_solve, round_solution, solve

__all__ = [
    "CostOperators", "DegenerateEdgeError", "Formation", "GramSolution", "InputError", "LocationSet",
    "MeasurementGraph", "RigidityReport", "SdrConfig", "SolverError", "adm_solve",
    "build_cost_operators", "extract_max_rigid_components", "formation_from_locations",
    "least_squares_solve", "line_projection", "load_graph", "make_rng", "round_solution",
    "save_graph", "solve", "test_parallel_rigidity",
]
__version__ = "0.1.0"
