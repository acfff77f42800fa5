"""Orthogonal AMP for multi-measurement-vector / multi-transform systems."""

__version__ = "0.1.0"

from .engine import Constraint, Port, RunConfig, SystemGraph, run
from .gs_model import EstimateMessage, GsParams, gs_fit
from .linops import SourceSpec, permuted_dft, sample_haar
from .relay_scenario import RelayConfig, build_relay_graph, run_method
from .state_evolution import run_se
