"""
nodemd - node-aware ghost exchange for neural-network molecular dynamics
"""

__version__ = "1.0.0"
__author__ = "nodemd developers"

from .config import NodeMDConfig, parse_config
from .engine import RunConfig, RunResult, Simulation, ThermoRecord, evaluate_global, rdf
from .geometry import RankTopology, SimBox, SubBox, decompose, ghost_count_model
from .neighbor import CutoffSpec, NeighborList, build_neighbor_list
from .netsim import Cluster, CostModel, SimMetrics, build_cluster
from .potential import ModelParams, compute_energy_forces, init_params, load_params, save_params
from .schemes import CommPlan, Scheme, forward_exchange, plan_exchange, reverse_force_reduce
from .tsgemm import PrecisionMode

__all__ = [
    "NodeMDConfig",
    "parse_config",
    "RunConfig",
    "RunResult",
    "Simulation",
    "ThermoRecord",
    "evaluate_global",
    "rdf",
    "RankTopology",
    "SimBox",
    "SubBox",
    "decompose",
    "ghost_count_model",
    "CutoffSpec",
    "NeighborList",
    "build_neighbor_list",
    "Cluster",
    "CostModel",
    "SimMetrics",
    "build_cluster",
    "ModelParams",
    "compute_energy_forces",
    "init_params",
    "load_params",
    "save_params",
    "CommPlan",
    "Scheme",
    "forward_exchange",
    "plan_exchange",
    "reverse_force_reduce",
    "PrecisionMode",
]
