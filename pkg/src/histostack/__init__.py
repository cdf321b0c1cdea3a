"""Restacking of serial histology sections jointly with a deformable atlas."""

from .errors import DataError, HistostackError, SolverStall
from .grid import Section, SectionStack, Volume
from .joint import ATLAS_FREE, ATLAS_INFORMED, JointConfig, joint_estimate, restack_atlas_free
from .kernel import KernelSpec
from .lddmm import MatchConfig, lddmm_match
from .restack import RigidMotion, RigidPrior, RestackConfig, optimize_rigid, restack
from .simulate import SimConfig, run_trials

__all__ = [
    "ATLAS_FREE",
    "ATLAS_INFORMED",
    "DataError",
    "HistostackError",
    "JointConfig",
    "KernelSpec",
    "MatchConfig",
    "RestackConfig",
    "RigidMotion",
    "RigidPrior",
    "Section",
    "SectionStack",
    "SimConfig",
    "SolverStall",
    "Volume",
    "joint_estimate",
    "lddmm_match",
    "optimize_rigid",
    "restack",
    "restack_atlas_free",
    "run_trials",
]

__version__ = "0.1.0"
