"""Polytopic feedback trees for piecewise-affine systems."""

from .errors import *  # noqa: F401,F403
from .geometry import AHPolytope, HPolytope, TemplatePolytope
from .milp import MilpConfig, MilpModel, solve_lp, solve_milp
from .pwa import Affine, Constant, Mode, PWASystem, mode_of, step
from .traj import ObjectiveConfig, PolytopicTrajectory, TrajectoryQuery, solve_trajectory
from .tree import GrowthConfig, PolytopicTree, grow, init_tree
from .control import point_mpc, policy_in_tree, policy_out_tree, simulate

__version__ = "0.1.0"

__all__ = [
    "AHPolytope", "HPolytope", "TemplatePolytope", "MilpConfig", "MilpModel", "solve_lp", "solve_milp",
    "Affine", "Constant", "Mode", "PWASystem", "mode_of", "step", "ObjectiveConfig", "PolytopicTrajectory",
    "TrajectoryQuery", "solve_trajectory", "GrowthConfig", "PolytopicTree", "grow", "init_tree",
    "point_mpc", "policy_in_tree", "policy_out_tree", "simulate",
]
