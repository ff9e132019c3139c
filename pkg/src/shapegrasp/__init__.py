"""Grasp synthesis by matching gripper preshape point clouds to an object
cloud with parallel annealed Stein ICP and SGD-ICP, under SDF collision
constraints."""

from .cloudio import export_trace, load_cloud, save_cloud
from .config import ScenarioConfig, load_config
from .geometry import apply_transform, make_pose, rotation_matrix
from .grasp import GraspConfig, GraspSolution, Preshape, build_problem, default_initializations, optimize_grasp
from .optim import SgdConfig, SteinConfig, annealed_stein_icp, sgd_icp
from .scenario import run_scenario
from .sdf import SdfGrid, build_sdf, load_sdf, save_sdf, stack_preshapes

__version__ = "0.1.0"
