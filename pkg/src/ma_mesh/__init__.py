"""Optimally transported 2D meshes from the Monge-Ampere equation."""
from .linalg import LinSolveConfig
from .mesh import Mesh, MeshPair, build_uniform_mesh, tangling_check, update_physical_mesh
from .monitor import MonitorSpec, eval_monitor, monitor_grad_analytic
from .solvers import ConvergenceRecord, RunResult, SolverConfig, SolverState, run

__all__ = [
    "ConvergenceRecord", "LinSolveConfig", "Mesh", "MeshPair", "MonitorSpec", "RunResult",
    "SolverConfig", "SolverState", "build_uniform_mesh", "eval_monitor",
    "monitor_grad_analytic", "run", "tangling_check", "update_physical_mesh",
]
__version__ = "0.1.0"
