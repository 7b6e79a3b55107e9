"""Outer iterations for the mesh Monge-Ampere equation.

All four schemes share the state ``phi`` (cell-centred mesh potential), the
mesh pair ``x = xi + grad(phi)`` and the equidistribution diagnostics.  Each
step solves one linear problem for the increment ``dphi`` and moves the mesh.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import fvops, linalg
from .linalg import EllipticityLostError, LinSolveConfig, SolverStallError
from .mesh import MeshPair, build_uniform_mesh, min_image, tangling_check, update_physical_mesh
from .monitor import MonitorSpec, eval_monitor, monitor_grad_analytic

log = logging.getLogger(__name__)

ALGORITHMS = ("FP", "AFP", "Newton", "PMA")
DIMENSION = 2


class ConvergenceFailure(RuntimeError):
    """Base class of run-ending failures; carries the history so far."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class MaxIterationsError(ConvergenceFailure):
    pass


class DivergenceError(ConvergenceFailure):
    pass


class MeshTanglingError(ConvergenceFailure):
    pass


def canonical_algorithm(name: str) -> str:
    for alg in ALGORITHMS:
        if str(name).lower() == alg.lower():
            return alg
    raise ValueError(f"unknown algorithm {name!r}; expected one of {ALGORITHMS}")


@dataclass
class SolverConfig:
    """Algorithm choice, its free parameters and stopping rules.

    FP needs ``fp_gamma``; PMA needs ``pma_gamma`` and ``pma_dt``; AFP needs
    nothing beyond the defaults.
    """

    algorithm: str = "AFP"
    fp_gamma: float | None = None
    pma_gamma: float | None = None
    pma_dt: float | None = None
    newton_delta_scale: float = 1e-4
    newton_analytic_gradient: bool = False
    shift_epsilon: float = 1e-5
    equi_tol: float = 1e-8
    max_outer: int = 2000
    divergence_factor: float = 1e3
    tangle_patience: int = 5
    pin_cell: int = 0
    pin_value: float = 0.0
    linear: LinSolveConfig = field(default_factory=LinSolveConfig)

    def __post_init__(self):
        self.algorithm = canonical_algorithm(self.algorithm)
        required = {"FP": ("fp_gamma",), "PMA": ("pma_gamma", "pma_dt")}
        for key in required.get(self.algorithm, ()):
            value = getattr(self, key)
            if value is None:
                raise ValueError(f"{self.algorithm} requires {key}")
            if not value > 0:
                raise ValueError(f"{key} must be positive, got {value}")
        if self.newton_delta_scale < 0:
            raise ValueError("newton_delta_scale must be non-negative")
        if not self.shift_epsilon > 0:
            raise ValueError("shift_epsilon must be positive")
        if self.max_outer < 0:
            raise ValueError("max_outer must be non-negative")
        if self.tangle_patience < 0:
            raise ValueError("tangle_patience must be non-negative")


@dataclass(frozen=True)
class ConvergenceRecord:
    iteration: int
    equi: float
    max_residual: float
    min_vol: float
    min_eig: float
    gamma_max: float = 0.0
    inner_iters: int = 0


@dataclass
class SolverState:
    phi: np.ndarray
    pair: MeshPair
    monitor: MonitorSpec
    iteration: int = 0
    history: list = field(default_factory=list)
    # Per-run reusable matrices and the last increment (warm start).
    cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def initial(cls, n: int, monitor: MonitorSpec, pin_value: float = 0.0) -> "SolverState":
        # A constant potential leaves the mesh uniform; starting at the pin
        # value means every increment is pinned to zero.
        mesh = build_uniform_mesh(n)
        return cls(np.full(mesh.n_cells, float(pin_value)), MeshPair.identity(mesh), monitor)

    @property
    def mesh(self):
        return self.pair.computational

    def monitor_values(self) -> np.ndarray:
        """Monitor at the physical cell centres (wrapped into the box)."""
        return eval_monitor(self.monitor, min_image(self.pair.physical.cell_centres))


# ---------------------------------------------------------------------------
# Pointwise algebra


def det_i_plus(H) -> np.ndarray:
    """det(I + H) per cell."""
    return (1.0 + H[:, 0, 0]) * (1.0 + H[:, 1, 1]) - H[:, 0, 1] * H[:, 1, 0]


def sym_eigenvalues(A) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form (min, max) eigenvalues of symmetric 2x2 tensors."""
    mean = 0.5 * (A[:, 0, 0] + A[:, 1, 1])
    rad = np.hypot(0.5 * (A[:, 0, 0] - A[:, 1, 1]), A[:, 0, 1])
    return mean - rad, mean + rad


def cofactor2d(H) -> np.ndarray:
    """Cofactor matrix of I + H for symmetric H."""
    H = np.asarray(H, dtype=float)
    A = np.empty_like(H)
    A[:, 0, 0] = 1.0 + H[:, 1, 1]
    A[:, 1, 1] = 1.0 + H[:, 0, 0]
    A[:, 0, 1] = -H[:, 0, 1]
    A[:, 1, 0] = -H[:, 1, 0]
    return A


def regularise(A, shift_epsilon: float = 1e-5) -> tuple[np.ndarray, np.ndarray]:
    """Shift each cell tensor so its smallest eigenvalue is at least epsilon.

    ``gamma = 0`` where ``A`` is already positive definite and
    ``epsilon - lambda_min`` elsewhere; returns ``(A + gamma I, gamma)``.
    """
    A = np.asarray(A, dtype=float)
    lam_min, _ = sym_eigenvalues(A)
    gamma = np.where(lam_min > 0.0, 0.0, shift_epsilon - lam_min)
    B = A.copy()
    B[:, 0, 0] += gamma
    B[:, 1, 1] += gamma
    return B, gamma


def compute_c(state: SolverState, m_values, H=None) -> float:
    """Equidistribution constant that makes the periodic Poisson rhs solvable."""
    V = state.mesh.cell_volumes
    if H is None:
        H = fvops.hessian(state.phi, state.mesh)
    return float(np.dot(V, det_i_plus(H)) / np.dot(V, 1.0 / np.asarray(m_values)))


def equidistribution(state: SolverState, m_values, H=None) -> float:
    """Coefficient of variation of m |I + H| over the cells."""
    if H is None:
        H = fvops.hessian(state.phi, state.mesh)
    q = np.asarray(m_values) * det_i_plus(H)
    return float(np.std(q) / np.mean(q))


@dataclass
class Diagnostics:
    H: np.ndarray
    det: np.ndarray
    m: np.ndarray
    c: float
    equi: float
    max_residual: float
    min_vol: float
    min_eig: float
    tangled: bool


def diagnose(state: SolverState) -> Diagnostics:
    H = fvops.hessian(state.phi, state.mesh)
    det = det_i_plus(H)
    m = state.monitor_values()
    c = compute_c(state, m, H)
    q = m * det
    I_plus = H.copy()
    I_plus[:, 0, 0] += 1.0
    I_plus[:, 1, 1] += 1.0
    report = tangling_check(state.pair.physical)
    return Diagnostics(
        H=H, det=det, m=m, c=c,
        equi=float(np.std(q) / np.mean(q)),
        max_residual=float(np.max(np.abs(q - c))),
        min_vol=report.min_cell_volume,
        min_eig=float(sym_eigenvalues(I_plus)[0].min()),
        tangled=report.tangled,
    )


def _record(state, diag, gamma_max=0.0, inner_iters=0) -> ConvergenceRecord:
    return ConvergenceRecord(
        iteration=state.iteration, equi=diag.equi, max_residual=diag.max_residual,
        min_vol=diag.min_vol, min_eig=diag.min_eig,
        gamma_max=float(gamma_max), inner_iters=int(inner_iters),
    )


def _advance(state: SolverState, dphi) -> SolverState:
    phi = state.phi + dphi
    pair = update_physical_mesh(state.pair, fvops.corner_gradient(phi, state.mesh))
    cache = state.cache
    cache["last_update"] = dphi
    return replace(state, phi=phi, pair=pair, iteration=state.iteration + 1, cache=cache)


def _warm_start(state):
    # Only for schemes whose inner solve is exact; the lagged tangential term
    # of the deferred-correction solves must start from zero (see afp_step).
    return state.cache.get("last_update")


def _source(diag: Diagnostics) -> np.ndarray:
    """-|I + H| + c/m, the fixed-point right-hand side."""
    return -diag.det + diag.c / diag.m


# ---------------------------------------------------------------------------
# Steps


def fp_step(state: SolverState, cfg: SolverConfig, diag: Diagnostics | None = None):
    """Under-relaxed fixed point: gamma lap(dphi) = -|I+H| + c/m."""
    diag = diag or diagnose(state)
    mesh = state.mesh
    key = ("fp", cfg.fp_gamma, cfg.pin_cell)
    if key not in state.cache:
        system = linalg.pin_reference(linalg.assemble_poisson(mesh, cfg.fp_gamma), cfg.pin_cell, 0.0)
        system.preconditioner = linalg.make_preconditioner(system)
        state.cache[key] = system
    rhs, _ = linalg.project_compatible(_source(diag), mesh)
    rhs[cfg.pin_cell] = 0.0
    system = replace(state.cache[key], rhs=rhs)
    dphi, iters = linalg.solve_counted(system, cfg.linear, _warm_start(state))
    return _advance(state, dphi), _record(state, diag, 0.0, iters)


def afp_step(state: SolverState, cfg: SolverConfig, diag: Diagnostics | None = None):
    """Adaptive fixed point: div(B grad dphi) = -|I+H| + c/m with B the
    eigenvalue-shifted cofactor matrix."""
    diag = diag or diagnose(state)
    B, gamma = regularise(cofactor2d(diag.H), cfg.shift_epsilon)
    stats = {}
    # Zero initial guess: with a fixed number of corrector sweeps, lagging the
    # cross terms from the previous increment costs iterations and can tangle
    # strongly graded meshes.
    dphi = linalg.tensor_laplacian_solve(
        B, _source(diag), state.mesh, cfg.linear, guess=None,
        pin_cell=cfg.pin_cell, pin_value=0.0, stats=stats,
    )
    return _advance(state, dphi), _record(state, diag, gamma.max(), stats.get("inner_iters", 0))


def newton_velocity(state: SolverState, diag: Diagnostics, analytic: bool = False) -> np.ndarray:
    """grad_x(c/m) at the physical cell centres."""
    if analytic:
        x = min_image(state.pair.physical.cell_centres)
        return -diag.c * monitor_grad_analytic(state.monitor, x) / diag.m[:, None] ** 2
    return fvops.physical_gradient_ls(diag.c / diag.m, state.pair.physical)


def newton_step(state: SolverState, cfg: SolverConfig, diag: Diagnostics | None = None):
    """Newton step as a delta-stabilised advection-diffusion solve.

    Solves ``delta dphi - div(B grad dphi) + div(u dphi) - dphi div(u)
    = |I+H| - c/m`` with ``u = grad_x(c/m)`` on the physical mesh.
    """
    diag = diag or diagnose(state)
    if diag.tangled:
        log.info("Newton step on a tangled physical mesh (iteration %d)", state.iteration)
    B, gamma = regularise(cofactor2d(diag.H), cfg.shift_epsilon)
    u = newton_velocity(state, diag, cfg.newton_analytic_gradient)
    delta = cfg.newton_delta_scale / state.mesh.cell_volumes.min()
    stats = {}
    dphi = linalg.tensor_advection_diffusion_solve(
        B, u, delta, -_source(diag), state.mesh, cfg.linear, guess=None, stats=stats,
    )
    return _advance(state, dphi), _record(state, diag, gamma.max(), stats.get("inner_iters", 0))


def pma_step(state: SolverState, cfg: SolverConfig, diag: Diagnostics | None = None):
    """Parabolic relaxation: (I - gamma lap) dphi = dt (m|I+H|)^(1/2) - mean."""
    diag = diag or diagnose(state)
    mesh = state.mesh
    q = diag.m * diag.det
    if np.any(q < 0.0):
        raise DivergenceError(f"m|I+H| negative at iteration {state.iteration}")
    q = cfg.pma_dt * q ** (1.0 / DIMENSION)
    V = mesh.cell_volumes
    rhs = q - np.dot(V, q) / V.sum()
    key = ("pma", cfg.pma_gamma)
    if key not in state.cache:
        system = linalg.assemble_poisson(mesh, -cfg.pma_gamma, identity=True)
        system.preconditioner = linalg.make_preconditioner(system)
        state.cache[key] = system
    system = replace(state.cache[key], rhs=rhs)
    dphi, iters = linalg.solve_counted(system, cfg.linear, _warm_start(state))
    return _advance(state, dphi), _record(state, diag, 0.0, iters)


STEPS = {"FP": fp_step, "AFP": afp_step, "Newton": newton_step, "PMA": pma_step}


# ---------------------------------------------------------------------------
# Driver


@dataclass
class RunResult:
    pair: MeshPair
    history: list
    converged: bool
    state: SolverState
    error: Exception | None = None

    @property
    def iterations(self) -> int:
        return self.state.iteration

    @property
    def final_equi(self) -> float:
        return self.history[-1].equi if self.history else float("nan")

    @property
    def failure(self) -> str | None:
        return None if self.error is None else f"{type(self.error).__name__}: {self.error}"

    def raise_for_status(self):
        if self.error is not None:
            raise self.error


def run(cfg: SolverConfig, monitor: MonitorSpec, n: int) -> RunResult:
    """Iterate the configured scheme until the equidistribution drops below
    ``cfg.equi_tol``.

    Failures (iteration cap, divergence, tangling, linear-solver stalls)
    end the run and are reported through ``RunResult.error``; call
    :meth:`RunResult.raise_for_status` to turn them into exceptions.
    """
    step = STEPS[cfg.algorithm]
    state = SolverState.initial(n, monitor, cfg.pin_value)
    history = state.history
    equi0 = None
    error = None
    tangled_run = 0
    while True:
        diag = diagnose(state)
        if equi0 is None:
            equi0 = diag.equi
        if diag.equi < cfg.equi_tol:
            history.append(_record(state, diag))
            break
        if not np.isfinite(diag.equi) or diag.equi > cfg.divergence_factor * equi0:
            history.append(_record(state, diag))
            error = DivergenceError(
                f"equidistribution {diag.equi:.3e} at iteration {state.iteration}", history
            )
            break
        tangled_run = tangled_run + 1 if diag.tangled else 0
        if tangled_run > cfg.tangle_patience:
            history.append(_record(state, diag))
            error = MeshTanglingError(
                f"mesh tangled for {tangled_run} consecutive iterations "
                f"(iteration {state.iteration})", history,
            )
            break
        if state.iteration >= cfg.max_outer:
            history.append(_record(state, diag))
            error = MaxIterationsError(f"no convergence after {cfg.max_outer} iterations", history)
            break
        try:
            state, rec = step(state, cfg, diag)
        except (SolverStallError, EllipticityLostError, fvops.SingularGeometryError,
                ConvergenceFailure, FloatingPointError) as exc:
            history.append(_record(state, diag))
            if isinstance(exc, ConvergenceFailure):
                exc.history = history
            error = exc
            break
        history.append(rec)
        log.debug("%s it=%d equi=%.3e", cfg.algorithm, rec.iteration, rec.equi)
    state.history = history
    return RunResult(state.pair, history, error is None, state, error)
