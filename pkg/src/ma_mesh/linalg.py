"""Sparse assembly and iterative solves for the per-iteration linear systems.

Matrices are assembled in operator form, i.e. row ``i`` carries the
``1/V_i`` factor, so ``M @ phi`` equals the explicit operator in
:mod:`ma_mesh.fvops` entry by entry.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pyamg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fvops
from .mesh import Mesh

log = logging.getLogger(__name__)

_EPS = np.finfo(float).eps


class SolverStallError(RuntimeError):
    """The Krylov solver did not reach its tolerance."""

    def __init__(self, message, residuals):
        super().__init__(message)
        self.residuals = list(residuals)


class EllipticityLostError(ArithmeticError):
    """A face diffusion coefficient is not positive."""


@dataclass
class LinSolveConfig:
    abs_tol: float = 1e-12
    rel_tol: float = 1e-8
    max_iter: int = 2000
    correctors: int = 3

    def __post_init__(self):
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise ValueError("solver tolerances must be positive")
        if self.correctors < 1:
            raise ValueError("need at least one corrector sweep")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")


@dataclass
class SparseSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    pinned_cell: int | None = None
    pin_value: float | None = None
    symmetric: bool = False
    # Solver-side cache (e.g. a multigrid hierarchy); not part of the problem.
    preconditioner: object | None = field(default=None, repr=False, compare=False)


def _uniform_volumes(mesh: Mesh) -> bool:
    v = mesh.cell_volumes
    return bool(np.ptp(v) <= 1e-12 * v.max())


def face_pair_matrix(mesh: Mesh, a_oo, a_on, a_no, a_nn) -> sp.csr_matrix:
    """Assemble per-face 2x2 couplings into an operator-form matrix.

    Row ``owner`` gets ``a_oo`` on the diagonal and ``a_on`` on the neighbour
    column; row ``neighbour`` gets ``a_no`` and ``a_nn``.  Rows are divided by
    the cell volume.
    """
    o, nb = mesh.owner, mesh.neighbour
    rows = np.concatenate([o, o, nb, nb])
    cols = np.concatenate([o, nb, o, nb])
    vals = np.concatenate([a_oo, a_on, a_no, a_nn]) / mesh.cell_volumes[rows]
    n = mesh.n_cells
    return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def diffusion_matrix(mesh: Mesh, conductance) -> sp.csr_matrix:
    """Operator-form matrix of (1/V_i) sum_f g_f (phi_N - phi_i)."""
    g = np.asarray(conductance, dtype=float)
    return face_pair_matrix(mesh, -g, g, g, -g)


def advection_matrix(mesh: Mesh, face_flux) -> sp.csr_matrix:
    """Implicit form of :func:`ma_mesh.fvops.advection_conservative`."""
    F = np.asarray(face_flux, dtype=float)
    w = mesh.weights
    return face_pair_matrix(mesh, F * (w - 1.0), F * (1.0 - w), -F * w, F * w)


def assemble_poisson(mesh: Mesh, coeff: float, identity: bool = False, rhs=None) -> SparseSystem:
    """Matrix of ``coeff * laplacian`` (plus the identity if ``identity``).

    ``assemble_poisson(mesh, -gamma, identity=True)`` gives ``I - gamma lap``.
    """
    M = diffusion_matrix(mesh, coeff * mesh.face_magnitudes / mesh.delta_magnitudes)
    if identity:
        M = (M + sp.identity(mesh.n_cells, format="csr")).tocsr()
    b = np.zeros(mesh.n_cells) if rhs is None else np.asarray(rhs, dtype=float).copy()
    return SparseSystem(M, b, symmetric=_uniform_volumes(mesh))


def pin_reference(system: SparseSystem, cell: int, value: float) -> SparseSystem:
    """Fix the unknown in ``cell`` to ``value``.

    The row becomes a scaled identity row (keeping the original diagonal, so
    a definite system stays definite) and the column is eliminated into the
    right-hand side, which keeps symmetric systems symmetric.
    """
    M = system.matrix.tocoo()
    n = M.shape[0]
    if not 0 <= cell < n:
        raise IndexError(f"pin cell {cell} outside 0..{n - 1}")
    diag = system.matrix.diagonal()[cell]
    if diag == 0.0:
        diag = 1.0
    b = system.rhs.copy()
    in_col = (M.col == cell) & (M.row != cell)
    np.subtract.at(b, M.row[in_col], M.data[in_col] * value)
    keep = (M.row != cell) & (M.col != cell)
    rows = np.append(M.row[keep], cell)
    cols = np.append(M.col[keep], cell)
    vals = np.append(M.data[keep], diag)
    b[cell] = diag * value
    pinned = sp.coo_matrix((vals, (rows, cols)), shape=M.shape).tocsr()
    return replace(system, matrix=pinned, rhs=b, pinned_cell=cell, pin_value=value, preconditioner=None)


_AMG_SEED = 12345


def _definite_sign(M) -> float:
    return -1.0 if M.diagonal().sum() < 0 else 1.0


def make_preconditioner(system: SparseSystem):
    """Smoothed-aggregation AMG for symmetric systems, ILU otherwise."""
    M = system.matrix
    if system.symmetric:
        sign = _definite_sign(M)
        # pyamg estimates spectral radii from a random start vector drawn from
        # the global numpy RNG; a fixed seed keeps reruns bit-identical.
        saved = np.random.get_state()
        np.random.seed(_AMG_SEED)
        try:
            ml = pyamg.smoothed_aggregation_solver((sign * M).tocsr(), max_coarse=50)
        finally:
            np.random.set_state(saved)
        return ml.aspreconditioner(cycle="V")
    ilu = spla.spilu(M.tocsc(), drop_tol=1e-5, fill_factor=20)
    return spla.LinearOperator(M.shape, ilu.solve)


def solve(system: SparseSystem, cfg: LinSolveConfig, guess=None) -> np.ndarray:
    """Iteratively solve ``M x = b`` to ``max(abs_tol, rel_tol * |r0|)``.

    Symmetric systems use AMG-preconditioned CG (after flipping the sign of
    negative-definite operators), others ILU-preconditioned BiCGSTAB.  The
    achievable residual is bounded below by a round-off floor, which is
    accepted in place of the nominal target when the latter is smaller.  The
    floor grows with |x|, so it only counts once the residual has dropped
    below its initial value; a blown-up iterate is never accepted.
    """
    return solve_counted(system, cfg, guess)[0]


def solve_counted(system: SparseSystem, cfg: LinSolveConfig, guess=None) -> tuple[np.ndarray, int]:
    """:func:`solve` returning ``(x, krylov_iterations)``."""
    M, b = system.matrix, system.rhs
    x = np.zeros_like(b) if guess is None else np.asarray(guess, dtype=float).copy()
    r = b - M @ x
    r0 = np.linalg.norm(r)
    target = max(cfg.abs_tol, cfg.rel_tol * r0)
    absM = abs(M)

    def floor(v):
        return 64 * _EPS * (np.linalg.norm(absM @ np.abs(v)) + np.linalg.norm(b))

    if r0 <= max(target, floor(x)):
        return x, 0
    if system.preconditioner is None:
        system.preconditioner = make_preconditioner(system)
    P = system.preconditioner
    sign = _definite_sign(M) if system.symmetric else 1.0
    A = -M if sign < 0 else M
    krylov = spla.cg if system.symmetric else spla.bicgstab

    history = [r0]
    iterations = 0
    for _restart in range(4):
        count = [0]

        def tick(_xk):
            count[0] += 1

        tol = 0.5 * max(target, floor(x))
        e, info = krylov(A, sign * r, rtol=0.0, atol=tol, maxiter=cfg.max_iter, M=P, callback=tick)
        iterations += count[0]
        x = x + e
        r = b - M @ x
        rn = np.linalg.norm(r)
        history.append(rn)
        if rn <= target or (rn <= floor(x) and rn < r0):
            return x, iterations
        if info < 0 or not np.isfinite(rn):
            break
    raise SolverStallError(
        f"linear solve stalled at residual {history[-1]:.3e} (target {target:.3e})", history
    )


# ---------------------------------------------------------------------------
# Tensor-coefficient diffusion with deferred correction


def face_tensor(B, mesh: Mesh) -> np.ndarray:
    """Arithmetic-mean (face-weighted) interpolation of cell tensors."""
    return fvops.interpolate(B, mesh)


def normal_coefficient(B_face, mesh: Mesh) -> np.ndarray:
    """Per-face n^T B_f n."""
    n_hat = mesh.face_normals
    return np.einsum("fi,fij,fj->f", n_hat, B_face, n_hat)


def tangential_flux(B_face, psi, mesh: Mesh) -> np.ndarray:
    """Face flux |S| n^T B_f t of the interpolated tangential gradient t."""
    n_hat = mesh.face_normals
    g = fvops.interpolate(fvops.cell_gradient(psi, mesh), mesh)
    t = g - np.einsum("fi,fi->f", g, n_hat)[:, None] * n_hat
    return mesh.face_magnitudes * np.einsum("fi,fij,fj->f", n_hat, B_face, t)


def tensor_divergence(B, psi, mesh: Mesh) -> np.ndarray:
    """Full discrete div(B grad psi) using the corrected face gradient."""
    Bf = face_tensor(B, mesh)
    gf = fvops.corrected_face_gradient(psi, mesh)
    flux = np.einsum("fi,fij,fj->f", mesh.face_areas, Bf, gf)
    return fvops.divergence(flux, mesh)


def _normal_matrix(B_face, mesh: Mesh) -> sp.csr_matrix:
    kn = normal_coefficient(B_face, mesh)
    if np.any(kn <= 0.0):
        bad = int(np.argmin(kn))
        raise EllipticityLostError(f"face {bad} has normal diffusion coefficient {kn[bad]:.3e}")
    return diffusion_matrix(mesh, mesh.face_magnitudes * kn / mesh.delta_magnitudes)


def project_compatible(rhs, mesh: Mesh, threshold: float = 1e-10) -> tuple[np.ndarray, float]:
    """Remove the volume-weighted mean of ``rhs`` if it exceeds ``threshold``.

    Returns the (possibly) projected rhs and the removed mean.
    """
    rhs = np.asarray(rhs, dtype=float)
    V = mesh.cell_volumes
    mean = float(np.dot(V, rhs) / V.sum())
    if abs(mean) > threshold:
        log.warning("rhs incompatible with periodic operator (mean %.3e); projecting", mean)
        return rhs - mean, mean
    return rhs, 0.0


def _deferred_correction(implicit: SparseSystem, explicit, cfg: LinSolveConfig, guess, stats):
    psi = guess
    iters = 0
    base = implicit.rhs
    for _ in range(cfg.correctors):
        implicit.rhs = base - explicit(psi)
        if implicit.pinned_cell is not None:
            implicit.rhs[implicit.pinned_cell] = base[implicit.pinned_cell]
        psi, k = solve_counted(implicit, cfg, psi)
        iters += k
    implicit.rhs = base
    if stats is not None:
        stats["inner_iters"] = stats.get("inner_iters", 0) + iters
        stats["sweeps"] = cfg.correctors
    return psi


def tensor_laplacian_solve(
    B, rhs, mesh: Mesh, cfg: LinSolveConfig, guess=None,
    pin_cell: int = 0, pin_value: float = 0.0, stats: dict | None = None,
) -> np.ndarray:
    """Solve div(B grad psi) = rhs on the periodic mesh.

    Normal face fluxes are implicit, tangential ones lagged and recomputed
    from the current iterate in ``cfg.correctors`` sweeps.  The constant null
    space is removed by pinning ``psi[pin_cell] = pin_value``.
    """
    B = np.asarray(B, dtype=float)
    rhs, removed = project_compatible(rhs, mesh)
    Bf = face_tensor(B, mesh)
    base = SparseSystem(_normal_matrix(Bf, mesh), rhs.copy(), symmetric=_uniform_volumes(mesh))
    system = pin_reference(base, pin_cell, pin_value)

    def explicit(psi):
        return fvops.divergence(tangential_flux(Bf, psi, mesh), mesh)

    guess = np.zeros(mesh.n_cells) if guess is None else np.asarray(guess, dtype=float)
    if stats is not None:
        stats["projection"] = removed
    return _deferred_correction(system, explicit, cfg, guess, stats)


def tensor_advection_diffusion_solve(
    B, u, delta: float, rhs, mesh: Mesh, cfg: LinSolveConfig, guess=None,
    stats: dict | None = None,
) -> np.ndarray:
    """Solve delta psi - div(B grad psi) + div(u psi) - psi div(u) = rhs.

    ``u`` is a cell-centred velocity interpolated linearly to faces.  The
    ``delta`` term removes the constant null space, so nothing is pinned.
    """
    B = np.asarray(B, dtype=float)
    Bf = face_tensor(B, mesh)
    flux = np.einsum("fi,fi->f", fvops.interpolate(u, mesh), mesh.face_areas)
    M = -_normal_matrix(Bf, mesh) + advection_matrix(mesh, flux)
    M = (M + delta * sp.identity(mesh.n_cells, format="csr")).tocsr()
    system = SparseSystem(M, np.asarray(rhs, dtype=float).copy(), symmetric=False)

    def explicit(psi):
        return -fvops.divergence(tangential_flux(Bf, psi, mesh), mesh)

    guess = np.zeros(mesh.n_cells) if guess is None else np.asarray(guess, dtype=float)
    return _deferred_correction(system, explicit, cfg, guess, stats)
