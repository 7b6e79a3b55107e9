"""Finite-volume operators on periodic quad meshes.

Fields are plain arrays: scalars ``(n_cells,)``, vectors ``(n_cells, 2)`` or
``(n_faces, 2)`` / ``(n_corners, 2)`` depending on where they live, and
tensors ``(n_cells, 2, 2)``.
"""
from __future__ import annotations

import logging

import numpy as np

from .mesh import Mesh, tangling_check

log = logging.getLogger(__name__)


class SingularGeometryError(ArithmeticError):
    """A cell neighbourhood is too degenerate for a least-squares gradient."""

    def __init__(self, cell: int):
        super().__init__(f"degenerate centre-to-centre stencil at cell {cell}")
        self.cell = cell


def interpolate(values, mesh: Mesh) -> np.ndarray:
    """Linear interpolation of cell values onto faces."""
    values = np.asarray(values, dtype=float)
    w = mesh.weights.reshape((-1,) + (1,) * (values.ndim - 1))
    return w * values[mesh.owner] + (1.0 - w) * values[mesh.neighbour]


def divergence(face_flux, mesh: Mesh) -> np.ndarray:
    """Cell divergence (1/V_i) sum_f flux_f of owner-oriented face fluxes."""
    total = mesh.face_sum(face_flux)
    return total / mesh.cell_volumes.reshape((-1,) + (1,) * (total.ndim - 1))


def face_normal_gradient(phi, mesh: Mesh) -> np.ndarray:
    """Two-point gradient (phi_N - phi_O) / |d_f|, seen from the owner."""
    phi = np.asarray(phi, dtype=float)
    return (phi[mesh.neighbour] - phi[mesh.owner]) / mesh.delta_magnitudes


def laplacian(phi, mesh: Mesh) -> np.ndarray:
    """Compact face-sum Laplacian."""
    return divergence(mesh.face_magnitudes * face_normal_gradient(phi, mesh), mesh)


def cell_gradient(phi, mesh: Mesh) -> np.ndarray:
    """Gauss-theorem gradient at cell centres."""
    phi_f = interpolate(phi, mesh)
    return divergence(phi_f[:, None] * mesh.face_areas, mesh)


def corrected_face_gradient(phi, mesh: Mesh) -> np.ndarray:
    """Full face gradient whose normal part is the compact two-point gradient."""
    n_hat = mesh.face_normals
    g = interpolate(cell_gradient(phi, mesh), mesh)
    sn = face_normal_gradient(phi, mesh)
    return g + (sn - np.einsum("fi,fi->f", g, n_hat))[:, None] * n_hat


def hessian(phi, mesh: Mesh) -> np.ndarray:
    """Symmetrised Hessian from the Gauss theorem applied to face gradients."""
    gf = corrected_face_gradient(phi, mesh)
    H = divergence(gf[:, :, None] * mesh.face_areas[:, None, :], mesh)
    return 0.5 * (H + H.transpose(0, 2, 1))


def corner_gradient(phi, mesh: Mesh) -> np.ndarray:
    """Gradient at mesh corners from the normal gradients of adjacent faces.

    Every corner of the uniform grid touches two faces per direction, so half
    the sum of ``snGrad_f * n_f`` over the four faces is the per-direction mean.
    Returns an ``(N, N, 2)`` array indexed like ``mesh.corners``.
    """
    contrib = face_normal_gradient(phi, mesh)[:, None] * mesh.face_normals
    n_corners = mesh.n_cells
    out = np.empty((n_corners, 2))
    for k in range(2):
        out[:, k] = 0.5 * (
            np.bincount(mesh.face_corners[:, 0], contrib[:, k], n_corners)
            + np.bincount(mesh.face_corners[:, 1], contrib[:, k], n_corners)
        )
    return out.reshape(mesh.n, mesh.n, 2)


def physical_gradient_ls(g, mesh: Mesh) -> np.ndarray:
    """Least-squares gradient over centre-to-centre vectors of a (moved) mesh.

    Per cell, ``(sum d d^T)^-1 sum d (g_N - g_i)``.  The face terms are even
    in the orientation of ``d``, so owners and neighbours accumulate the same
    face contribution.
    """
    g = np.asarray(g, dtype=float)
    if tangling_check(mesh).tangled:
        log.warning("least-squares gradient evaluated on a tangled mesh")
    d = mesh.deltas
    dg = g[mesh.neighbour] - g[mesh.owner]
    dd = d[:, :, None] * d[:, None, :]
    rhs = d * dg[:, None]
    normal = _cell_accumulate(dd, mesh)
    b = _cell_accumulate(rhs, mesh)
    det = normal[:, 0, 0] * normal[:, 1, 1] - normal[:, 0, 1] * normal[:, 1, 0]
    scale = np.einsum("cii->c", normal) ** 2
    bad = np.flatnonzero(np.abs(det) <= 1e-12 * scale)
    if bad.size:
        raise SingularGeometryError(int(bad[0]))
    return np.linalg.solve(normal, b[:, :, None])[:, :, 0]


def _cell_accumulate(values, mesh: Mesh) -> np.ndarray:
    """Add each face value to both adjacent cells (no sign flip)."""
    flat = values.reshape(values.shape[0], -1)
    out = np.empty((mesh.n_cells, flat.shape[1]))
    for k in range(flat.shape[1]):
        out[:, k] = np.bincount(mesh.owner, flat[:, k], mesh.n_cells) + np.bincount(
            mesh.neighbour, flat[:, k], mesh.n_cells
        )
    return out.reshape((mesh.n_cells,) + values.shape[1:])


def advection_conservative(u, psi, mesh: Mesh) -> np.ndarray:
    """div(u psi) - psi div(u) with u and psi interpolated linearly to faces.

    Both divergences share the face flux ``u_f . S_f`` so the sum reduces to
    ``(1/V) sum_f F_f (psi_f - psi_i)``; it approximates ``u . grad(psi)``.
    """
    flux = np.einsum("fi,fi->f", interpolate(u, mesh), mesh.face_areas)
    psi = np.asarray(psi, dtype=float)
    psi_f = interpolate(psi, mesh)
    own = flux * (psi_f - psi[mesh.owner])
    nei = flux * (psi_f - psi[mesh.neighbour])
    total = np.bincount(mesh.owner, own, mesh.n_cells) - np.bincount(
        mesh.neighbour, nei, mesh.n_cells
    )
    return total / mesh.cell_volumes
