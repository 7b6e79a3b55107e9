"""Doubly periodic structured quadrilateral meshes on [-1/2, 1/2]^2.

Corners are stored once per periodic class as an ``(N, N, 2)`` array indexed
``[i, j]`` (``i`` along x).  Cell ``(i, j)`` has flat id ``i * N + j`` and the
counter-clockwise corners ``(i, j), (i+1, j), (i+1, j+1), (i, j+1)``; indices
past ``N - 1`` wrap and pick up a shift of one period.

Faces come in two blocks: ``N^2`` "vertical" faces between ``(i, j)`` and
``(i+1, j)`` followed by ``N^2`` "horizontal" faces between ``(i, j)`` and
``(i, j+1)``.  The lower-index cell of the pair is the owner and the area
vector points from owner to neighbour.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PERIOD = 1.0
LOWER = -0.5

# Offsets of the four cell corners, counter-clockwise.
_CORNER_OFFSETS = ((0, 0), (1, 0), (1, 1), (0, 1))


class InvalidMeshError(ValueError):
    """Raised when a mesh cannot be built with the requested resolution."""


def min_image(d):
    """Wrap displacement vectors into the periodic minimum image."""
    return d - PERIOD * np.round(d / PERIOD)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Geometry and connectivity of an N x N periodic quad mesh.

    Attributes
    ----------
    n : int
        Cells per side.
    corners : ndarray, shape (N, N, 2)
        One coordinate per periodic corner class (not wrapped into the box).
    cell_corners : ndarray, shape (N*N, 4, 2)
        Unwrapped counter-clockwise corner coordinates of each cell.
    cell_centres : ndarray, shape (N*N, 2)
    cell_volumes : ndarray, shape (N*N,)
    owner, neighbour : ndarray of int, shape (2*N*N,)
    face_corners : ndarray of int, shape (2*N*N, 2)
        Flat corner ids (``i * N + j``) of the two face end points.
    face_areas : ndarray, shape (2*N*N, 2)
        Area vectors S_f (length times unit normal, owner -> neighbour).
    face_centres : ndarray, shape (2*N*N, 2)
        Face midpoints in the owner's unwrapped frame.
    deltas : ndarray, shape (2*N*N, 2)
        Minimum-image centre-to-centre vectors d_f (owner -> neighbour).
    weights : ndarray, shape (2*N*N,)
        Owner weight for linear interpolation to faces.
    """

    n: int
    corners: np.ndarray
    cell_corners: np.ndarray
    cell_centres: np.ndarray
    cell_volumes: np.ndarray
    owner: np.ndarray
    neighbour: np.ndarray
    face_corners: np.ndarray
    face_areas: np.ndarray
    face_centres: np.ndarray
    deltas: np.ndarray
    weights: np.ndarray

    @property
    def n_cells(self) -> int:
        return self.n * self.n

    @property
    def n_faces(self) -> int:
        return 2 * self.n * self.n

    @property
    def spacing(self) -> float:
        return PERIOD / self.n

    @property
    def face_magnitudes(self) -> np.ndarray:
        return np.linalg.norm(self.face_areas, axis=1)

    @property
    def face_normals(self) -> np.ndarray:
        """Unit normals S_f / |S_f|."""
        return self.face_areas / self.face_magnitudes[:, None]

    @property
    def delta_magnitudes(self) -> np.ndarray:
        return np.linalg.norm(self.deltas, axis=1)

    def face_sum(self, values) -> np.ndarray:
        """Sum owner-signed face quantities into cells.

        Each face contributes ``+values`` to its owner and ``-values`` to its
        neighbour, which is the outward-flux convention for divergence sums.
        """
        values = np.asarray(values, dtype=float)
        flat = values.reshape(values.shape[0], -1)
        out = np.empty((self.n_cells, flat.shape[1]))
        for k in range(flat.shape[1]):
            out[:, k] = np.bincount(self.owner, flat[:, k], self.n_cells) - np.bincount(
                self.neighbour, flat[:, k], self.n_cells
            )
        return out.reshape((self.n_cells,) + values.shape[1:])


def _cell_ids(n):
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return i.ravel(), j.ravel()


def _unwrapped_corner(corners, n, i, j):
    shift = np.stack([i // n, j // n], axis=-1) * PERIOD
    return corners[i % n, j % n] + shift


def _triangle_area(a, b, c):
    u = b - a
    v = c - a
    return 0.5 * (u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0])


def mesh_from_corners(corners) -> Mesh:
    """Compute every geometric quantity of the mesh spanned by ``corners``."""
    corners = np.asarray(corners, dtype=float)
    n = corners.shape[0]
    if corners.shape != (n, n, 2):
        raise InvalidMeshError(f"corners must have shape (N, N, 2), got {corners.shape}")
    if n < 3:
        raise InvalidMeshError(f"need at least 3 cells per side, got {n}")

    ci, cj = _cell_ids(n)
    cell_corners = np.stack(
        [_unwrapped_corner(corners, n, ci + a, cj + b) for a, b in _CORNER_OFFSETS], axis=1
    )
    centres = cell_corners.mean(axis=1)
    p0, p1, p2, p3 = (cell_corners[:, k] for k in range(4))
    volumes = _triangle_area(p0, p1, p2) + _triangle_area(p0, p2, p3)

    cell = ci * n + cj
    east = ((ci + 1) % n) * n + cj
    north = ci * n + (cj + 1) % n
    owner = np.concatenate([cell, cell])
    neighbour = np.concatenate([east, north])

    # Vertical face: edge p1 -> p2 of the owner.  Horizontal face: p2 -> p3.
    starts = np.concatenate([p1, p2])
    ends = np.concatenate([p2, p3])
    edge = ends - starts
    face_areas = np.stack([edge[:, 1], -edge[:, 0]], axis=1)
    face_centres = 0.5 * (starts + ends)

    c1 = ((ci + 1) % n) * n + cj
    c2 = ((ci + 1) % n) * n + (cj + 1) % n
    c3 = ci * n + (cj + 1) % n
    face_corners = np.concatenate(
        [np.stack([c1, c2], axis=1), np.stack([c2, c3], axis=1)]
    )

    deltas = min_image(centres[neighbour] - centres[owner])
    d_own = np.linalg.norm(min_image(face_centres - centres[owner]), axis=1)
    d_nei = np.linalg.norm(min_image(centres[neighbour] - face_centres), axis=1)
    weights = d_nei / (d_own + d_nei)
    # Exact midpoint weights wherever the face sits halfway (uniform mesh).
    weights[np.abs(weights - 0.5) < 1e-12] = 0.5

    return Mesh(
        n=n,
        corners=corners,
        cell_corners=cell_corners,
        cell_centres=centres,
        cell_volumes=volumes,
        owner=owner,
        neighbour=neighbour,
        face_corners=face_corners,
        face_areas=face_areas,
        face_centres=face_centres,
        deltas=deltas,
        weights=weights,
    )


def uniform_corners(n: int) -> np.ndarray:
    h = PERIOD / n
    ticks = LOWER + h * np.arange(n)
    x, y = np.meshgrid(ticks, ticks, indexing="ij")
    return np.stack([x, y], axis=-1)


def build_uniform_mesh(n: int) -> Mesh:
    """Uniform N x N computational mesh with spacing 1/N."""
    if int(n) != n or n < 3:
        raise InvalidMeshError(f"need an integer n >= 3, got {n!r}")
    return mesh_from_corners(uniform_corners(int(n)))


@dataclass(frozen=True, eq=False)
class MeshPair:
    """Fixed computational mesh and its image under x = xi + grad(phi)."""

    computational: Mesh
    physical: Mesh
    corner_displacement: np.ndarray

    @classmethod
    def identity(cls, mesh: Mesh) -> "MeshPair":
        return cls(mesh, mesh, np.zeros_like(mesh.corners))


def update_physical_mesh(pair: MeshPair, corner_grad) -> MeshPair:
    """Move every computational corner by ``corner_grad`` and rebuild geometry.

    ``corner_grad`` is either ``(N, N, 2)`` or flat ``(N*N, 2)`` in corner-id
    order.  Tangled results are returned as they are; see :func:`tangling_check`.
    """
    comp = pair.computational
    corner_grad = np.asarray(corner_grad, dtype=float).reshape(comp.n, comp.n, 2)
    physical = mesh_from_corners(comp.corners + corner_grad)
    return MeshPair(comp, physical, corner_grad)


@dataclass(frozen=True)
class TanglingReport:
    min_cell_volume: float
    min_triangle_area: float
    tangled: bool


def tangling_check(mesh: Mesh) -> TanglingReport:
    """Flag quads with a non-positive corner triangle.

    All four corner triangles are tested, so a quad counts as tangled as
    soon as it is non-convex or inverted, regardless of which diagonal is used.
    """
    p = mesh.cell_corners
    areas = np.stack(
        [_triangle_area(p[:, k], p[:, (k + 1) % 4], p[:, (k + 2) % 4]) for k in range(4)],
        axis=1,
    )
    min_tri = float(areas.min())
    return TanglingReport(
        min_cell_volume=float(mesh.cell_volumes.min()),
        min_triangle_area=min_tri,
        tangled=bool(min_tri <= 0.0),
    )
