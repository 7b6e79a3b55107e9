"""CSV and legacy-VTK writers for meshes and convergence histories."""
from __future__ import annotations

import csv
import os

import numpy as np

from .mesh import Mesh, min_image

EQUI_COLUMNS = ("iter", "equi", "max_residual", "min_vol", "min_eig", "gamma_max", "inner_iters")

VTK_QUAD = 9


def _g17(x) -> str:
    return format(float(x), ".17g")


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EQUI_COLUMNS)
        for rec in history:
            w.writerow([
                rec.iteration, _g17(rec.equi), _g17(rec.max_residual), _g17(rec.min_vol),
                _g17(rec.min_eig), _g17(rec.gamma_max), rec.inner_iters,
            ])


def write_mesh_csv(mesh: Mesh, path) -> None:
    """Corner coordinates as ``i,j,x,y``, one row per periodic corner."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("i", "j", "x", "y"))
        for i in range(mesh.n):
            for j in range(mesh.n):
                x, y = mesh.corners[i, j]
                w.writerow((i, j, _g17(x), _g17(y)))


def read_mesh_csv(path) -> np.ndarray:
    """Read a corner CSV back into an ``(N, N, 2)`` array."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["i", "j", "x", "y"]:
            raise ValueError(f"{path}: expected header 'i,j,x,y', got {header}")
        rows = [(int(i), int(j), float(x), float(y)) for i, j, x, y in reader]
    n = int(round(np.sqrt(len(rows))))
    if n * n != len(rows) or n == 0:
        raise ValueError(f"{path}: {len(rows)} corners do not form a square mesh")
    corners = np.full((n, n, 2), np.nan)
    for i, j, x, y in rows:
        if not (0 <= i < n and 0 <= j < n):
            raise ValueError(f"{path}: corner index ({i}, {j}) outside 0..{n - 1}")
        corners[i, j] = (x, y)
    if np.isnan(corners).any():
        raise ValueError(f"{path}: duplicate or missing corner indices")
    return corners


def compare_meshes(path_a, path_b) -> float:
    """Largest minimum-image distance between matching corners of two files."""
    a = read_mesh_csv(path_a)
    b = read_mesh_csv(path_b)
    if a.shape != b.shape:
        raise ValueError(f"mesh shapes differ: {a.shape[:2]} vs {b.shape[:2]}")
    return float(np.linalg.norm(min_image(a - b), axis=-1).max())


def write_vtk(mesh: Mesh, path, title: str = "ma-mesh") -> None:
    """Legacy ASCII unstructured grid of quads.

    Points are the (N+1)^2 unwrapped corners so seam cells do not stretch
    across the domain.  Cell volumes are attached as cell data.
    """
    n = mesh.n
    idx = np.arange(n + 1)
    I, J = np.meshgrid(idx, idx, indexing="ij")
    pts = mesh.corners[I % n, J % n] + np.stack([I // n, J // n], axis=-1)
    pts = pts.reshape(-1, 2)

    def pid(i, j):
        return i * (n + 1) + j

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w") as fp:
        fp.write("# vtk DataFile Version 2.0\n")
        fp.write(f"{title}\n")
        fp.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        fp.write(f"POINTS {len(pts)} double\n")
        for x, y in pts:
            fp.write(f"{_g17(x)} {_g17(y)} 0\n")
        fp.write(f"CELLS {n * n} {5 * n * n}\n")
        for i in range(n):
            for j in range(n):
                fp.write(f"4 {pid(i, j)} {pid(i + 1, j)} {pid(i + 1, j + 1)} {pid(i, j + 1)}\n")
        fp.write(f"CELL_TYPES {n * n}\n")
        fp.write(f"{VTK_QUAD}\n" * (n * n))
        fp.write(f"CELL_DATA {n * n}\nSCALARS volume double 1\nLOOKUP_TABLE default\n")
        for v in mesh.cell_volumes:
            fp.write(f"{_g17(v)}\n")
