"""SDF grid sampling, marching-cubes extraction and mesh export."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage import measure

from .lie import Sim3

GRID_EXTENT = 1.1


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def area(self) -> float:
        if self.is_empty:
            return 0.0
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return float(0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1).sum())

    def edge_use_counts(self) -> np.ndarray:
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def is_watertight(self) -> bool:
        return not self.is_empty and bool(np.all(self.edge_use_counts() == 2))


def grid_coordinates(resolution: int, extent: float = GRID_EXTENT) -> np.ndarray:
    """Cell-center coordinates along one axis of the ``[-extent, extent]`` cube."""
    h = 2.0 * extent / resolution
    return -extent + h * (np.arange(resolution) + 0.5)


def sdf_grid(decoder, code, resolution: int = 64, extent: float = GRID_EXTENT, chunk: int = 65536) -> np.ndarray:
    """``grid[i, j, k] = f(c_i, c_j, c_k; code)`` at cell centers.

    ``decoder`` is :class:`~sdfpose.decoder.DecoderWeights` or any callable
    mapping an (N, 3) array to N values.
    """
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    c = grid_coordinates(resolution, extent)
    P = np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1).reshape(-1, 3)
    fn = decoder if callable(decoder) and not hasattr(decoder, "fine_decode") else (lambda X: decoder.fine_decode(X, code))
    out = np.concatenate([fn(P[i : i + chunk]) for i in range(0, len(P), chunk)])
    return out.reshape(resolution, resolution, resolution)


def marching_cubes(grid: np.ndarray, iso: float = 0.0, extent: float = GRID_EXTENT) -> Mesh:
    """Zero-level surface of a cell-centered grid over ``[-extent, extent]^3``.

    Faces are oriented so normals point toward increasing values (outward
    for an SDF). Returns an empty mesh if the grid never crosses ``iso``.
    """
    grid = np.asarray(grid, dtype=float)
    if not np.all(np.isfinite(grid)):
        raise ValueError("grid contains non-finite values")
    if not (grid.min() < iso < grid.max()):
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
    n = grid.shape[0]
    h = 2.0 * extent / n
    verts, faces, _, _ = measure.marching_cubes(grid, level=iso, spacing=(h, h, h), gradient_direction="descent")
    verts = verts - extent + 0.5 * h
    return Mesh(verts, faces.astype(int))


def transform_mesh(mesh: Mesh, T: Sim3) -> Mesh:
    """Map object-frame vertices to the world with ``T^-1`` (T: world -> object)."""
    return Mesh(T.inverse().apply(mesh.vertices) if len(mesh.vertices) else mesh.vertices, mesh.faces.copy())


def trilinear(grid: np.ndarray, points: np.ndarray, extent: float = GRID_EXTENT) -> np.ndarray:
    """Trilinear interpolation of a cell-centered grid at (N, 3) points."""
    n = grid.shape[0]
    h = 2.0 * extent / n
    u = (np.asarray(points, dtype=float) + extent) / h - 0.5
    i0 = np.clip(np.floor(u).astype(int), 0, n - 2)
    f = u - i0
    out = np.zeros(len(u))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (f[:, 0] if dx else 1 - f[:, 0]) * (f[:, 1] if dy else 1 - f[:, 1]) * (f[:, 2] if dz else 1 - f[:, 2])
                out += w * grid[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
    return out


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def write_ply(path, mesh: Mesh) -> None:
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property float x",
        "property float y",
        "property float z",
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    lines += [" ".join(_fmt(c) for c in v) for v in mesh.vertices]
    lines += ["3 " + " ".join(str(int(i)) for i in f) for f in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> Mesh:
    lines = Path(path).read_text().splitlines()
    nv = nf = 0
    i = 0
    while lines[i] != "end_header":
        parts = lines[i].split()
        if parts[:2] == ["element", "vertex"]:
            nv = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            nf = int(parts[2])
        i += 1
    body = lines[i + 1 :]
    V = np.array([[float(t) for t in l.split()] for l in body[:nv]]).reshape(nv, 3)
    F = np.array([[int(t) for t in l.split()[1:4]] for l in body[nv : nv + nf]], dtype=int).reshape(nf, 3)
    return Mesh(V, F)


def write_obj(path, mesh: Mesh) -> None:
    lines = ["v " + " ".join(_fmt(c) for c in v) for v in mesh.vertices]
    lines += ["f " + " ".join(str(int(i) + 1) for i in f) for f in mesh.faces]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_obj(path) -> Mesh:
    V, F = [], []
    for line in Path(path).read_text().splitlines():
        if line.startswith("v "):
            V.append([float(t) for t in line.split()[1:4]])
        elif line.startswith("f "):
            F.append([int(t.split("/")[0]) - 1 for t in line.split()[1:4]])
    return Mesh(np.array(V, dtype=float).reshape(-1, 3), np.array(F, dtype=int).reshape(-1, 3))
