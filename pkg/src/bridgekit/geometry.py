"""Iso-surface meshes from voxel grids, area-uniform surface sampling, OBJ export."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from skimage import measure

from .grid import VoxelGrid

MC_ISO = 1.0


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray   # (V, 3) voxel coordinates, axis order x, y, z
    triangles: np.ndarray  # (F, 3) vertex indices

    @cached_property
    def areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    @property
    def empty(self) -> bool:
        return len(self.triangles) == 0

    @classmethod
    def empty_mesh(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def marching_cubes(g: VoxelGrid | np.ndarray, iso: float = MC_ISO) -> TriMesh:
    """Triangulate the level set ``{value == iso}``.

    A field that never crosses ``iso`` gives an empty mesh. Zero-area
    triangles are dropped.
    """
    values = g.values if isinstance(g, VoxelGrid) else np.asarray(g)
    if min(values.shape) < 2:
        raise ValueError("marching cubes needs at least 2 samples per axis")
    values = values.astype(np.float64)
    if not values.min() < iso < values.max():
        return TriMesh.empty_mesh()
    verts, faces, _, _ = measure.marching_cubes(values, level=iso, method="lewiner", allow_degenerate=False)
    mesh = TriMesh(verts.astype(np.float64), faces.astype(np.int64))
    keep = mesh.areas > 0
    if keep.all():
        return mesh
    return TriMesh(mesh.vertices, mesh.triangles[keep])


def sample_surface(m: TriMesh, n: int = 10_000, rng: np.random.Generator | None = None) -> np.ndarray:
    """``n`` points distributed uniformly by area over the mesh."""
    if m.empty:
        raise ValueError("cannot sample an empty mesh")
    if n < 1:
        raise ValueError("need at least one sample")
    rng = rng if rng is not None else np.random.default_rng(0)
    areas = m.areas
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    a, b, c = (m.vertices[m.triangles[tri, k]] for k in range(3))
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def edge_incidence(m: TriMesh) -> dict[tuple[int, int], int]:
    """How many triangles use each undirected edge."""
    edges = np.sort(m.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    return {tuple(e): int(c) for e, c in zip(uniq, counts)}


def write_obj(m: TriMesh, path) -> None:
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in m.vertices]
    lines += [f"f {i + 1} {j + 1} {k + 1}" for i, j, k in m.triangles]
    with open(Path(path), "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
