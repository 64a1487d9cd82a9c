"""Voxel distance fields, procedural shapes, partial scans and the VGRD file format.

Grids are stored as numpy arrays indexed ``[x, y, z]`` with distances in voxel
units. On disk the payload is z-major (z varies slowest, x fastest), which is
Fortran order for an ``(nx, ny, nz)`` array.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SDF = "SDF"
UDF = "UDF"
_KIND_CODES = {SDF: 0, UDF: 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}

GRID_MAGIC = b"VGRD"
GRID_VERSION = 1
_HEADER = struct.Struct("<4sIB3xIIIff")

CAMERA_DIRS = ("+x", "-x", "+y", "-y", "+z", "-z")


class GridFormatError(ValueError):
    """Raised when a VGRD file is malformed."""


class ShapeError(ValueError):
    """Raised for invalid shape specifications or degenerate scans."""


@dataclass(frozen=True)
class VoxelGrid:
    values: np.ndarray
    kind: str = SDF
    voxel_size: float = 1.0
    truncation: float = 3.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ValueError(f"grid values must be a non-empty 3D array, got shape {values.shape}")
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown grid kind {self.kind!r}")
        if not np.all(np.isfinite(values)):
            raise ValueError("grid values must be finite")
        if self.truncation <= 0:
            raise ValueError("truncation must be positive")
        # float32 rounding of the truncation itself is tolerated
        limit = np.float32(self.truncation)
        if np.any(np.abs(values) > limit):
            raise ValueError("grid values exceed the truncation bound")
        if self.kind == UDF and np.any(values < 0):
            raise ValueError("UDF grids must be non-negative")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape)

    def with_values(self, values, kind: str | None = None) -> "VoxelGrid":
        return VoxelGrid(values, kind or self.kind, self.voxel_size, self.truncation)


# ---------------------------------------------------------------------------
# Procedural shapes


@dataclass(frozen=True)
class Primitive:
    """One analytic solid. ``size`` is a radius (sphere), three half-extents
    (box) or ``(radius, half_height)`` (cylinder, aligned with ``axis``)."""

    type: str
    center: tuple[float, float, float]
    size: tuple[float, ...]
    axis: int = 2

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center, dtype=np.float64)
        if self.type == "sphere":
            half = np.full(3, self.size[0])
        elif self.type == "box":
            half = np.asarray(self.size, dtype=np.float64)
        elif self.type == "cylinder":
            half = np.full(3, self.size[0])
            half[self.axis] = self.size[1]
        else:
            raise ShapeError(f"unknown primitive type {self.type!r}")
        return c - half, c + half

    def distance(self, p: np.ndarray) -> np.ndarray:
        """Exact signed distance from points ``p`` (..., 3) to the solid."""
        d = p - np.asarray(self.center, dtype=np.float64)
        if self.type == "sphere":
            return np.linalg.norm(d, axis=-1) - self.size[0]
        if self.type == "box":
            q = np.abs(d) - np.asarray(self.size, dtype=np.float64)
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(q.max(axis=-1), 0.0)
            return outside + inside
        if self.type == "cylinder":
            radial_axes = [a for a in range(3) if a != self.axis]
            radial = np.linalg.norm(d[..., radial_axes], axis=-1) - self.size[0]
            axial = np.abs(d[..., self.axis]) - self.size[1]
            q = np.stack([radial, axial], axis=-1)
            return np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(q.max(axis=-1), 0.0)
        raise ShapeError(f"unknown primitive type {self.type!r}")

    def to_dict(self) -> dict:
        return {"type": self.type, "center": list(self.center), "size": list(self.size), "axis": self.axis}

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        return cls(d["type"], tuple(d["center"]), tuple(d["size"]), int(d.get("axis", 2)))


@dataclass(frozen=True)
class ShapeSpec:
    primitives: tuple[Primitive, ...]
    seed: int | None = None

    def validate(self, dims: Sequence[int]) -> None:
        if not self.primitives:
            raise ShapeError("shape needs at least one primitive")
        hi_limit = np.asarray(dims, dtype=np.float64) - 2.0
        for prim in self.primitives:
            lo, hi = prim.bounds()
            if np.any(lo < 1.0) or np.any(hi > hi_limit):
                raise ShapeError(f"{prim.type} at {prim.center} violates the 1-voxel grid margin")

    def to_dict(self) -> dict:
        return {"primitives": [p.to_dict() for p in self.primitives], "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeSpec":
        return cls(tuple(Primitive.from_dict(p) for p in d["primitives"]), d.get("seed"))


def voxel_centers(dims: Sequence[int]) -> np.ndarray:
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def sdf_from_spec(spec: ShapeSpec, dims=(16, 16, 16), truncation: float = 3.0) -> VoxelGrid:
    """Sample the union of ``spec.primitives`` as a truncated signed distance field."""
    dims = tuple(int(n) for n in dims)
    spec.validate(dims)
    pts = voxel_centers(dims)
    dist = np.min([prim.distance(pts) for prim in spec.primitives], axis=0)
    return VoxelGrid(np.clip(dist, -truncation, truncation), SDF, 1.0, truncation)


def to_tudf(g: VoxelGrid) -> VoxelGrid:
    return g.with_values(np.abs(g.values), UDF)


def random_spec(rng: np.random.Generator, dims=(16, 16, 16), max_primitives: int = 3,
                seed: int | None = None) -> ShapeSpec:
    """Draw a union of 1..max_primitives primitives that respects the grid margin."""
    dims = np.asarray(dims, dtype=np.float64)
    n = int(rng.integers(1, max_primitives + 1))
    prims = []
    while len(prims) < n:
        kind = str(rng.choice(["sphere", "box", "cylinder"]))
        scale = dims.min()
        if kind == "sphere":
            size = (float(rng.uniform(0.15, 0.3) * scale),)
        elif kind == "box":
            size = tuple(float(s) for s in rng.uniform(0.1, 0.3, size=3) * scale)
        else:
            size = (float(rng.uniform(0.12, 0.25) * scale), float(rng.uniform(0.15, 0.35) * scale))
        axis = int(rng.integers(0, 3))
        # centers near the middle keep unions connected most of the time
        center = tuple(float(c) for c in (dims - 1) / 2 + rng.uniform(-0.2, 0.2, size=3) * dims)
        prim = Primitive(kind, center, size, axis)
        lo, hi = prim.bounds()
        if np.all(lo >= 1.0) and np.all(hi <= dims - 2.0):
            prims.append(prim)
    return ShapeSpec(tuple(prims), seed)


# ---------------------------------------------------------------------------
# Partial scans


def _ray_view(values: np.ndarray, direction: str) -> np.ndarray:
    """Return a view of ``values`` whose last axis runs along the ray direction."""
    axis = "xyz".index(direction[1])
    v = np.moveaxis(values, axis, -1)
    return v[..., ::-1] if direction[0] == "-" else v


def first_crossing(ray_values: np.ndarray) -> np.ndarray:
    """Index of the first non-positive sample along the last axis (-1 if none)."""
    inside = ray_values <= 0
    hit = inside.any(axis=-1)
    idx = np.argmax(inside, axis=-1)
    return np.where(hit, idx, -1)


def observed_mask(sdf: VoxelGrid, camera_dirs: Sequence[str]) -> np.ndarray:
    """Voxels seen by at least one axis-aligned depth camera.

    Along each ray everything up to and including the first inside voxel is
    observed; everything behind it is occluded. Rays that miss see the whole line.
    """
    if not camera_dirs:
        raise ShapeError("at least one camera direction is required")
    seen = np.zeros(sdf.dims, dtype=bool)
    any_hit = False
    for direction in camera_dirs:
        if direction not in CAMERA_DIRS:
            raise ShapeError(f"unknown camera direction {direction!r}")
        rays = _ray_view(sdf.values, direction)
        k = first_crossing(rays)
        any_hit = any_hit or bool(np.any(k >= 0))
        n = rays.shape[-1]
        limit = np.where(k >= 0, k, n - 1)
        mask_view = np.arange(n) <= limit[..., None]
        _ray_view(seen, direction)[...] |= mask_view
    if not any_hit:
        raise ShapeError("no surface crossing visible from any camera")
    return seen


def surface_voxels(g: VoxelGrid, band: float = 1.0) -> np.ndarray:
    return np.abs(g.values) < band


def simulate_partial_scan(sdf: VoxelGrid, camera_dirs: Sequence[str],
                          keep_fraction_bound: float = 1.0) -> VoxelGrid:
    """Emulate a depth scan from ``camera_dirs``; occluded voxels become ``+truncation``.

    Raises ShapeError when the fraction of surface voxels still observed is
    above ``keep_fraction_bound``.
    """
    if sdf.kind != SDF:
        raise ShapeError("partial scans are simulated from SDF grids")
    seen = observed_mask(sdf, camera_dirs)
    surf = surface_voxels(sdf)
    if surf.any():
        kept = float(seen[surf].mean())
        if kept > keep_fraction_bound:
            raise ShapeError(f"scan keeps {kept:.3f} of the surface, above bound {keep_fraction_bound}")
    out = np.where(seen, sdf.values, np.float32(sdf.truncation))
    return sdf.with_values(out, SDF)


# ---------------------------------------------------------------------------
# VGRD files


def grid_to_bytes(g: VoxelGrid) -> bytes:
    nx, ny, nz = g.dims
    header = _HEADER.pack(GRID_MAGIC, GRID_VERSION, _KIND_CODES[g.kind], nx, ny, nz,
                          g.voxel_size, g.truncation)
    payload = np.asarray(g.values, dtype="<f4").ravel(order="F").tobytes()
    return header + payload


def grid_from_bytes(buf: bytes) -> VoxelGrid:
    if len(buf) < _HEADER.size:
        raise GridFormatError("file shorter than the VGRD header")
    magic, version, kind, nx, ny, nz, voxel_size, truncation = _HEADER.unpack_from(buf)
    if magic != GRID_MAGIC:
        raise GridFormatError(f"bad magic {magic!r}")
    if version != GRID_VERSION:
        raise GridFormatError(f"unsupported VGRD version {version}")
    if kind not in _KIND_NAMES:
        raise GridFormatError(f"unknown kind byte {kind:#04x}")
    payload = buf[_HEADER.size:]
    if nx * ny * nz * 4 != len(payload) or nx * ny * nz == 0:
        raise GridFormatError(f"payload has {len(payload)} bytes, expected {nx * ny * nz * 4}")
    flat = np.frombuffer(payload, dtype="<f4")
    if np.isnan(flat).any():
        raise GridFormatError("NaN in grid payload")
    values = flat.reshape((nx, ny, nz), order="F")
    try:
        return VoxelGrid(values, _KIND_NAMES[kind], float(voxel_size), float(truncation))
    except ValueError as exc:
        raise GridFormatError(str(exc)) from exc


def save_grid(g: VoxelGrid, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(grid_to_bytes(g))
    os.replace(tmp, path)


def load_grid(path) -> VoxelGrid:
    return grid_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Corpus


@dataclass
class ShapePair:
    id: str
    partial: VoxelGrid
    complete: VoxelGrid
    views: list | None = field(default=None)

    def __post_init__(self):
        if self.partial.dims != self.complete.dims:
            raise ValueError("partial and complete grids must share dims")
        if self.partial.kind != SDF or self.complete.kind != UDF:
            raise ValueError("a pair is (SDF partial, UDF complete)")


def make_pair(spec: ShapeSpec, rng: np.random.Generator, dims, truncation: float,
              n_cameras: int = 1, keep_fraction_bound: float = 0.85, pair_id: str = "") -> tuple[ShapePair, list[str]]:
    sdf = sdf_from_spec(spec, dims, truncation)
    order = list(rng.permutation(len(CAMERA_DIRS)))
    # try camera subsets in a seeded order until the scan is genuinely partial
    for start in range(len(order)):
        cams = [CAMERA_DIRS[order[(start + j) % len(order)]] for j in range(n_cameras)]
        try:
            partial = simulate_partial_scan(sdf, cams, keep_fraction_bound)
        except ShapeError:
            continue
        return ShapePair(pair_id, partial, to_tudf(sdf)), cams
    raise ShapeError("no camera set satisfies the keep-fraction bound")


def make_corpus(seed: int, n: int, dims=(16, 16, 16), truncation: float = 3.0, out_dir=".",
                n_cameras: int = 1, keep_fraction_bound: float = 0.85) -> Path:
    """Write ``n`` synthetic (partial, complete) pairs plus ``manifest.json``.

    Output is a deterministic function of the arguments.
    """
    if n < 1:
        raise ValueError("corpus size must be at least 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(n)
    entries = []
    for i, child in enumerate(children):
        pair_seed = int(child.generate_state(1)[0])
        rng = np.random.default_rng(pair_seed)
        pair_id = f"shape_{i:04d}"
        while True:
            spec = random_spec(rng, dims, seed=pair_seed)
            try:
                pair, cams = make_pair(spec, rng, dims, truncation, n_cameras, keep_fraction_bound, pair_id)
                break
            except ShapeError:
                continue
        partial_path, complete_path = f"{pair_id}_partial.vgrd", f"{pair_id}_complete.vgrd"
        save_grid(pair.partial, out_dir / partial_path)
        save_grid(pair.complete, out_dir / complete_path)
        spec_d = spec.to_dict()
        spec_d["cameras"] = cams
        entries.append({"id": pair_id, "partial_path": partial_path, "complete_path": complete_path,
                        "spec": spec_d, "seed": pair_seed})
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(path) -> list[ShapePair]:
    path = Path(path)
    entries = json.loads(path.read_text())
    pairs = []
    for e in entries:
        pairs.append(ShapePair(e["id"], load_grid(path.parent / e["partial_path"]),
                               load_grid(path.parent / e["complete_path"])))
    return pairs
