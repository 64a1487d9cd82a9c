"""Orthographic depth rendering from voxel grids and per-patch view features.

The feature extractor here is a fixed, deterministic descriptor standing in
for a frozen pretrained image backbone. Anything implementing
``ViewFeatureExtractor.__call__(DepthMap) -> ViewFeatures`` can replace it.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .grid import SDF, VoxelGrid

# view name -> (axis marched along, march direction)
VIEW_AXES = {"front": (2, +1), "top": (1, -1), "left": (0, +1)}
DEFAULT_VIEWS = ("front", "top", "left")
UDF_ISO = 1.0

FEATURE_MAGIC = b"VFEA"
FEATURE_VERSION = 1
_FEA_HEADER = struct.Struct("<4sIIII")


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel depth from the entry face; misses hold ``+inf``.

    ``extent`` is the grid length along the view axis.
    """

    view: str
    depths: np.ndarray
    extent: float

    @property
    def hits(self) -> np.ndarray:
        return np.isfinite(self.depths)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depths.shape

    def filled(self) -> np.ndarray:
        return np.where(self.hits, self.depths, self.extent)


@dataclass(frozen=True)
class ViewFeatures:
    values: np.ndarray  # (C_f, h, w)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3:
            raise ValueError("view features must be (channels, h, w)")
        if not np.all(np.isfinite(v)):
            raise ValueError("view features must be finite")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape


def render_depth(g: VoxelGrid, view: str, iso: float | None = None) -> DepthMap:
    """March orthographic rays through ``g`` and record the first iso crossing.

    The crossing is where the field first drops below ``iso`` (default 0 for
    SDF, 1 voxel for UDF), located by linear interpolation between samples.
    Voxel centers sit at integer coordinates, so the entry face is at -0.5.
    """
    if view not in VIEW_AXES:
        raise ValueError(f"unknown view {view!r}")
    if iso is None:
        iso = 0.0 if g.kind == SDF else UDF_ISO
    axis, step = VIEW_AXES[view]
    rays = np.moveaxis(g.values.astype(np.float64), axis, -1)
    if step < 0:
        rays = rays[..., ::-1]
    n = rays.shape[-1]
    below = rays < iso
    hit = below.any(axis=-1)
    k = np.argmax(below, axis=-1)
    prev = np.take_along_axis(rays, np.maximum(k - 1, 0)[..., None], -1)[..., 0]
    cur = np.take_along_axis(rays, k[..., None], -1)[..., 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(prev != cur, (prev - iso) / (prev - cur), 0.0)
    # a ray that starts below iso is hit at the entry face
    pos = np.where(k > 0, k - 1 + frac, -0.5)
    depths = np.where(hit, pos + 0.5, np.inf)
    return DepthMap(view, depths, float(n))


class ViewFeatureExtractor(Protocol):
    def __call__(self, d: DepthMap) -> ViewFeatures: ...


class PatchDescriptor:
    """Five channels per square patch: mean depth, depth variance, x and y
    depth gradients, hit fraction. Depths are divided by the view extent so
    every channel is O(1)."""

    channels = 5

    def __init__(self, patch: int = 4):
        if patch < 1:
            raise ValueError("patch size must be positive")
        self.patch = patch

    def __call__(self, d: DepthMap) -> ViewFeatures:
        h, w = d.shape
        p = self.patch
        if h % p or w % p:
            raise ValueError(f"patch size {p} does not divide depth map {h}x{w}")
        depth = d.filled() / d.extent
        gx = np.zeros_like(depth)
        gy = np.zeros_like(depth)
        if h > 1:
            gx = np.gradient(depth, axis=0)
        if w > 1:
            gy = np.gradient(depth, axis=1)
        hits = d.hits.astype(np.float64)

        def pooled(a):
            return a.reshape(h // p, p, w // p, p).transpose(0, 2, 1, 3).reshape(h // p, w // p, p * p)

        blocks = pooled(depth)
        feats = np.stack([
            blocks.mean(-1),
            blocks.var(-1),
            pooled(gx).mean(-1),
            pooled(gy).mean(-1),
            pooled(hits).mean(-1),
        ])
        return ViewFeatures(feats)


class FileFeatures:
    """Load precomputed features from ``<root>/<key>_<view>.vfea``."""

    def __init__(self, root, key: str):
        self.root = Path(root)
        self.key = key

    def __call__(self, d: DepthMap) -> ViewFeatures:
        return load_features(self.root / f"{self.key}_{d.view}.vfea")


def aggregate_views(fs: Sequence[ViewFeatures]) -> ViewFeatures:
    """Element-wise mean over the view list."""
    if not fs:
        raise ValueError("need at least one view")
    shape = fs[0].shape
    for f in fs[1:]:
        if f.shape != shape:
            raise ValueError(f"view feature shapes differ: {shape} vs {f.shape}")
    stacked = np.stack([f.values.astype(np.float64) for f in fs])
    return ViewFeatures(stacked.mean(axis=0))


def shape_features(g: VoxelGrid, views: Sequence[str] = DEFAULT_VIEWS,
                   extractor: ViewFeatureExtractor | None = None) -> ViewFeatures:
    extractor = extractor or PatchDescriptor()
    return aggregate_views([extractor(render_depth(g, v)) for v in views])


def save_features(f: ViewFeatures, path) -> None:
    c, h, w = f.shape
    Path(path).write_bytes(_FEA_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, c, h, w)
                           + f.values.astype("<f4").tobytes())


def load_features(path) -> ViewFeatures:
    buf = Path(path).read_bytes()
    if len(buf) < _FEA_HEADER.size:
        raise ValueError("file shorter than the VFEA header")
    magic, version, c, h, w = _FEA_HEADER.unpack_from(buf)
    if magic != FEATURE_MAGIC or version != FEATURE_VERSION:
        raise ValueError("not a VFEA v1 file")
    payload = buf[_FEA_HEADER.size:]
    if len(payload) != c * h * w * 4:
        raise ValueError("VFEA payload size mismatch")
    return ViewFeatures(np.frombuffer(payload, dtype="<f4").reshape(c, h, w))
