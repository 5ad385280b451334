"""Fidelity and consistency metrics for grids, meshes, and view sets."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import render as R
from .geometry import SdfGrid, TriMesh
from .projection import grid_colors_from_views
from .render import MultiViewSet

PSNR_INF = math.inf


def metric_iou(values_a: np.ndarray, values_b: np.ndarray, iso: float = 0.0) -> float:
    """Voxel IoU of the two sub-iso regions."""
    a = np.asarray(values_a)
    b = np.asarray(values_b)
    if a.shape != b.shape:
        raise ValueError(f"grid shape mismatch {a.shape} vs {b.shape}")
    occ_a = a < iso
    occ_b = b < iso
    union = (occ_a | occ_b).sum()
    if union == 0:
        return 1.0
    return float((occ_a & occ_b).sum() / union)


def sample_mesh_surface(mesh: TriMesh, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform area-weighted point samples on the triangle soup."""
    if len(mesh.faces) == 0:
        raise ValueError("empty mesh")
    tri = mesh.vertices[mesh.faces]  # (f, 3, 3)
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    picks = rng.choice(len(areas), size=count, p=areas / total)
    u = np.sqrt(rng.random(count))[:, None]
    v = rng.random(count)[:, None]
    a, b, c = tri[picks, 0], tri[picks, 1], tri[picks, 2]
    return (1.0 - u) * a + u * (1.0 - v) * b + u * v * c


def _mesh_rng(mesh: TriMesh, seed: int) -> np.random.Generator:
    # key the stream by mesh content, not argument position, so swapping
    # the two meshes reproduces the exact same point sets
    digest = hashlib.blake2b(digest_size=8)
    digest.update(np.ascontiguousarray(mesh.vertices).tobytes())
    digest.update(np.ascontiguousarray(mesh.faces).tobytes())
    key = int.from_bytes(digest.digest(), "big")
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(key,)))


def metric_chamfer(
    mesh_a: TriMesh,
    mesh_b: TriMesh,
    n_samples: int = 20000,
    rng: np.random.Generator | None = None,
    seed: int = 0,
) -> float:
    """Symmetric mean nearest-neighbor distance between surface samples.

    With the default content-keyed sampling the value is exactly symmetric
    in its arguments; passing an explicit rng trades that away for caller
    control of the stream.
    """
    if rng is None:
        pts_a = sample_mesh_surface(mesh_a, n_samples, _mesh_rng(mesh_a, seed))
        pts_b = sample_mesh_surface(mesh_b, n_samples, _mesh_rng(mesh_b, seed))
    else:
        pts_a = sample_mesh_surface(mesh_a, n_samples, rng)
        pts_b = sample_mesh_surface(mesh_b, n_samples, rng)
    d_ab = cKDTree(pts_b).query(pts_a, workers=-1)[0]
    d_ba = cKDTree(pts_a).query(pts_b, workers=-1)[0]
    return float(0.5 * (d_ab.mean() + d_ba.mean()))


def metric_psnr(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """10 log10(1 / MSE) for unit-range images; equal inputs report +inf."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return PSNR_INF
    return float(10.0 * np.log10(1.0 / mse))


def _field_for_views(
    grid_values: np.ndarray,
    n: int,
    views: MultiViewSet,
    colors: np.ndarray | None,
    s: float,
    background,
):
    if colors is None:
        colors = grid_colors_from_views(views, n, background=background)
    grid = SdfGrid(values=np.asarray(grid_values, dtype=np.float32), n=n)
    return R.field_from_grid(grid, colors, s=s, background=background)


def per_view_psnr(
    views: MultiViewSet,
    grid_values: np.ndarray,
    n: int,
    colors: np.ndarray | None = None,
    *,
    s: float = 20.0,
    n_samples: int = 128,
    background=(1.0, 1.0, 1.0),
    seed: int = 101,
) -> np.ndarray:
    """PSNR of each view against a fresh render of the grid at its pose.

    The renders use their own jitter seed, so even a view set produced by
    this very renderer lands at the quadrature ceiling, not at infinity.
    """
    fld = _field_for_views(grid_values, n, views, colors, s, background)
    out = np.empty(len(views.poses))
    for i, pose in enumerate(views.poses):
        rgb, _, _ = R.render_view(fld, pose, n_samples=n_samples, seed=seed + i)
        out[i] = metric_psnr(views.images[i], rgb.values)
    return out


def metric_multiview_consistency(
    views: MultiViewSet,
    grid_values: np.ndarray,
    n: int,
    colors: np.ndarray | None = None,
    **kw,
) -> float:
    """Mean per-view PSNR between a view set and renders of the grid."""
    return float(np.mean(per_view_psnr(views, grid_values, n, colors, **kw)))


def reprojection_rms(
    views: MultiViewSet,
    grid_values: np.ndarray,
    n: int,
    colors: np.ndarray | None = None,
    *,
    s: float = 20.0,
    n_samples: int = 128,
    background=(1.0, 1.0, 1.0),
    seed: int = 101,
) -> float:
    """RMS pixel disagreement between a view set and renders of the grid.

    The low-is-good counterpart of the consistency PSNR, convenient when
    comparing runs whose errors differ by a ratio.
    """
    fld = _field_for_views(grid_values, n, views, colors, s, background)
    total = 0.0
    count = 0
    for i, pose in enumerate(views.poses):
        rgb, _, _ = R.render_view(fld, pose, n_samples=n_samples, seed=seed + i)
        diff = views.images[i] - rgb.values
        total += float((diff**2).sum())
        count += diff.size
    return math.sqrt(total / count)


@dataclass
class MetricReport:
    scalars: dict[str, float] = field(default_factory=dict)
    per_view: dict[str, np.ndarray] = field(default_factory=dict)
    config_hash: str = ""

    def to_mapping(self) -> dict[str, str]:
        out = {"config_hash": self.config_hash}
        for k in sorted(self.scalars):
            out[k] = f"{self.scalars[k]:.10g}"
        for k in sorted(self.per_view):
            vals = self.per_view[k]
            out[k] = " ".join(f"{v:.10g}" for v in vals)
        return out

    def to_text(self) -> str:
        from .config import format_kv

        return format_kv(self.to_mapping())
