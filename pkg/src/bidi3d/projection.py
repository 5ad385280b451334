"""Projecting lattice points into views and fusing what the views report.

project_point is the exact inverse of the ray generator's pixel mapping, so
a point on a pixel's ray lands back on that pixel. Aggregation walks the
full lattice through every view, samples bilinearly, and keeps running
moments; occlusion is deliberately ignored (no z-test), with the variance
and coverage channels carrying the disagreement signal instead.

back_project_views builds a visual-hull style occupancy evidence grid: a
voxel's evidence is the minimum silhouette coverage over all views, i.e.
the soft intersection of the silhouette cones. Points outside a view's
frustum count as uncovered, which confines the hull to the region every
camera can actually see.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import lattice_points
from .render import CameraPose, MultiViewSet, camera_basis, _tangents

_DEPTH_EPS = 1e-9


@dataclass(frozen=True)
class PosEncConfig:
    octaves: int = 6
    omega: float = math.pi


@dataclass
class FeatureVolume:
    """Per-lattice-point fused view features plus a coverage fraction.

    values has 2 * image_channels columns: per-view mean then population
    variance. coverage is the fraction of views whose frustum contains the
    point; rows with coverage 0 are all zero.
    """

    resolution: int
    values: np.ndarray  # (n^3, 2 * C)
    coverage: np.ndarray  # (n^3,)


def project_point(points, pose: CameraPose):
    """Pinhole projection of world points into a camera.

    Returns (u, v, depth, visible) with u along +x of the image (width) and
    v down the rows; integer coordinates sit on pixel centers. visible is
    false behind the camera and outside the pixel footprint
    [-0.5, W-0.5] x [-0.5, H-0.5].
    """
    p = np.asarray(points, dtype=np.float64)
    origin, right, up, forward = camera_basis(pose)
    rel = p - origin
    depth = rel @ forward
    x_cam = rel @ right
    y_cam = rel @ up
    tan_x, tan_y = _tangents(pose)
    with np.errstate(divide="ignore", invalid="ignore"):
        ndc_x = x_cam / depth / tan_x
        ndc_y = y_cam / depth / tan_y
    u = ndc_x * (pose.width / 2.0) + (pose.width - 1) / 2.0
    v = (pose.height - 1) / 2.0 - ndc_y * (pose.height / 2.0)
    inside = (
        (depth > _DEPTH_EPS)
        & (u >= -0.5)
        & (u <= pose.width - 0.5)
        & (v >= -0.5)
        & (v <= pose.height - 0.5)
    )
    u = np.where(depth > _DEPTH_EPS, u, 0.0)
    v = np.where(depth > _DEPTH_EPS, v, 0.0)
    return u, v, depth, inside


def sample_image_bilinear(values: np.ndarray, u, v):
    """Bilinear lookup at (u, v); out-of-footprint points return zeros.

    Returns (samples, inbounds). Coordinates inside the half-pixel border
    are clamped to the edge texel, so integer coordinates reproduce stored
    pixels exactly.
    """
    img = np.asarray(values, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    h, w, c = img.shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    inbounds = (u >= -0.5) & (u <= w - 0.5) & (v >= -0.5) & (v <= h - 0.5)
    uc = np.clip(u, 0.0, w - 1.0)
    vc = np.clip(v, 0.0, h - 1.0)
    u0 = np.floor(uc).astype(np.int64)
    v0 = np.floor(vc).astype(np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (uc - u0)[..., None]
    fv = (vc - v0)[..., None]
    top = img[v0, u0] * (1.0 - fu) + img[v0, u1] * fu
    bot = img[v1, u0] * (1.0 - fu) + img[v1, u1] * fu
    out = top * (1.0 - fv) + bot * fv
    out = np.where(inbounds[..., None], out, 0.0)
    if squeeze:
        out = out[..., 0]
    return out, inbounds


def positional_encoding(points, cfg: PosEncConfig = PosEncConfig()):
    """Sinusoidal octave features: per octave k, sin then cos of 2^k w p."""
    if cfg.octaves < 1:
        raise ValueError("need at least one octave")
    if not cfg.omega > 0:
        raise ValueError("omega must be positive")
    p = np.asarray(points, dtype=np.float64)
    parts = []
    for k in range(cfg.octaves):
        arg = (2.0**k) * cfg.omega * p
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


def aggregate_mean_var(n: int, views: MultiViewSet) -> FeatureVolume:
    """Fuse view colors at every lattice point into [mean, variance].

    Moments are taken over the views whose frustum contains the point
    (population variance, so a single view gives variance zero). Unseen
    points get zero features; coverage reports the visible fraction.
    """
    m = len(views.poses)
    if m == 0 or views.images.shape[0] == 0:
        raise ValueError("need at least one view")
    pts = lattice_points(n)
    c = views.images.shape[-1]
    s1 = np.zeros((n**3, c))
    s2 = np.zeros((n**3, c))
    count = np.zeros(n**3)
    for img, pose in zip(views.images, views.poses):
        u, v, _, vis = project_point(pts, pose)
        feat, _ = sample_image_bilinear(img, u, v)
        feat = np.where(vis[:, None], feat, 0.0)
        s1 += feat
        s2 += feat * feat
        count += vis
    seen = count > 0
    denom = np.where(seen, count, 1.0)[:, None]
    mean = s1 / denom
    var = np.clip(s2 / denom - mean * mean, 0.0, None)
    values = np.concatenate([mean, var], axis=-1)
    values[~seen] = 0.0
    return FeatureVolume(resolution=n, values=values, coverage=count / m)


def silhouettes_from_views(
    views: MultiViewSet,
    background=(1.0, 1.0, 1.0),
    silhouette_eps: float = 0.1,
    alpha_threshold: float = 0.5,
) -> np.ndarray:
    """(M, H, W) binary masks: alpha channel when present, else distance
    from the background color."""
    if views.alphas is not None:
        return (views.alphas > alpha_threshold).astype(np.float64)
    bg = np.asarray(background, dtype=np.float64)
    dist = np.max(np.abs(views.images - bg), axis=-1)
    return (dist > silhouette_eps).astype(np.float64)


def back_project_views(
    views: MultiViewSet,
    n: int,
    *,
    background=(1.0, 1.0, 1.0),
    silhouette_eps: float = 0.1,
    alpha_threshold: float = 0.5,
):
    """Lift a view set onto the lattice: (color grid, occupancy evidence).

    Evidence at a voxel is the minimum over views of bilinearly sampled
    silhouette coverage (out-of-frustum counts as zero), i.e. the soft
    visual-hull intersection. Colors average the covering views, falling
    back to all in-frustum views where nothing covers.
    """
    m = len(views.poses)
    if m == 0 or views.images.shape[0] == 0:
        raise ValueError("need at least one view")
    sils = silhouettes_from_views(views, background, silhouette_eps, alpha_threshold)
    pts = lattice_points(n)
    evidence = np.ones(n**3)
    wsum = np.zeros(n**3)
    csum = np.zeros((n**3, 3))
    fsum = np.zeros((n**3, 3))
    fcnt = np.zeros(n**3)
    for img, sil, pose in zip(views.images, sils, views.poses):
        u, v, _, vis = project_point(pts, pose)
        cov, _ = sample_image_bilinear(sil, u, v)
        cov = np.where(vis, cov, 0.0)
        evidence = np.minimum(evidence, cov)
        rgb, _ = sample_image_bilinear(img, u, v)
        csum += cov[:, None] * rgb
        wsum += cov
        fsum += np.where(vis[:, None], rgb, 0.0)
        fcnt += vis
    colors = np.zeros((n**3, 3))
    covered = wsum > 1e-9
    colors[covered] = csum[covered] / wsum[covered, None]
    fallback = ~covered & (fcnt > 0)
    colors[fallback] = fsum[fallback] / fcnt[fallback, None]
    return colors, evidence


def fill_colors_from_hull(
    colors: np.ndarray, evidence: np.ndarray, n: int, threshold: float = 0.99
) -> np.ndarray:
    """Replace colors outside the evidence hull by the nearest hull color.

    Back-projected colors away from the hull average in background pixels,
    which bleeds into surface shading when the grid is rendered. Rendering
    only ever reads colors near the surface, so snapping every outside
    voxel to its nearest inside voxel removes the bleed without touching
    hull-interior values.
    """
    import scipy.ndimage

    inside = (np.asarray(evidence) >= threshold).reshape((n, n, n), order="F")
    if not inside.any() or inside.all():
        return np.array(colors, copy=True)
    vol = np.asarray(colors).reshape((n, n, n, 3), order="F")
    ix, iy, iz = scipy.ndimage.distance_transform_edt(
        ~inside, return_indices=True
    )[1]
    return vol[ix, iy, iz, :].reshape((n**3, 3), order="F")


def grid_colors_from_views(
    views: MultiViewSet,
    n: int,
    *,
    background=(1.0, 1.0, 1.0),
    silhouette_eps: float = 0.1,
    inside_evidence: float = 0.99,
) -> np.ndarray:
    """Color grid for rendering a shape reconstructed from these views.

    Back-projection followed by the nearest-hull fill, which keeps
    background bleed out of surface shading.
    """
    colors, evidence = back_project_views(
        views,
        n,
        background=background,
        silhouette_eps=silhouette_eps,
    )
    return fill_colors_from_hull(colors, evidence, n, inside_evidence)
