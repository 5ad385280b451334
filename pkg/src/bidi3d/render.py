"""Pinhole cameras on a viewing ring and emission-absorption volume rendering
of signed-distance fields.

Rendering composites front to back: alpha_i = 1 - exp(-sigma_i * delta_i),
w_i = T_i * alpha_i with T_i the transmittance before sample i, and the
returned transmittance is defined as 1 - sum(w) so the compositing identity
sum(w) + T = 1 holds exactly in floating point.  Per-pixel stratified jitter
is counter-hashed from (seed, pixel, sample), which makes images independent
of traversal order and safe to render in parallel chunks.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import rng
from .config import RenderConfig
from .geometry import SdfGrid, sample_trilinear

_SQRT3 = math.sqrt(3.0)
_DEPTH_EPS = 1e-10


@dataclass(frozen=True)
class CameraPose:
    azimuth_deg: float
    elevation_deg: float
    radius: float
    fov_y_deg: float = 50.0
    width: int = 64
    height: int = 64


@dataclass(frozen=True)
class Ray:
    origin: tuple[float, float, float]
    direction: tuple[float, float, float]
    t_near: float
    t_far: float


@dataclass
class ImageBuffer:
    """Float image; rgb values live in [0, 1], depth/transmittance are raw."""

    values: np.ndarray

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.values.ndim == 2 else self.values.shape[2]


@dataclass
class MultiViewSet:
    """M images with paired camera poses; alphas (1 - transmittance) optional."""

    images: np.ndarray  # (M, H, W, 3)
    poses: tuple[CameraPose, ...]
    alphas: np.ndarray | None = None  # (M, H, W)


def camera_basis(pose: CameraPose):
    """Origin plus right/up/forward unit vectors for a look-at-origin camera."""
    if abs(pose.elevation_deg) > 89.0:
        raise ValueError("camera elevation capped at +/-89 degrees")
    az = math.radians(pose.azimuth_deg)
    el = math.radians(pose.elevation_deg)
    origin = pose.radius * np.array(
        [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
    )
    forward = -origin / np.linalg.norm(origin)
    world_up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, world_up)
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    return origin, right, up, forward


def make_camera_ring(
    m: int,
    elevation_deg: float = 30.0,
    radius: float = 2.2,
    fov_y_deg: float = 50.0,
    width: int = 64,
    height: int = 64,
) -> tuple[CameraPose, ...]:
    """m poses at fixed elevation, azimuths -180 + 360*k/m."""
    if m < 1:
        raise ValueError("camera ring needs at least one pose")
    return tuple(
        CameraPose(
            azimuth_deg=-180.0 + 360.0 * k / m,
            elevation_deg=elevation_deg,
            radius=radius,
            fov_y_deg=fov_y_deg,
            width=width,
            height=height,
        )
        for k in range(m)
    )


def ring_from_config(cfg: RenderConfig) -> tuple[CameraPose, ...]:
    return make_camera_ring(
        cfg.n_views, cfg.elevation_deg, cfg.radius, cfg.fov_y_deg, cfg.width, cfg.height
    )


def _tangents(pose: CameraPose):
    tan_y = math.tan(math.radians(pose.fov_y_deg) / 2.0)
    return tan_y * pose.width / pose.height, tan_y


def gen_rays(pose: CameraPose):
    """Rays through all pixel centers, row-major; directions normalized.

    Returns (origins, directions), each (H*W, 3).  Pixel (px, py) maps px to
    the +right axis and py downward from the top row, with the image center
    at ((W-1)/2, (H-1)/2).
    """
    origin, right, up, forward = camera_basis(pose)
    tan_x, tan_y = _tangents(pose)
    px = np.arange(pose.width, dtype=np.float64)
    py = np.arange(pose.height, dtype=np.float64)
    xs = (px - (pose.width - 1) / 2.0) / (pose.width / 2.0) * tan_x
    ys = ((pose.height - 1) / 2.0 - py) / (pose.height / 2.0) * tan_y
    xg, yg = np.meshgrid(xs, ys)  # (H, W)
    dirs = forward + xg[..., None] * right + yg[..., None] * up
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(origin, dirs.shape)
    return origins.reshape(-1, 3).copy(), dirs.reshape(-1, 3)


def default_near_far(pose: CameraPose, cfg: RenderConfig | None = None):
    near = far = 0.0
    if cfg is not None:
        near, far = cfg.near, cfg.far
    if near <= 0.0:
        near = max(0.05, pose.radius - _SQRT3)
    if far <= 0.0:
        far = pose.radius + _SQRT3
    return near, far


def sdf_to_density(x, s: float):
    """Bell-shaped density s*e^(-s*x) / (1 + e^(-s*x))^2; peak s/4 at x = 0."""
    ax = np.abs(np.asarray(x, dtype=np.float64))
    e = np.exp(-s * ax)
    return s * e / (1.0 + e) ** 2


class GridField:
    """Radiance field backed by an SDF grid and an RGB voxel grid."""

    def __init__(
        self,
        sdf_values: np.ndarray,
        n: int,
        color_values: np.ndarray | None = None,
        s: float = 20.0,
        background=(1.0, 1.0, 1.0),
    ):
        self.n = n
        self.sdf_values = np.asarray(sdf_values).reshape(-1)
        if color_values is None:
            color_values = np.full((n * n * n, 3), 0.7)
        self.color_values = np.clip(np.asarray(color_values).reshape(-1, 3), 0.0, 1.0)
        self.s = float(s)
        self.background = np.asarray(background, dtype=np.float64)

    def density(self, points: np.ndarray) -> np.ndarray:
        sdf = sample_trilinear(self.sdf_values, self.n, points)
        return sdf_to_density(sdf, self.s)

    def color(self, points: np.ndarray, dirs: np.ndarray | None = None) -> np.ndarray:
        return sample_trilinear(self.color_values, self.n, points)


class FunctionField:
    """Radiance field from closures; handy for analytic test scenes."""

    def __init__(self, density_fn, color_fn=None, background=(1.0, 1.0, 1.0)):
        self._density_fn = density_fn
        self._color_fn = color_fn
        self.background = np.asarray(background, dtype=np.float64)

    def density(self, points):
        return self._density_fn(points)

    def color(self, points, dirs=None):
        if self._color_fn is None:
            return np.full(points.shape[:-1] + (3,), 0.7)
        return self._color_fn(points)


def field_from_grid(
    grid: SdfGrid,
    color_values: np.ndarray | None = None,
    s: float = 20.0,
    background=(1.0, 1.0, 1.0),
) -> GridField:
    """View a baked SDF grid (plus optional color grid) as a radiance field."""
    return GridField(grid.values, grid.n, color_values, s=s, background=background)


def _stratified_positions(seed: int, pixel_ids: np.ndarray, n_samples: int, near, far):
    """(B, S) jittered depths; one uniform draw per (pixel, stratum)."""
    step = (far - near) / n_samples
    idx = np.arange(n_samples, dtype=np.uint64)[None, :]
    u = rng.uniform01(np.uint64(seed & 0xFFFFFFFFFFFFFFFF), pixel_ids[:, None], idx)
    return near + (np.arange(n_samples)[None, :] + u) * step


def composite(sigma: np.ndarray, colors: np.ndarray, m: np.ndarray, deltas: np.ndarray, background):
    """Front-to-back compositing; returns (rgb, depth, transmittance, weights)."""
    alpha = 1.0 - np.exp(-sigma * deltas)
    t_before = np.cumprod(1.0 - alpha, axis=-1)
    t_before = np.concatenate(
        [np.ones_like(t_before[..., :1]), t_before[..., :-1]], axis=-1
    )
    weights = t_before * alpha
    sum_w = weights.sum(axis=-1)
    trans = 1.0 - sum_w
    rgb = (weights[..., None] * colors).sum(axis=-2) + trans[..., None] * background
    depth = (weights * m).sum(axis=-1) / np.maximum(sum_w, _DEPTH_EPS)
    return np.clip(rgb, 0.0, 1.0), depth, trans, weights


def render_rays(
    field,
    origins: np.ndarray,
    dirs: np.ndarray,
    n_samples: int,
    near: float,
    far: float,
    seed: int = 0,
    pixel_ids: np.ndarray | None = None,
):
    """Batched stratified render; returns (rgb (B,3), depth (B,), trans (B,))."""
    if not near < far:
        raise ValueError(f"degenerate ray interval [{near}, {far}]")
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    b = origins.shape[0]
    if pixel_ids is None:
        pixel_ids = np.arange(b, dtype=np.uint64)
    m = _stratified_positions(seed, np.asarray(pixel_ids, dtype=np.uint64), n_samples, near, far)
    # constant per-sample extent: the stratified estimator of the optical
    # depth integral, exact for media homogeneous along the interval
    deltas = np.full_like(m, (far - near) / n_samples)
    pts = origins[:, None, :] + m[..., None] * dirs[:, None, :]
    sigma = field.density(pts)
    colors = field.color(pts, None)
    rgb, depth, trans, _ = composite(sigma, colors, m, deltas, field.background)
    return rgb, depth, trans


def render_ray(field, ray: Ray, n_samples: int, seed: int = 0, pixel_id: int = 0):
    """Single-ray render; bit-identical to the same row of a batched render."""
    o = np.asarray(ray.origin, dtype=np.float64)[None, :]
    d = np.asarray(ray.direction, dtype=np.float64)[None, :]
    rgb, depth, trans = render_rays(
        field,
        o,
        d,
        n_samples,
        ray.t_near,
        ray.t_far,
        seed=seed,
        pixel_ids=np.array([pixel_id], dtype=np.uint64),
    )
    return rgb[0], float(depth[0]), float(trans[0])


def render_view(
    field,
    pose: CameraPose,
    n_samples: int = 64,
    seed: int = 0,
    near: float | None = None,
    far: float | None = None,
    workers: int | None = None,
):
    """Render a full view; returns (rgb, depth, transmittance) ImageBuffers.

    ``workers`` > 1 splits rows across a thread pool (default from
    BIDIFF_THREADS); per-pixel jitter seeding keeps the output bit-identical
    to a sequential render.
    """
    if near is None or far is None:
        d_near, d_far = default_near_far(pose)
        near = d_near if near is None else near
        far = d_far if far is None else far
    origins, dirs = gen_rays(pose)
    h, w = pose.height, pose.width
    pixel_ids = np.arange(h * w, dtype=np.uint64)
    if workers is None:
        workers = rng.worker_count()

    if workers <= 1 or h < 2 * workers:
        rgb, depth, trans = render_rays(
            field, origins, dirs, n_samples, near, far, seed, pixel_ids
        )
    else:
        bounds = np.linspace(0, h * w, workers + 1, dtype=int)
        chunks = [(bounds[i], bounds[i + 1]) for i in range(workers)]

        def work(span):
            lo, hi = span
            return render_rays(
                field, origins[lo:hi], dirs[lo:hi], n_samples, near, far, seed,
                pixel_ids[lo:hi],
            )

        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(work, chunks))
        rgb = np.concatenate([p[0] for p in parts], axis=0)
        depth = np.concatenate([p[1] for p in parts], axis=0)
        trans = np.concatenate([p[2] for p in parts], axis=0)

    return (
        ImageBuffer(rgb.reshape(h, w, 3)),
        ImageBuffer(depth.reshape(h, w)),
        ImageBuffer(trans.reshape(h, w)),
    )


def render_views(
    field,
    poses,
    n_samples: int = 64,
    seed: int = 0,
    near: float | None = None,
    far: float | None = None,
    workers: int | None = None,
) -> MultiViewSet:
    """Render every pose with a per-view derived seed; alphas = 1 - trans."""
    images, alphas = [], []
    for k, pose in enumerate(poses):
        view_seed = int(rng.hash_u64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(k)))
        rgb, _, trans = render_view(field, pose, n_samples, view_seed, near, far, workers)
        images.append(rgb.values)
        alphas.append(1.0 - trans.values)
    return MultiViewSet(
        images=np.stack(images), poses=tuple(poses), alphas=np.stack(alphas)
    )
