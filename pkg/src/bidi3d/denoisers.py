"""Analytic denoisers for both domains.

Real diffusion backbones are replaced by exact oracles that know the clean
target and return the algebraically implied noise. Cross-domain guidance
enters by blending the target: the 3D oracle pulls toward the visual hull
carved from the other branch's denoised views, the 2D oracle pulls toward
renders of the current grid. The blend weights are the only knobs, which
keeps every behavior checkable in closed form.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import scipy.ndimage

from . import scheduler as sch
from .config import HullConfig, Oracle2dConfig, Oracle3dConfig
from .priors import RadiancePrior, prior_sdf
from .projection import back_project_views
from .render import MultiViewSet

NEUTRAL_GRAY = 0.5
EMPTY_LABEL = ""
DEFAULT_LABEL = "default"
FAR_SDF = 2.0 * math.sqrt(3.0)


def label_hue(label: str) -> float:
    """Deterministic hue angle for an opaque label token."""
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    return 2.0 * math.pi * (int.from_bytes(digest, "big") / 2.0**64)


@dataclass
class Cond3d:
    """Conditioning bundle for the grid denoiser."""

    views: MultiViewSet | None = None  # denoised views from the image branch
    prior: RadiancePrior | None = None
    label: str = "default"


@dataclass
class Cond2d:
    """Conditioning bundle for the image denoiser."""

    renders: np.ndarray | None = None  # (m, h, w, 3) renders of the grid branch
    label: str = "default"


def oracle_eps(x_t, x0_target, t: int, sched: sch.NoiseSchedule) -> np.ndarray:
    """Noise implied by a known clean target: (x_t - sqrt(ab) x0)/sqrt(1-ab)."""
    if t < 1:
        raise sch.ScheduleError("oracle_eps needs t >= 1 (alpha_bar[0] = 1)")
    return sch.implied_eps(x_t, x0_target, t, sched)


def sdf_from_hull(evidence, n: int, cfg: HullConfig = HullConfig()) -> np.ndarray:
    """Signed distance of the visual hull carved by occupancy evidence.

    Voxels reaching ``inside_evidence`` are hull interior. The signed
    euclidean distance transform runs in world units, then the surface is
    pulled inward by ``shrink`` (soft silhouettes run fat) and interior
    depth is clamped at ``interior_cap``: silhouettes say where matter is
    absent, not how deep it runs, so the hull acts as a thin carving shell.
    """
    evidence = np.asarray(evidence, dtype=np.float64)
    if evidence.shape != (n**3,):
        raise ValueError(f"evidence shape {evidence.shape} != ({n**3},)")
    inside = (evidence >= cfg.inside_evidence).reshape((n, n, n), order="F")
    if not inside.any():
        return np.full(n**3, FAR_SDF)
    spacing = 2.0 / (n - 1)
    d_out = scipy.ndimage.distance_transform_edt(~inside, sampling=spacing)
    d_in = scipy.ndimage.distance_transform_edt(inside, sampling=spacing)
    sdf = (d_out - d_in).reshape(-1, order="F") + cfg.shrink
    return np.maximum(sdf, -cfg.interior_cap)


def hull_target_from_views(
    views: MultiViewSet,
    n: int,
    cfg: HullConfig = HullConfig(),
    background=(1.0, 1.0, 1.0),
) -> np.ndarray:
    """Hull SDF implied by a view set.

    Silhouettes always come from the rgb-to-background distance, never from
    alpha channels: denoised image stacks carry no alpha, and ``shrink`` is
    calibrated against the fattening of exactly this extraction.
    """
    rgb_only = MultiViewSet(images=views.images, poses=views.poses, alphas=None)
    _, evidence = back_project_views(
        rgb_only, n, background=background, silhouette_eps=cfg.silhouette_eps
    )
    return sdf_from_hull(evidence, n, cfg)


def blended_target_3d(
    own_sdf,
    n: int,
    cond: Cond3d,
    *,
    lambda_c: float,
    lambda_p: float,
    hull_cfg: HullConfig = HullConfig(),
    background=(1.0, 1.0, 1.0),
    hull: np.ndarray | None = None,
) -> np.ndarray:
    """Effective clean grid the 3D oracle denoises toward.

    The self target is first pulled toward the prior's occupancy SDF by
    lambda_p, then toward the hull implied by the conditioning views by
    lambda_c. Zero weights skip their branch entirely, so lambda_c = 0
    never touches the views and stays bit-identical to the plain oracle.
    A precomputed ``hull`` (from hull_target_from_views on cond.views)
    skips the carving.
    """
    own_sdf = np.asarray(own_sdf, dtype=np.float64)
    if not 0.0 <= lambda_c <= 1.0 or not 0.0 <= lambda_p <= 1.0:
        raise ValueError("blend weights must lie in [0, 1]")
    base = own_sdf
    prior = cond.prior
    if lambda_p > 0.0 and prior is not None and not prior.dropped:
        base = (1.0 - lambda_p) * own_sdf + lambda_p * prior_sdf(prior, n)
    if lambda_c == 0.0:
        return base
    if hull is None:
        if cond.views is None:
            raise ValueError("lambda_c > 0 needs conditioning views")
        hull = hull_target_from_views(cond.views, n, hull_cfg, background)
    return (1.0 - lambda_c) * base + lambda_c * hull


def blended_target_2d(
    own_images,
    cond: Cond2d,
    *,
    lambda_c: float,
) -> np.ndarray:
    """Effective clean image stack the 2D oracle denoises toward."""
    own = np.asarray(own_images, dtype=np.float64)
    if not 0.0 <= lambda_c <= 1.0:
        raise ValueError("lambda_c must lie in [0, 1]")
    if cond.label == EMPTY_LABEL:
        own = np.full_like(own, NEUTRAL_GRAY)
    if lambda_c == 0.0:
        return own
    if cond.renders is None:
        raise ValueError("lambda_c > 0 needs conditioning renders")
    renders = np.asarray(cond.renders, dtype=np.float64)
    if renders.shape != own.shape:
        raise ValueError(f"render stack {renders.shape} != targets {own.shape}")
    return (1.0 - lambda_c) * own + lambda_c * renders


class Oracle3d:
    """Grid denoiser: exact oracle with hull and prior steering baked in."""

    def __init__(
        self,
        own_sdf,
        n: int,
        sched: sch.NoiseSchedule,
        cfg: Oracle3dConfig = Oracle3dConfig(),
        *,
        hull_cfg: HullConfig = HullConfig(),
        background=(1.0, 1.0, 1.0),
        bias_seed: int = 0,
    ):
        own = np.asarray(own_sdf, dtype=np.float64)
        if own.shape != (n**3,):
            raise ValueError(f"own target shape {own.shape} != ({n**3},)")
        if cfg.bias == "sdf_warp" and cfg.bias_amplitude != 0.0:
            own = own + lowfreq_warp(n, cfg.bias_amplitude, seed=bias_seed)
        elif cfg.bias not in ("none", "sdf_warp"):
            raise ValueError(f"unknown 3d bias {cfg.bias!r}")
        self.own = own
        self.n = n
        self.sched = sched
        self.cfg = cfg
        self.hull_cfg = hull_cfg
        self.background = background
        self._hull_cache: tuple[np.ndarray, np.ndarray] | None = None

    def _hull_for(self, cond: Cond3d) -> np.ndarray | None:
        """Carve (or reuse) the hull for this view stack.

        The cache keys on object identity of the image stack and keeps a
        strong reference, so a recycled id cannot alias a stale entry. The
        guided and unguided calls of one sampling step hit the same stack.
        """
        if self.cfg.lambda_c == 0.0:
            return None
        if cond.views is None:
            raise ValueError("lambda_c > 0 needs conditioning views")
        if self._hull_cache is not None and self._hull_cache[0] is cond.views.images:
            return self._hull_cache[1]
        hull = hull_target_from_views(cond.views, self.n, self.hull_cfg, self.background)
        self._hull_cache = (cond.views.images, hull)
        return hull

    def target(self, cond: Cond3d) -> np.ndarray:
        return blended_target_3d(
            self.own,
            self.n,
            cond,
            lambda_c=self.cfg.lambda_c,
            lambda_p=self.cfg.lambda_p,
            hull_cfg=self.hull_cfg,
            background=self.background,
            hull=self._hull_for(cond),
        )

    def __call__(self, f_t, t: int, cond: Cond3d) -> np.ndarray:
        return oracle_eps(f_t, self.target(cond), t, self.sched)


class Oracle2d:
    """Image denoiser: exact per-view oracle steered by grid renders."""

    def __init__(
        self,
        own_images,
        sched: sch.NoiseSchedule,
        cfg: Oracle2dConfig = Oracle2dConfig(),
    ):
        own = np.asarray(own_images, dtype=np.float64)
        if own.ndim != 4 or own.shape[-1] != 3:
            raise ValueError(f"own images must be (m, h, w, 3), got {own.shape}")
        if cfg.bias == "view_shift" and cfg.shift_px != 0:
            own = shift_views(own, cfg.shift_px)
        elif cfg.bias == "hue_shift" and cfg.hue_amount != 0.0:
            own = shift_hue(own, cfg.hue_amount)
        elif cfg.bias not in ("none", "view_shift", "hue_shift"):
            raise ValueError(f"unknown 2d bias {cfg.bias!r}")
        self.own = own
        self.sched = sched
        self.cfg = cfg

    def target(self, cond: Cond2d) -> np.ndarray:
        own = self.own
        if cond.label not in (EMPTY_LABEL, DEFAULT_LABEL):
            # labels are opaque tokens; each maps to a stable recoloring of
            # the base target (white background sits on the gray axis, so
            # silhouettes are label-invariant)
            own = shift_hue(own, label_hue(cond.label))
        return blended_target_2d(own, cond, lambda_c=self.cfg.lambda_c)

    def __call__(self, v_t, t: int, cond: Cond2d) -> np.ndarray:
        return oracle_eps(v_t, self.target(cond), t, self.sched)


def lowfreq_warp(n: int, amplitude: float, seed: int = 0) -> np.ndarray:
    """Smooth additive SDF perturbation: a few unit-period cosine waves."""
    from .geometry import lattice_points

    rng = np.random.default_rng(seed)
    pts = lattice_points(n)
    field = np.zeros(n**3)
    for _ in range(3):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        field += np.cos(np.pi * (pts @ direction) + phase)
    return amplitude * field / 1.5


def shift_views(images, k: int) -> np.ndarray:
    """Horizontal wraparound shift of every view by k pixels."""
    out = np.asarray(images, dtype=np.float64)
    return np.roll(out, k, axis=2)


def shift_hue(images, amount: float) -> np.ndarray:
    """Rotate rgb around the gray axis by ``amount`` radians, clipped to [0,1]."""
    c, s = math.cos(amount), math.sin(amount)
    a = c + (1.0 - c) / 3.0
    b = (1.0 - c) / 3.0 - s / math.sqrt(3.0)
    d = (1.0 - c) / 3.0 + s / math.sqrt(3.0)
    mat = np.array([[a, b, d], [d, a, b], [b, d, a]])
    out = np.asarray(images, dtype=np.float64) @ mat.T
    return np.clip(out, 0.0, 1.0)
