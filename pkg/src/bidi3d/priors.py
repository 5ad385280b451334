"""Coarse radiance priors standing in for a pretrained latent pathway.

A scene is encoded as its coarse occupancy grid, optionally corrupted with
schedule noise at a fractional level t0, and decoded back into a queryable
low-resolution density prior. Decoding smooths the (possibly noisy) code
with a small separable kernel before a shifted-softplus squash; without the
smoothing, the per-voxel noise at t0 = 0.4 shreds the decoded occupancy
into salt-and-pepper and the prior stops being a usable shape hint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.ndimage as ndi

from .config import PriorConfig
from .geometry import SceneSpec, bake_grid, grid_spacing
from .scheduler import NoiseSchedule

_SMOOTH_KERNEL = np.array([0.2, 0.6, 0.2])


@dataclass(frozen=True)
class LatentCode:
    values: np.ndarray  # (n_c^3,) flattened occupancy features
    n: int


@dataclass
class RadiancePrior:
    """Coarse density + color grids with provenance of how they were made."""

    n: int
    density: np.ndarray  # (n^3,) nonnegative
    colors: np.ndarray  # (n^3, 3)
    scene_id: str = ""
    t0: float = 0.0
    seed: int = 0
    dropped: bool = False


def encode_prior(scene: SceneSpec, n_c: int = 16) -> LatentCode:
    """Deterministic latent: coarse occupancy of the scene, flattened.

    A scene without parts encodes to the zero code.
    """
    if n_c < 8:
        raise ValueError("coarse resolution must be at least 8")
    if not scene.parts:
        return LatentCode(values=np.zeros(n_c**3), n=n_c)
    grid = bake_grid(scene, n_c)
    occ = (grid.values < 0.0).astype(np.float64)
    return LatentCode(values=occ, n=n_c)


def _alpha_bar_at_fraction(sched: NoiseSchedule, frac: float) -> float:
    pos = frac * sched.steps
    return float(np.interp(pos, np.arange(sched.steps + 1), sched.alpha_bar))


def noise_latent(
    code: LatentCode, t0: float, rng: np.random.Generator, sched: NoiseSchedule
) -> LatentCode:
    """Corrupt the code with schedule noise at fractional level t0."""
    if not 0.0 < t0 < 1.0:
        raise ValueError("t0 must lie strictly inside (0, 1)")
    ab = _alpha_bar_at_fraction(sched, t0)
    z = rng.standard_normal(code.values.shape)
    return LatentCode(
        values=math.sqrt(ab) * code.values + math.sqrt(1.0 - ab) * z, n=code.n
    )


def _softplus(x):
    return np.logaddexp(0.0, x)


def decode_prior(
    code: LatentCode,
    cfg: PriorConfig = PriorConfig(),
    *,
    scene_id: str = "",
    t0: float = 0.0,
    seed: int = 0,
) -> RadiancePrior:
    """Turn a (noisy) code into a coarse nonnegative density prior.

    The code is smoothed per axis, then squashed through
    softplus(g (x - c)) - softplus(-g c), which is zero at zero input and
    increases monotonically, so the zero code decodes to zero density.
    Colors are neutral gray; the prior carries shape, not texture.
    """
    n = code.n
    if code.values.shape != (n**3,):
        raise ValueError(f"code length {code.values.size} != {n}^3")
    vol = code.values.reshape((n, n, n), order="F")
    for axis in range(3):
        vol = ndi.convolve1d(vol, _SMOOTH_KERNEL, axis=axis, mode="nearest")
    g, c = cfg.squash_gain, cfg.squash_center
    density = _softplus(g * (vol - c)) - _softplus(-g * c)
    density = np.clip(density, 0.0, None).ravel(order="F")
    colors = np.full((n**3, 3), 0.5)
    return RadiancePrior(
        n=n, density=density, colors=colors, scene_id=scene_id, t0=t0, seed=seed
    )


def drop_prior(prior: RadiancePrior) -> RadiancePrior:
    """Zero out the conditioning; idempotent, provenance marked dropped."""
    return replace(
        prior,
        density=np.zeros_like(prior.density),
        colors=np.zeros_like(prior.colors),
        dropped=True,
    )


def make_prior(
    scene: SceneSpec,
    sched: NoiseSchedule,
    cfg: PriorConfig = PriorConfig(),
    *,
    seed: int = 0,
    scene_id: str = "",
) -> RadiancePrior:
    """encode -> noise at cfg.noise_t_frac -> decode, with provenance."""
    code = encode_prior(scene, cfg.coarse_n)
    noisy = noise_latent(code, cfg.noise_t_frac, np.random.default_rng(seed), sched)
    return decode_prior(noisy, cfg, scene_id=scene_id, t0=cfg.noise_t_frac, seed=seed)


def prior_occupancy(prior: RadiancePrior, threshold: float = 1.0) -> np.ndarray:
    """Binary coarse occupancy from the density grid."""
    return prior.density >= threshold


def prior_sdf(prior: RadiancePrior, n: int, threshold: float = 1.0) -> np.ndarray:
    """Signed distance (world units) to the prior's occupied region, sampled
    on an n-lattice. A dropped or empty prior reads as uniformly outside."""
    occ = prior_occupancy(prior, threshold).reshape((prior.n,) * 3, order="F")
    if not occ.any():
        return np.full(n**3, 2.0 * math.sqrt(3.0))
    h = grid_spacing(prior.n)
    outside = ndi.distance_transform_edt(~occ) * h
    inside = ndi.distance_transform_edt(occ) * h
    coarse = np.where(occ, -inside, outside).ravel(order="F")
    if n == prior.n:
        return coarse
    from .geometry import lattice_points, sample_trilinear

    return sample_trilinear(coarse, prior.n, lattice_points(n))
