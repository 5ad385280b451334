"""Noise schedules and the denoising-step algebra built on them.

A schedule is a table of cumulative signal fractions alpha_bar[t] for
t = 0..T with alpha_bar[0] = 1. Forward noising, x0 prediction, the
ancestral posterior step and its deterministic variant are all plain
functions over that table. Arithmetic runs in float64: the x0 inversion
divides by sqrt(alpha_bar), which reaches ~1e-4 near the end of a
schedule, and single precision would lose the round-trip there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SCHEDULE_KINDS = ("linear_beta", "cosine")

ALPHA_BAR_GUARD = 1e-8

_COSINE_S = 0.008


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    steps: int
    alpha_bar: np.ndarray  # (steps + 1,) float64, alpha_bar[0] == 1

    def abar(self, t: int) -> float:
        if not 0 <= t <= self.steps:
            raise ScheduleError(f"step {t} outside [0, {self.steps}]")
        return float(self.alpha_bar[t])


def _cosine_f(t: np.ndarray, steps: int) -> np.ndarray:
    angle = (t / steps + _COSINE_S) / (1.0 + _COSINE_S) * (math.pi / 2.0)
    return np.cos(angle) ** 2


def make_schedule(kind: str, steps: int) -> NoiseSchedule:
    """Build the alpha_bar table for one of the known schedule kinds.

    linear_beta ramps beta over 1e-4..0.02 rescaled by 1000/steps so the
    total noise budget stays roughly constant at any step count. cosine
    follows the squared-cosine profile; per-step betas are clipped to
    [1e-8, 0.999] before the table is rebuilt by cumulative product.
    """
    if kind not in SCHEDULE_KINDS:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    if steps < 2:
        raise ScheduleError("schedule needs at least 2 steps")
    if kind == "linear_beta":
        scale = 1000.0 / steps
        betas = np.linspace(1e-4, 0.02, steps, dtype=np.float64) * scale
    else:
        t = np.arange(steps + 1, dtype=np.float64)
        f = _cosine_f(t, steps)
        betas = 1.0 - f[1:] / f[:-1]
    betas = np.clip(betas, 1e-8, 0.999)
    alpha_bar = np.concatenate(([1.0], np.cumprod(1.0 - betas)))
    alpha_bar.flags.writeable = False
    sched = NoiseSchedule(kind=kind, steps=steps, alpha_bar=alpha_bar)
    _check_table(sched)
    return sched


def _check_table(sched: NoiseSchedule) -> None:
    ab = sched.alpha_bar
    if ab.shape != (sched.steps + 1,):
        raise ScheduleError("alpha_bar length must be steps + 1")
    if ab[0] != 1.0:
        raise ScheduleError("alpha_bar[0] must be 1")
    if not np.all(np.diff(ab) < 0):
        raise ScheduleError("alpha_bar must decrease strictly")
    if not 0.0 < ab[-1] < 0.05:
        raise ScheduleError(f"terminal alpha_bar {ab[-1]:.3g} outside (0, 0.05)")


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def forward_noise(x0, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, elementwise."""
    x0 = _as_f64(x0)
    eps = _as_f64(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch {x0.shape} vs {eps.shape}")
    ab = sched.abar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def predict_x0(x_t, eps_pred, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Invert forward_noise for a given noise estimate."""
    x_t = _as_f64(x_t)
    eps_pred = _as_f64(eps_pred)
    if x_t.shape != eps_pred.shape:
        raise ValueError(f"shape mismatch {x_t.shape} vs {eps_pred.shape}")
    if t < 1:
        raise ScheduleError("predict_x0 needs t >= 1")
    ab = sched.abar(t)
    if ab < ALPHA_BAR_GUARD:
        raise ScheduleError(f"alpha_bar[{t}] = {ab:.3g} below guard {ALPHA_BAR_GUARD}")
    return (x_t - math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(ab)


def implied_eps(x_t, x0, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Noise that forward_noise(x0, t, .) would need to produce x_t."""
    x_t = _as_f64(x_t)
    x0 = _as_f64(x0)
    if x_t.shape != x0.shape:
        raise ValueError(f"shape mismatch {x_t.shape} vs {x0.shape}")
    ab = sched.abar(t)
    return (x_t - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)


def ddpm_step(
    x_t,
    eps_pred,
    t: int,
    sched: NoiseSchedule,
    rng: np.random.Generator | None = None,
    *,
    deterministic: bool = False,
) -> np.ndarray:
    """One reverse step from t to t - 1.

    Ancestral mode draws z ~ N(0, I) and adds posterior-variance noise
    (none at t = 1). deterministic=True takes the noise-free path that
    keeps the implied eps direction fixed, so repeated application maps
    x_T to the predicted x0 without randomness.
    """
    x_t = _as_f64(x_t)
    eps_pred = _as_f64(eps_pred)
    if not 1 <= t <= sched.steps:
        raise ScheduleError(f"step {t} outside [1, {sched.steps}]")
    x0_hat = predict_x0(x_t, eps_pred, t, sched)
    ab_t = sched.abar(t)
    ab_prev = sched.abar(t - 1)
    if deterministic:
        return math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_pred
    alpha_t = ab_t / ab_prev
    beta_t = 1.0 - alpha_t
    denom = 1.0 - ab_t
    mean = (
        math.sqrt(ab_prev) * beta_t / denom * x0_hat
        + math.sqrt(alpha_t) * (1.0 - ab_prev) / denom * x_t
    )
    if t == 1:
        return mean
    if rng is None:
        raise ValueError("ancestral step at t > 1 needs an rng")
    var = (1.0 - ab_prev) / denom * beta_t
    return mean + math.sqrt(var) * rng.standard_normal(x_t.shape)


def posterior_sigma(t: int, sched: NoiseSchedule) -> float:
    """Standard deviation added by the ancestral step at t (0 at t = 1)."""
    if not 1 <= t <= sched.steps:
        raise ScheduleError(f"step {t} outside [1, {sched.steps}]")
    if t == 1:
        return 0.0
    ab_t = sched.abar(t)
    ab_prev = sched.abar(t - 1)
    beta_t = 1.0 - ab_t / ab_prev
    return math.sqrt((1.0 - ab_prev) / (1.0 - ab_t) * beta_t)


def simple_loss(eps_pred, eps_true) -> float:
    """Mean squared error between a noise estimate and the truth."""
    a = _as_f64(eps_pred)
    b = _as_f64(eps_true)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return float(np.mean(d * d))
