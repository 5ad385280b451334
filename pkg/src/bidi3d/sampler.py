"""Joint reverse-diffusion over an SDF grid and its multi-view image stack.

Each step runs six sub-operations in a fixed order: estimate grid noise
(classifier-free over the prior), predict the clean grid, render it at the
camera ring, estimate image noise (classifier-free over the label,
conditioned on those renders), advance both chains one ancestral step, and
cache the denoised views for the next step's grid conditioning. All
randomness is drawn from generators keyed by (seed, domain, step), so any
stored step can be replayed bitwise without the history before it.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rngmod
from . import scheduler as sch
from .config import RunConfig, config_hash, format_kv, parse_kv_text
from .denoisers import Cond2d, Cond3d, EMPTY_LABEL, Oracle2d, Oracle3d
from .geometry import SceneSpec, SdfGrid, bake_color_grid, bake_grid
from .priors import RadiancePrior, drop_prior, make_prior
from .projection import grid_colors_from_views
from .render import MultiViewSet, field_from_grid, render_views, ring_from_config

# rng domain tags; (seed, tag, step) fully addresses every draw of a run
DOMAIN_INIT_3D = 0
DOMAIN_INIT_2D = 1
DOMAIN_STEP_3D = 2
DOMAIN_STEP_2D = 3
DOMAIN_RENDER = 4

_AUTO = object()


class SamplerError(RuntimeError):
    pass


def _combine(eps_uncond, eps_cond, gamma: float) -> np.ndarray:
    if not math.isfinite(gamma):
        raise ValueError(f"guidance scale must be finite, got {gamma}")
    u = np.asarray(eps_uncond, dtype=np.float64)
    c = np.asarray(eps_cond, dtype=np.float64)
    if u.shape != c.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {c.shape}")
    if gamma == 0.0:
        return u
    if gamma == 1.0:
        return c
    return u + gamma * (c - u)


def guidance_combine_3d(eps_uncond, eps_cond, gamma_3d: float) -> np.ndarray:
    """Classifier-free mix of prior-dropped and prior-conditioned estimates."""
    return _combine(eps_uncond, eps_cond, gamma_3d)


def guidance_combine_2d(eps_uncond, eps_cond, gamma_2d: float) -> np.ndarray:
    """Classifier-free mix of empty-label and labeled estimates."""
    return _combine(eps_uncond, eps_cond, gamma_2d)


@dataclass
class DenoiserPair:
    d3: object  # callable (f_t, t, Cond3d) -> eps
    d2: object  # callable (v_t, t, Cond2d) -> eps


@dataclass
class TeacherBundle:
    """Ground-truth signals for teacher forcing."""

    views: np.ndarray  # (m, h, w, 3) reference views
    renders: np.ndarray  # (m, h, w, 3) reference renders at guidance quality


@dataclass
class SamplerState:
    t: int  # next step to execute; 0 after the chain finished
    f_t: np.ndarray
    v_t: np.ndarray
    v_prev: np.ndarray  # denoised views cached from step t + 1


@dataclass
class StepRecord:
    t: int
    f_t: np.ndarray
    v_t: np.ndarray
    v_prev: np.ndarray
    f0_hat: np.ndarray
    renders: np.ndarray | None
    metrics: dict[str, float]


@dataclass
class Trajectory:
    snapshot_every: int
    records: list[StepRecord] = field(default_factory=list)

    def at(self, t: int) -> StepRecord:
        for rec in self.records:
            if rec.t == t:
                return rec
        raise KeyError(f"no snapshot at t = {t}")


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    scene_name: str
    sched3d: str
    sched2d: str
    prior_provenance: str
    label: str
    config_text: str = ""  # full flattened config, enough to rebuild the run
    scene_path: str = ""
    scene_sha256: str = ""
    outputs: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    def to_mapping(self) -> dict[str, str]:
        out = {
            "config_hash": self.config_hash,
            "seed": str(self.seed),
            "scene_name": self.scene_name,
            "sched3d": self.sched3d,
            "sched2d": self.sched2d,
            "prior_provenance": self.prior_provenance,
            "label": self.label,
            "scene_path": self.scene_path,
            "scene_sha256": self.scene_sha256,
        }
        for k, v in sorted(parse_kv_text(self.config_text).items()):
            out[f"config.{k}"] = v
        for k in sorted(self.outputs):
            out[f"output.{k}"] = self.outputs[k]
        for k in sorted(self.timings):
            out[f"timing.{k}"] = f"{self.timings[k]:.3f}"
        return out

    def to_text(self) -> str:
        return format_kv(self.to_mapping())

    @classmethod
    def from_text(cls, text: str) -> "RunManifest":
        kv = parse_kv_text(text)
        config_kv = {
            k[len("config.") :]: v for k, v in kv.items() if k.startswith("config.")
        }
        return cls(
            config_hash=kv.get("config_hash", ""),
            seed=int(kv.get("seed", "0")),
            scene_name=kv.get("scene_name", ""),
            sched3d=kv.get("sched3d", ""),
            sched2d=kv.get("sched2d", ""),
            prior_provenance=kv.get("prior_provenance", ""),
            label=kv.get("label", ""),
            config_text=format_kv(config_kv),
            scene_path=kv.get("scene_path", ""),
            scene_sha256=kv.get("scene_sha256", ""),
            outputs={
                k[len("output.") :]: v for k, v in kv.items() if k.startswith("output.")
            },
            timings={
                k[len("timing.") :]: float(v)
                for k, v in kv.items()
                if k.startswith("timing.")
            },
        )


@dataclass
class RunResult:
    f0: np.ndarray  # (n^3,) float64 final grid
    n: int
    v0: MultiViewSet
    colors: np.ndarray  # (n^3, 3) lifted from v0
    trajectory: Trajectory
    manifest: RunManifest

    def grid(self) -> SdfGrid:
        return SdfGrid(n=self.n, values=self.f0.astype(np.float32))


def _render_seed(seed: int, t: int) -> int:
    return int(rngmod.hash_u64(seed, DOMAIN_RENDER, t))


def bidi_step(
    state: SamplerState,
    den: DenoiserPair,
    prior: RadiancePrior | None,
    cfg: RunConfig,
    poses,
    sched3: sch.NoiseSchedule,
    sched2: sch.NoiseSchedule,
    teacher: TeacherBundle | None = None,
) -> tuple[SamplerState, StepRecord]:
    """One joint step; returns the advanced state and the step record."""
    sc = cfg.sampler
    t = state.t
    if t < 1:
        raise SamplerError(f"step index {t} outside the chain")
    try:
        n = sc.grid_n
        views_set = None
        if sc.enable_2d_to_3d:
            if sc.teacher_forced_3d:
                if teacher is None:
                    raise SamplerError("teacher forcing needs a TeacherBundle")
                src = teacher.views
            else:
                src = state.v_prev
            views_set = MultiViewSet(images=src, poses=tuple(poses), alphas=None)

        cond_with = Cond3d(views=views_set, prior=prior, label=sc.label)
        uncond_prior = drop_prior(prior) if prior is not None else None
        cond_drop = Cond3d(views=views_set, prior=uncond_prior, label=sc.label)
        if sc.gamma_3d == 0.0:
            eps3 = np.asarray(den.d3(state.f_t, t, cond_drop), dtype=np.float64)
        elif sc.gamma_3d == 1.0:
            eps3 = np.asarray(den.d3(state.f_t, t, cond_with), dtype=np.float64)
        else:
            eps3 = guidance_combine_3d(
                den.d3(state.f_t, t, cond_drop),
                den.d3(state.f_t, t, cond_with),
                sc.gamma_3d,
            )

        f0_hat = sch.predict_x0(state.f_t, eps3, t, sched3)

        renders = None
        if sc.enable_3d_to_2d:
            if sc.teacher_forced_2d:
                if teacher is None:
                    raise SamplerError("teacher forcing needs a TeacherBundle")
                renders = teacher.renders
            else:
                pv_set = MultiViewSet(
                    images=state.v_prev, poses=tuple(poses), alphas=None
                )
                colors = grid_colors_from_views(
                    pv_set,
                    n,
                    background=cfg.render.background,
                    silhouette_eps=cfg.hull.silhouette_eps,
                )
                fld = field_from_grid(
                    SdfGrid(n=n, values=f0_hat.astype(np.float32)),
                    colors,
                    s=cfg.render.s_sharpness,
                    background=cfg.render.background,
                )
                renders = render_views(
                    fld,
                    poses,
                    n_samples=cfg.render.samples,
                    seed=_render_seed(sc.seed, t),
                ).images

        cond_lab = Cond2d(renders=renders, label=sc.label)
        cond_emp = Cond2d(renders=renders, label=EMPTY_LABEL)
        if sc.gamma_2d == 0.0:
            eps2 = np.asarray(den.d2(state.v_t, t, cond_emp), dtype=np.float64)
        elif sc.gamma_2d == 1.0:
            eps2 = np.asarray(den.d2(state.v_t, t, cond_lab), dtype=np.float64)
        else:
            eps2 = guidance_combine_2d(
                den.d2(state.v_t, t, cond_emp),
                den.d2(state.v_t, t, cond_lab),
                sc.gamma_2d,
            )

        rng3 = rngmod.step_rng(sc.seed, DOMAIN_STEP_3D, t)
        rng2 = rngmod.step_rng(sc.seed, DOMAIN_STEP_2D, t)
        f_next = sch.ddpm_step(
            state.f_t, eps3, t, sched3, rng3, deterministic=sc.deterministic
        )
        v_next = sch.ddpm_step(
            state.v_t, eps2, t, sched2, rng2, deterministic=sc.deterministic
        )
        v_denoised = sch.predict_x0(state.v_t, eps2, t, sched2)
    except SamplerError:
        raise
    except Exception as exc:
        raise SamplerError(f"step t={t}: {exc}") from exc

    record = StepRecord(
        t=t,
        f_t=state.f_t,
        v_t=state.v_t,
        v_prev=state.v_prev,
        f0_hat=f0_hat,
        renders=renders,
        metrics={
            "eps3_rms": float(np.sqrt(np.mean(eps3**2))),
            "eps2_rms": float(np.sqrt(np.mean(eps2**2))),
        },
    )
    next_state = SamplerState(t=t - 1, f_t=f_next, v_t=v_next, v_prev=v_denoised)
    return next_state, record


def run_from_state(
    state: SamplerState,
    den: DenoiserPair,
    prior: RadiancePrior | None,
    cfg: RunConfig,
    poses,
    sched3: sch.NoiseSchedule,
    sched2: sch.NoiseSchedule,
    teacher: TeacherBundle | None = None,
) -> tuple[SamplerState, Trajectory]:
    """Drive the chain from ``state`` down to t = 1; snapshots along the way.

    This is the replay entry point: resuming from any stored record's
    (t, F_t, V_t, V') reproduces the rest of the run bitwise, because all
    per-step randomness is re-derived from (seed, domain, t).
    """
    sc = cfg.sampler
    traj = Trajectory(snapshot_every=max(1, sc.snapshot_every))
    while state.t >= 1:
        state, rec = bidi_step(state, den, prior, cfg, poses, sched3, sched2, teacher)
        total = sc.steps
        if (
            rec.t == total
            or rec.t == 1
            or (total - rec.t) % traj.snapshot_every == 0
        ):
            traj.records.append(rec)
    return state, traj


def make_denoisers(
    cfg: RunConfig, scene: SceneSpec, sched3, sched2, poses
) -> tuple[DenoiserPair, RadiancePrior, TeacherBundle]:
    """Exact-oracle denoiser pair, prior, and teacher signals for a scene."""
    sc = cfg.sampler
    n = sc.grid_n
    baked = bake_grid(scene, n)
    gt_field = field_from_grid(
        baked,
        bake_color_grid(scene, n),
        s=cfg.render.s_sharpness,
        background=cfg.render.background,
    )
    gt_views = render_views(
        gt_field, poses, n_samples=cfg.render.final_samples, seed=0
    )
    gt_guidance = render_views(gt_field, poses, n_samples=cfg.render.samples, seed=0)

    o3cfg = cfg.oracle3d
    if not sc.enable_2d_to_3d:
        o3cfg = replace(o3cfg, lambda_c=0.0)
    o2cfg = cfg.oracle2d
    if not sc.enable_3d_to_2d:
        o2cfg = replace(o2cfg, lambda_c=0.0)
    d3 = Oracle3d(
        baked.values,
        n,
        sched3,
        o3cfg,
        hull_cfg=cfg.hull,
        background=cfg.render.background,
        bias_seed=0,
    )
    d2 = Oracle2d(gt_views.images, sched2, o2cfg)
    prior = make_prior(scene, sched3, cfg.prior, seed=0, scene_id=scene.name)
    teacher = TeacherBundle(views=gt_views.images, renders=gt_guidance.images)
    return DenoiserPair(d3=d3, d2=d2), prior, teacher


def _prior_provenance(prior: RadiancePrior | None) -> str:
    if prior is None:
        return "none"
    if prior.dropped:
        return "dropped"
    return f"{prior.scene_id or 'scene'}:t0={prior.t0:g}:seed={prior.seed}"


def build_manifest(
    cfg: RunConfig, scene: SceneSpec, prior: RadiancePrior | None
) -> RunManifest:
    return RunManifest(
        config_hash=config_hash(cfg),
        seed=cfg.sampler.seed,
        scene_name=scene.name,
        sched3d=f"{cfg.sched3d.kind}:{cfg.sched3d.steps}",
        sched2d=f"{cfg.sched2d.kind}:{cfg.sched2d.steps}",
        prior_provenance=_prior_provenance(prior),
        label=cfg.sampler.label,
        config_text=cfg.to_text(),
    )


def run_sampler(
    cfg: RunConfig,
    scene: SceneSpec,
    den: DenoiserPair | None = None,
    prior=_AUTO,
    teacher: TeacherBundle | None = None,
) -> RunResult:
    """Full reverse chain from fresh noise; den/prior default to oracles."""
    cfg.validate()
    sc = cfg.sampler
    sched3 = sch.make_schedule(cfg.sched3d.kind, cfg.sched3d.steps)
    sched2 = sch.make_schedule(cfg.sched2d.kind, cfg.sched2d.steps)
    poses = ring_from_config(cfg.render)
    n = sc.grid_n
    m = cfg.render.n_views

    if den is None:
        den, auto_prior, auto_teacher = make_denoisers(cfg, scene, sched3, sched2, poses)
        if prior is _AUTO:
            prior = auto_prior
        if teacher is None:
            teacher = auto_teacher
    elif prior is _AUTO:
        prior = None

    started = time.perf_counter()
    t_total = sc.steps
    f_t = rngmod.step_rng(sc.seed, DOMAIN_INIT_3D, 0).standard_normal(n**3)
    v_t = rngmod.step_rng(sc.seed, DOMAIN_INIT_2D, 0).standard_normal(
        (m, cfg.render.height, cfg.render.width, 3)
    )
    if sc.teacher_forced_3d:
        if teacher is None:
            raise SamplerError("teacher forcing needs a TeacherBundle")
        v_prev = np.array(teacher.views, dtype=np.float64)
    else:
        # no denoised views exist before the first step; the x0 implied by
        # zero predicted noise is still (scaled) noise, which back-projects
        # to an uninformative everything-hull
        v_prev = sch.predict_x0(v_t, np.zeros_like(v_t), t_total, sched2)
    state = SamplerState(t=t_total, f_t=f_t, v_t=v_t, v_prev=v_prev)

    state, traj = run_from_state(state, den, prior, cfg, poses, sched3, sched2, teacher)

    v0 = MultiViewSet(images=state.v_t, poses=tuple(poses), alphas=None)
    colors = grid_colors_from_views(
        v0, n, background=cfg.render.background, silhouette_eps=cfg.hull.silhouette_eps
    )
    manifest = build_manifest(cfg, scene, prior)
    manifest.timings["sample_s"] = time.perf_counter() - started
    return RunResult(
        f0=state.f_t, n=n, v0=v0, colors=colors, trajectory=traj, manifest=manifest
    )


def replay_from_record(
    rec: StepRecord,
    den: DenoiserPair,
    prior: RadiancePrior | None,
    cfg: RunConfig,
    teacher: TeacherBundle | None = None,
) -> tuple[SamplerState, Trajectory]:
    """Resume the chain from a stored snapshot."""
    sched3 = sch.make_schedule(cfg.sched3d.kind, cfg.sched3d.steps)
    sched2 = sch.make_schedule(cfg.sched2d.kind, cfg.sched2d.steps)
    poses = ring_from_config(cfg.render)
    state = SamplerState(t=rec.t, f_t=rec.f_t, v_t=rec.v_t, v_prev=rec.v_prev)
    return run_from_state(state, den, prior, cfg, poses, sched3, sched2, teacher)


def _with_sampler(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, sampler=replace(cfg.sampler, **kw))


def control_texture(
    cfg: RunConfig, scene: SceneSpec, labels
) -> dict[str, RunResult]:
    """Rerun the sampler varying only the label; geometry seeds stay pinned.

    Per-step noise is keyed by (seed, domain, t) and the label never enters
    those keys, so the 3D channel sees identical draws across labels.
    """
    return {
        label: run_sampler(_with_sampler(cfg, label=label), scene)
        for label in labels
    }


def control_geometry(
    cfg: RunConfig, scene: SceneSpec, prior_scenes: dict[str, SceneSpec]
) -> dict[str, RunResult]:
    """Rerun the sampler varying only the prior; image seeds stay pinned."""
    sched3 = sch.make_schedule(cfg.sched3d.kind, cfg.sched3d.steps)
    out = {}
    for name, prior_scene in prior_scenes.items():
        prior = make_prior(prior_scene, sched3, cfg.prior, seed=0, scene_id=name)
        out[name] = run_sampler(cfg, scene, prior=prior)
    return out
