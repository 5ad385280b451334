import numpy as np
import pytest
from dataclasses import replace

from bidi3d import scheduler as sch
from bidi3d.config import RunConfig
from bidi3d.denoisers import Cond2d, Cond3d, Oracle2d, Oracle3d
from bidi3d.geometry import bake_grid, builtin_scenes
from bidi3d.metrics import metric_iou
from bidi3d.priors import make_prior
from bidi3d.render import ring_from_config
from bidi3d.rng import step_rng
from bidi3d.sampler import (
    DOMAIN_INIT_2D,
    DOMAIN_INIT_3D,
    DenoiserPair,
    RunManifest,
    SamplerError,
    SamplerState,
    TeacherBundle,
    bidi_step,
    build_manifest,
    control_texture,
    guidance_combine_2d,
    guidance_combine_3d,
    make_denoisers,
    replay_from_record,
    run_sampler,
)


def tiny_config(**sampler_kw):
    base = RunConfig()
    steps = sampler_kw.pop("steps", 6)
    sampler = dict(
        steps=steps,
        grid_n=12,
        gamma_3d=1.0,
        gamma_2d=1.0,
        seed=0,
        snapshot_every=2,
    )
    sampler.update(sampler_kw)
    return replace(
        base,
        sched3d=replace(base.sched3d, steps=steps),
        sched2d=replace(base.sched2d, steps=steps),
        sampler=replace(base.sampler, **sampler),
        oracle3d=replace(base.oracle3d, lambda_c=0.1, lambda_p=0.1),
        oracle2d=replace(base.oracle2d, lambda_c=0.5),
        render=replace(base.render, samples=8),
    )


class TestGuidanceCombine:
    def test_gamma_zero_is_uncond_bitwise(self):
        rng = np.random.default_rng(0)
        u = rng.standard_normal(100)
        c = rng.standard_normal(100)
        assert np.array_equal(guidance_combine_3d(u, c, 0.0), u)
        assert np.array_equal(guidance_combine_2d(u, c, 0.0), u)

    def test_gamma_one_is_cond_bitwise(self):
        rng = np.random.default_rng(1)
        u = rng.standard_normal(100)
        c = rng.standard_normal(100)
        assert np.array_equal(guidance_combine_3d(u, c, 1.0), c)
        assert np.array_equal(guidance_combine_2d(u, c, 1.0), c)

    def test_gamma_two_extrapolates(self):
        rng = np.random.default_rng(2)
        u = rng.standard_normal(64)
        c = rng.standard_normal(64)
        out = guidance_combine_3d(u, c, 2.0)
        assert np.allclose(out, 2.0 * c - u, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            guidance_combine_3d(np.zeros(4), np.zeros(5), 1.0)

    def test_nonfinite_gamma_rejected(self):
        with pytest.raises(ValueError):
            guidance_combine_2d(np.zeros(4), np.zeros(4), float("nan"))


class _RecordingDenoiser:
    """Stub that logs every conditioning it sees and predicts zero noise."""

    def __init__(self):
        self.calls = []

    def __call__(self, x_t, t, cond):
        self.calls.append((t, cond))
        return np.zeros_like(np.asarray(x_t, dtype=np.float64))


class TestCallSkipping:
    def _step_once(self, gamma_3d):
        cfg = tiny_config(
            gamma_3d=gamma_3d, gamma_2d=gamma_3d, enable_3d_to_2d=False
        )
        sched3 = sch.make_schedule(cfg.sched3d.kind, cfg.sched3d.steps)
        sched2 = sch.make_schedule(cfg.sched2d.kind, cfg.sched2d.steps)
        poses = ring_from_config(cfg.render)
        n = cfg.sampler.grid_n
        m = cfg.render.n_views
        prior = make_prior(
            builtin_scenes()["sphere"], sched3, cfg.prior, seed=0, scene_id="sphere"
        )
        d3, d2 = _RecordingDenoiser(), _RecordingDenoiser()
        state = SamplerState(
            t=cfg.sampler.steps,
            f_t=np.zeros(n**3),
            v_t=np.zeros((m, cfg.render.height, cfg.render.width, 3)),
            v_prev=np.zeros((m, cfg.render.height, cfg.render.width, 3)),
        )
        bidi_step(
            state, DenoiserPair(d3, d2), prior, cfg, poses, sched3, sched2
        )
        return d3, d2

    def test_gamma_zero_single_dropped_call(self):
        d3, d2 = self._step_once(0.0)
        assert len(d3.calls) == 1
        assert d3.calls[0][1].prior.dropped
        assert len(d2.calls) == 1
        assert d2.calls[0][1].label == ""

    def test_gamma_one_single_conditioned_call(self):
        d3, d2 = self._step_once(1.0)
        assert len(d3.calls) == 1
        assert not d3.calls[0][1].prior.dropped
        assert len(d2.calls) == 1
        assert d2.calls[0][1].label == "default"

    def test_gamma_between_calls_both_branches(self):
        d3, d2 = self._step_once(1.5)
        assert len(d3.calls) == 2
        flags = sorted(c.prior.dropped for _, c in d3.calls)
        assert flags == [False, True]
        labels = sorted(c.label for _, c in d2.calls)
        assert labels == ["", "default"]


class TestDecoupling:
    def test_flags_off_equals_independent_chains(self):
        cfg = tiny_config(enable_2d_to_3d=False, enable_3d_to_2d=False, gamma_2d=1.0)
        scene = builtin_scenes()["sphere"]
        res = run_sampler(cfg, scene)

        sched3 = sch.make_schedule(cfg.sched3d.kind, cfg.sched3d.steps)
        sched2 = sch.make_schedule(cfg.sched2d.kind, cfg.sched2d.steps)
        poses = ring_from_config(cfg.render)
        den, prior, _ = make_denoisers(cfg, scene, sched3, sched2, poses)
        sc = cfg.sampler
        n, m = sc.grid_n, cfg.render.n_views
        from bidi3d.sampler import DOMAIN_STEP_2D, DOMAIN_STEP_3D

        f = step_rng(sc.seed, DOMAIN_INIT_3D, 0).standard_normal(n**3)
        v = step_rng(sc.seed, DOMAIN_INIT_2D, 0).standard_normal(
            (m, cfg.render.height, cfg.render.width, 3)
        )
        cond3 = Cond3d(views=None, prior=prior, label=sc.label)
        cond2 = Cond2d(renders=None, label=sc.label)
        for t in range(sc.steps, 0, -1):
            eps3 = np.asarray(den.d3(f, t, cond3), dtype=np.float64)
            eps2 = np.asarray(den.d2(v, t, cond2), dtype=np.float64)
            f = sch.ddpm_step(f, eps3, t, sched3, step_rng(sc.seed, DOMAIN_STEP_3D, t))
            v = sch.ddpm_step(v, eps2, t, sched2, step_rng(sc.seed, DOMAIN_STEP_2D, t))
        assert np.array_equal(res.f0, f)
        assert np.array_equal(res.v0.images, v)


class TestDeterminism:
    def test_same_seed_bitwise(self):
        cfg = tiny_config()
        scene = builtin_scenes()["sphere"]
        a = run_sampler(cfg, scene)
        b = run_sampler(cfg, scene)
        assert np.array_equal(a.f0, b.f0)
        assert np.array_equal(a.v0.images, b.v0.images)
        assert np.array_equal(a.colors, b.colors)

    def test_different_seed_differs(self):
        scene = builtin_scenes()["sphere"]
        a = run_sampler(tiny_config(seed=0), scene)
        b = run_sampler(tiny_config(seed=1), scene)
        assert not np.array_equal(a.f0, b.f0)

    def test_replay_from_snapshot_bitwise(self):
        cfg = tiny_config()
        scene = builtin_scenes()["sphere"]
        res = run_sampler(cfg, scene)
        sched3 = sch.make_schedule(cfg.sched3d.kind, cfg.sched3d.steps)
        sched2 = sch.make_schedule(cfg.sched2d.kind, cfg.sched2d.steps)
        poses = ring_from_config(cfg.render)
        den, prior, _ = make_denoisers(cfg, scene, sched3, sched2, poses)
        mid = [r.t for r in res.trajectory.records if 1 < r.t < cfg.sampler.steps][0]
        rec = res.trajectory.at(mid)
        state, _ = replay_from_record(rec, den, prior, cfg)
        assert state.t == 0
        assert np.array_equal(state.f_t, res.f0)
        assert np.array_equal(state.v_t, res.v0.images)

    def test_snapshot_policy_keeps_ends(self):
        cfg = tiny_config(snapshot_every=4)
        res = run_sampler(cfg, builtin_scenes()["sphere"])
        ts = [r.t for r in res.trajectory.records]
        assert cfg.sampler.steps in ts
        assert 1 in ts


class TestTeacherForcing:
    def _cfg(self, **kw):
        return tiny_config(enable_3d_to_2d=False, **kw)

    def test_forced_views_reach_denoiser_every_step(self):
        cfg = self._cfg(teacher_forced_3d=True)
        sched3 = sch.make_schedule(cfg.sched3d.kind, cfg.sched3d.steps)
        sched2 = sch.make_schedule(cfg.sched2d.kind, cfg.sched2d.steps)
        poses = ring_from_config(cfg.render)
        m = cfg.render.n_views
        shape = (m, cfg.render.height, cfg.render.width, 3)
        teacher = TeacherBundle(
            views=np.full(shape, 0.25), renders=np.full(shape, 0.5)
        )
        d3, d2 = _RecordingDenoiser(), _RecordingDenoiser()
        prior = make_prior(
            builtin_scenes()["sphere"], sched3, cfg.prior, seed=0, scene_id="sphere"
        )
        n = cfg.sampler.grid_n
        state = SamplerState(
            t=cfg.sampler.steps,
            f_t=np.zeros(n**3),
            v_t=np.zeros(shape),
            v_prev=np.zeros(shape),
        )
        bidi_step(
            state, DenoiserPair(d3, d2), prior, cfg, poses, sched3, sched2, teacher
        )
        for _, cond in d3.calls:
            assert cond.views.images is teacher.views

    def test_forcing_without_bundle_rejected(self):
        cfg = self._cfg(teacher_forced_3d=True)
        sched3 = sch.make_schedule(cfg.sched3d.kind, cfg.sched3d.steps)
        sched2 = sch.make_schedule(cfg.sched2d.kind, cfg.sched2d.steps)
        poses = ring_from_config(cfg.render)
        n = cfg.sampler.grid_n
        m = cfg.render.n_views
        shape = (m, cfg.render.height, cfg.render.width, 3)
        state = SamplerState(
            t=cfg.sampler.steps,
            f_t=np.zeros(n**3),
            v_t=np.zeros(shape),
            v_prev=np.zeros(shape),
        )
        pair = DenoiserPair(_RecordingDenoiser(), _RecordingDenoiser())
        with pytest.raises(SamplerError):
            bidi_step(state, pair, None, cfg, poses, sched3, sched2, None)

    def test_step_below_one_rejected(self):
        cfg = self._cfg()
        sched3 = sch.make_schedule(cfg.sched3d.kind, cfg.sched3d.steps)
        sched2 = sch.make_schedule(cfg.sched2d.kind, cfg.sched2d.steps)
        poses = ring_from_config(cfg.render)
        state = SamplerState(
            t=0, f_t=np.zeros(12**3), v_t=np.zeros((8, 64, 64, 3)),
            v_prev=np.zeros((8, 64, 64, 3)),
        )
        pair = DenoiserPair(_RecordingDenoiser(), _RecordingDenoiser())
        with pytest.raises(SamplerError):
            bidi_step(state, pair, None, cfg, poses, sched3, sched2)


class TestPriorVariants:
    def test_gamma_zero_makes_prior_irrelevant(self):
        cfg = tiny_config(gamma_3d=0.0)
        scene = builtin_scenes()["sphere"]
        scenes = builtin_scenes()
        sched3 = sch.make_schedule(cfg.sched3d.kind, cfg.sched3d.steps)
        pa = make_prior(scenes["box"], sched3, cfg.prior, seed=0, scene_id="box")
        pb = make_prior(scenes["torus"], sched3, cfg.prior, seed=0, scene_id="torus")
        a = run_sampler(cfg, scene, prior=pa)
        b = run_sampler(cfg, scene, prior=pb)
        assert np.array_equal(a.f0, b.f0)
        assert np.array_equal(a.v0.images, b.v0.images)

    def test_gamma_one_prior_pulls_result(self):
        cfg = tiny_config(gamma_3d=3.0, steps=8)
        cfg = replace(cfg, oracle3d=replace(cfg.oracle3d, lambda_p=0.3))
        scenes = builtin_scenes()
        sched3 = sch.make_schedule(cfg.sched3d.kind, cfg.sched3d.steps)
        box_prior = make_prior(scenes["box"], sched3, cfg.prior, seed=0, scene_id="box")
        with_box = run_sampler(cfg, scenes["sphere"], prior=box_prior)
        plain = run_sampler(replace(cfg, sampler=replace(cfg.sampler, gamma_3d=0.0)),
                            scenes["sphere"], prior=box_prior)
        gt_box = bake_grid(scenes["box"], cfg.sampler.grid_n).values.astype(np.float64)
        assert metric_iou(with_box.f0, gt_box) > metric_iou(plain.f0, gt_box)


class TestEndToEnd:
    def test_sphere_rollout_recovers_shape(self):
        cfg = tiny_config(steps=10, grid_n=16)
        scene = builtin_scenes()["sphere"]
        res = run_sampler(cfg, scene)
        gt = bake_grid(scene, 16).values.astype(np.float64)
        assert metric_iou(res.f0, gt) > 0.8
        assert res.v0.images.shape == (8, 64, 64, 3)
        assert np.all(np.isfinite(res.v0.images))
        assert res.colors.shape == (16**3, 3)

    def test_grid_accessor_round_trips_values(self):
        cfg = tiny_config(steps=4)
        res = run_sampler(cfg, builtin_scenes()["sphere"])
        grid = res.grid()
        assert grid.n == cfg.sampler.grid_n
        assert grid.values.dtype == np.float32
        assert np.allclose(grid.values, res.f0, atol=1e-6)


class TestControlOps:
    def test_same_label_bitwise_identical(self):
        cfg = tiny_config(steps=4)
        scene = builtin_scenes()["sphere"]
        runs = control_texture(cfg, scene, ["moss"])
        rerun = control_texture(cfg, scene, ["moss"])
        assert np.array_equal(runs["moss"].f0, rerun["moss"].f0)
        assert np.array_equal(runs["moss"].v0.images, rerun["moss"].v0.images)

    def test_two_labels_share_geometry_not_color(self):
        cfg = tiny_config(steps=8, grid_n=16)
        scene = builtin_scenes()["sphere"]
        runs = control_texture(cfg, scene, ["moss", "rust"])
        a, b = runs["moss"], runs["rust"]
        assert metric_iou(a.f0, b.f0) > 0.9
        mean_a = a.v0.images.mean(axis=(0, 1, 2))
        mean_b = b.v0.images.mean(axis=(0, 1, 2))
        assert float(np.linalg.norm(mean_a - mean_b)) > 0.05


class TestManifest:
    def test_round_trip_and_config_recovery(self):
        cfg = tiny_config()
        scene = builtin_scenes()["sphere"]
        res = run_sampler(cfg, scene)
        man = res.manifest
        man.outputs["grid"] = "out/grid.bin"
        man.scene_path = "scenes/sphere.txt"
        man.scene_sha256 = "ab" * 32
        text = man.to_text()
        back = RunManifest.from_text(text)
        assert back.to_text() == text
        assert RunConfig.from_text(back.config_text) == cfg
        assert back.outputs == {"grid": "out/grid.bin"}
        assert "sample_s" in back.timings

    def test_provenance_strings(self):
        cfg = tiny_config()
        scene = builtin_scenes()["sphere"]
        sched3 = sch.make_schedule(cfg.sched3d.kind, cfg.sched3d.steps)
        prior = make_prior(scene, sched3, cfg.prior, seed=0, scene_id="sphere")
        man = build_manifest(cfg, scene, prior)
        assert man.prior_provenance.startswith("sphere:t0=")
        assert build_manifest(cfg, scene, None).prior_provenance == "none"
        from bidi3d.priors import drop_prior

        assert build_manifest(cfg, scene, drop_prior(prior)).prior_provenance == "dropped"
        assert man.sched3d == f"{cfg.sched3d.kind}:{cfg.sched3d.steps}"

    def test_lockstep_schedule_enforced(self):
        cfg = tiny_config()
        cfg = replace(cfg, sched2d=replace(cfg.sched2d, steps=12))
        with pytest.raises(ValueError):
            run_sampler(cfg, builtin_scenes()["sphere"])
