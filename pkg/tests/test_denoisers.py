"""Oracle denoisers, hull carving, target blending, and bias injection."""

from __future__ import annotations

import numpy as np
import pytest

from bidi3d import denoisers as D
from bidi3d import geometry as G
from bidi3d import render as R
from bidi3d import scheduler as S
from bidi3d.config import HullConfig, Oracle2dConfig, Oracle3dConfig, RenderConfig

N = 32


@pytest.fixture(scope="module")
def sched():
    return S.make_schedule("cosine", 50)


@pytest.fixture(scope="module")
def ring():
    return R.ring_from_config(RenderConfig())


def _scene_views(name, ring, samples=32):
    scene = G.builtin_scenes()[name]
    grid = G.bake_grid(scene, N)
    field = R.field_from_grid(grid, G.bake_color_grid(scene, N), s=20.0)
    return grid, R.render_views(field, ring, n_samples=samples, seed=0)


@pytest.fixture(scope="module")
def sphere(ring):
    return _scene_views("sphere", ring)


@pytest.fixture(scope="module")
def box(ring):
    return _scene_views("box", ring)


def _iou(a, b):
    return (a & b).sum() / (a | b).sum()


# --- plain oracle ---


def test_oracle_eps_inverts_forward_noise(sched):
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=500)
    eps = rng.normal(size=500)
    for t in (1, 10, 50):
        x_t = S.forward_noise(x0, t, eps, sched)
        got = D.oracle_eps(x_t, x0, t, sched)
        assert np.allclose(got, eps, atol=1e-9)


def test_oracle_eps_zero_for_scaled_target(sched):
    rng = np.random.default_rng(1)
    x_t = rng.normal(size=200)
    t = 25
    got = D.oracle_eps(x_t, x_t / np.sqrt(sched.abar(t)), t, sched)
    assert np.allclose(got, 0.0, atol=1e-12)


def test_oracle_eps_simple_loss_sweep(sched):
    rng = np.random.default_rng(2)
    for trial in range(20):
        t = int(rng.integers(1, sched.steps + 1))
        x0 = rng.normal(size=64)
        eps = rng.normal(size=64)
        x_t = S.forward_noise(x0, t, eps, sched)
        assert S.simple_loss(D.oracle_eps(x_t, x0, t, sched), eps) < 1e-6


def test_oracle_eps_rejects_t_zero(sched):
    with pytest.raises(S.ScheduleError):
        D.oracle_eps(np.zeros(4), np.zeros(4), 0, sched)


# --- hull carving ---


def test_sdf_from_hull_empty_evidence_is_far():
    sdf = D.sdf_from_hull(np.zeros(N**3), N)
    assert np.all(sdf > 1.0)


def test_sdf_from_hull_respects_interior_cap():
    scene = G.builtin_scenes()["sphere"]
    evidence = (G.bake_grid(scene, N).values < 0).astype(np.float64)
    cfg = HullConfig(shrink=0.0, interior_cap=0.07)
    sdf = D.sdf_from_hull(evidence, N, cfg)
    assert sdf.min() >= -0.07 - 1e-12
    assert sdf.min() == pytest.approx(-0.07)


def test_sdf_from_hull_shrink_erodes():
    scene = G.builtin_scenes()["sphere"]
    evidence = (G.bake_grid(scene, N).values < 0).astype(np.float64)
    loose = D.sdf_from_hull(evidence, N, HullConfig(shrink=0.0, interior_cap=10.0))
    tight = D.sdf_from_hull(evidence, N, HullConfig(shrink=0.1, interior_cap=10.0))
    assert (tight < 0).sum() < (loose < 0).sum()
    assert np.allclose(tight - loose, 0.1)


def test_hull_of_true_views_matches_target(sphere):
    grid, views = sphere
    hull = D.hull_target_from_views(views, N)
    assert _iou(hull < 0, grid.values < 0) > 0.9


def test_hull_prefers_the_viewed_shape(sphere, box):
    grid_a, views_a = sphere
    grid_b, _ = box
    hull = D.hull_target_from_views(views_a, N)
    iou_a = _iou(hull < 0, grid_a.values < 0)
    iou_b = _iou(hull < 0, grid_b.values < 0)
    assert iou_a > iou_b


# --- conditioned 3d oracle ---


def test_oracle3d_lambda_zero_bitwise(sched, sphere):
    grid, _ = sphere
    o3 = D.Oracle3d(grid.values, N, sched, Oracle3dConfig(lambda_c=0.0, lambda_p=0.0))
    rng = np.random.default_rng(3)
    f_t = rng.normal(size=N**3)
    got = o3(f_t, 10, D.Cond3d())
    want = D.oracle_eps(f_t, grid.values, 10, sched)
    assert np.array_equal(got, want)


def test_oracle3d_missing_views_error(sched, sphere):
    grid, _ = sphere
    o3 = D.Oracle3d(grid.values, N, sched, Oracle3dConfig(lambda_c=0.5, lambda_p=0.0))
    with pytest.raises(ValueError):
        o3(np.zeros(N**3), 10, D.Cond3d(views=None))


def test_oracle3d_blend_linear_in_lambda_c(sched, sphere):
    grid, views = sphere
    cond = D.Cond3d(views=views)
    targets = {}
    for lam in (0.0, 0.5, 1.0):
        o3 = D.Oracle3d(
            grid.values, N, sched, Oracle3dConfig(lambda_c=lam, lambda_p=0.0)
        )
        targets[lam] = o3.target(cond)
    mid = 0.5 * (targets[0.0] + targets[1.0])
    assert np.allclose(targets[0.5], mid, atol=1e-12)


def test_oracle3d_full_hull_target_stays_close(sched, sphere):
    grid, views = sphere
    o3 = D.Oracle3d(grid.values, N, sched, Oracle3dConfig(lambda_c=1.0, lambda_p=0.0))
    rng = np.random.default_rng(4)
    f_t = rng.normal(size=N**3)
    t = 20
    implied_x0 = S.predict_x0(f_t, o3(f_t, t, D.Cond3d(views=views)), t, sched)
    assert np.allclose(implied_x0, o3.target(D.Cond3d(views=views)), atol=1e-9)
    assert _iou(implied_x0 < 0, grid.values < 0) > 0.9


def test_oracle3d_dropped_prior_ignored(sched, sphere):
    from bidi3d import priors as PR

    grid, _ = sphere
    prior = PR.drop_prior(PR.make_prior(G.builtin_scenes()["box"], sched, seed=0))
    o3 = D.Oracle3d(grid.values, N, sched, Oracle3dConfig(lambda_c=0.0, lambda_p=0.3))
    t_with = o3.target(D.Cond3d(prior=prior))
    t_none = o3.target(D.Cond3d(prior=None))
    assert np.array_equal(t_with, t_none)
    assert np.array_equal(t_with, grid.values)


def test_oracle3d_prior_blend_moves_target(sched, sphere):
    from bidi3d import priors as PR

    grid, _ = sphere
    prior = PR.make_prior(G.builtin_scenes()["box"], sched, seed=0)
    o3 = D.Oracle3d(grid.values, N, sched, Oracle3dConfig(lambda_c=0.0, lambda_p=0.3))
    target = o3.target(D.Cond3d(prior=prior))
    own = grid.values.astype(np.float64)
    want = 0.7 * own + 0.3 * PR.prior_sdf(prior, N)
    assert np.allclose(target, want, atol=1e-12)


# --- conditioned 2d oracle ---


def test_oracle2d_lambda_zero_bitwise(sched, sphere):
    _, views = sphere
    o2 = D.Oracle2d(views.images, sched, Oracle2dConfig(lambda_c=0.0))
    rng = np.random.default_rng(5)
    v_t = rng.normal(size=views.images.shape)
    got = o2(v_t, 7, D.Cond2d())
    assert np.array_equal(got, D.oracle_eps(v_t, views.images, 7, sched))


def test_oracle2d_missing_renders_error(sched, sphere):
    _, views = sphere
    o2 = D.Oracle2d(views.images, sched, Oracle2dConfig(lambda_c=0.5))
    with pytest.raises(ValueError):
        o2(np.zeros_like(views.images), 7, D.Cond2d(renders=None))


def test_oracle2d_render_count_mismatch(sched, sphere):
    _, views = sphere
    o2 = D.Oracle2d(views.images, sched, Oracle2dConfig(lambda_c=0.5))
    with pytest.raises(ValueError):
        o2(np.zeros_like(views.images), 7, D.Cond2d(renders=views.images[:3]))


def test_oracle2d_blend_linear_in_lambda_c(sched, sphere):
    _, views = sphere
    renders = np.clip(views.images + 0.1, 0.0, 1.0)
    cond = D.Cond2d(renders=renders)
    targets = {
        lam: D.Oracle2d(views.images, sched, Oracle2dConfig(lambda_c=lam)).target(cond)
        for lam in (0.0, 0.5, 1.0)
    }
    assert np.allclose(targets[0.5], 0.5 * (targets[0.0] + targets[1.0]), atol=1e-12)


def test_oracle2d_full_guidance_matches_quality_renders(ring, sched):
    grid, views32 = _scene_views("sphere", ring, samples=32)
    _, views128 = _scene_views("sphere", ring, samples=128)
    o2 = D.Oracle2d(views128.images, sched, Oracle2dConfig(lambda_c=1.0))
    target = o2.target(D.Cond2d(renders=views32.images))
    mse = np.mean((target - views128.images) ** 2)
    assert 10.0 * np.log10(1.0 / mse) > 30.0


def test_oracle2d_empty_label_denoises_toward_gray(sched, sphere):
    _, views = sphere
    o2 = D.Oracle2d(views.images, sched, Oracle2dConfig(lambda_c=0.0))
    target = o2.target(D.Cond2d(label=D.EMPTY_LABEL))
    assert np.all(target == 0.5)


# --- bias / perturbed oracles ---


def test_zero_bias_identical_to_plain(sched, sphere):
    grid, views = sphere
    plain3 = D.Oracle3d(grid.values, N, sched, Oracle3dConfig(lambda_c=0.0))
    warped3 = D.Oracle3d(
        grid.values,
        N,
        sched,
        Oracle3dConfig(lambda_c=0.0, bias="sdf_warp", bias_amplitude=0.0),
    )
    assert np.array_equal(plain3.own, warped3.own)
    plain2 = D.Oracle2d(views.images, sched, Oracle2dConfig())
    shifted2 = D.Oracle2d(
        views.images, sched, Oracle2dConfig(bias="view_shift", shift_px=0)
    )
    assert np.array_equal(plain2.own, shifted2.own)


def test_unknown_bias_rejected(sched, sphere):
    grid, views = sphere
    with pytest.raises(ValueError):
        D.Oracle3d(grid.values, N, sched, Oracle3dConfig(bias="melt"))
    with pytest.raises(ValueError):
        D.Oracle2d(views.images, sched, Oracle2dConfig(bias="melt"))


def test_warp_bias_degrades_unconditioned_rollout(sched, sphere):
    grid, _ = sphere
    cfg = Oracle3dConfig(
        lambda_c=0.0, lambda_p=0.0, bias="sdf_warp", bias_amplitude=0.1
    )
    o3 = D.Oracle3d(grid.values, N, sched, cfg, bias_seed=0)
    rng = np.random.default_rng(6)
    x = rng.normal(size=N**3)
    for t in range(sched.steps, 0, -1):
        x = S.ddpm_step(x, o3(x, t, D.Cond3d()), t, sched, rng)
    assert np.allclose(x, o3.own, atol=1e-9)  # exact oracle converges exactly
    assert _iou(x < 0, grid.values < 0) < 0.9


def test_view_shift_bias_rolls_pixels(sched, sphere):
    _, views = sphere
    o2 = D.Oracle2d(
        views.images, sched, Oracle2dConfig(bias="view_shift", shift_px=4)
    )
    assert np.array_equal(o2.own, np.roll(views.images, 4, axis=2))


def test_hue_shift_fixes_gray_and_moves_color():
    gray = np.full((1, 4, 4, 3), 0.5)
    assert np.allclose(D.shift_hue(gray, 1.0), gray, atol=1e-12)
    red = np.zeros((1, 2, 2, 3))
    red[..., 0] = 0.8
    shifted = D.shift_hue(red, 2.0 * np.pi / 3.0)
    assert shifted[0, 0, 0, 1] == pytest.approx(0.8, abs=1e-9)
    assert shifted[0, 0, 0, 0] == pytest.approx(0.0, abs=1e-9)


def test_denoisers_are_pure(sched, sphere):
    grid, views = sphere
    o3 = D.Oracle3d(grid.values, N, sched, Oracle3dConfig(lambda_c=0.5, lambda_p=0.0))
    f_t = np.random.default_rng(8).normal(size=N**3)
    cond = D.Cond3d(views=views)
    assert np.array_equal(o3(f_t, 9, cond), o3(f_t, 9, cond))
    assert o3(f_t, 9, cond).shape == f_t.shape
