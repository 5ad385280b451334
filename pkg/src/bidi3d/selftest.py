"""Fast invariant checks runnable from the CLI.

Each check is a small self-contained function that raises on violation.
They cover the algebraic identities the pipeline leans on (schedule round
trips, guidance endpoint behavior, compositing partition of unity,
gradient correctness, determinism and replay, file format round trips)
at tiny problem sizes, so the whole registry finishes in well under five
minutes.
"""

from __future__ import annotations

import os
import sys
import tempfile
import time

import numpy as np

from . import scheduler as sch
from .config import RunConfig
from .dataset import DatasetSpec, gen_dataset
from .distill import HiResField, grad_render_l1, render_kernel
from .fileio import (
    read_grid_values,
    read_obj,
    read_ppm,
    write_grid_values,
    write_obj,
    write_ppm,
)
from .geometry import (
    TriMesh,
    bake_grid,
    builtin_scenes,
    lattice_points,
    sample_trilinear,
)
from .metrics import metric_chamfer, metric_iou, metric_psnr
from .projection import aggregate_mean_var, project_point, sample_image_bilinear
from .render import (
    CameraPose,
    FunctionField,
    MultiViewSet,
    make_camera_ring,
    render_rays,
    sdf_to_density,
)
from .sampler import guidance_combine_3d, run_sampler


def _expect(ok: bool, message: str) -> None:
    if not ok:
        raise AssertionError(message)


def _tiny_run_config(steps=3, n=8, **kw) -> RunConfig:
    cfg = RunConfig()
    cfg.sched3d.steps = steps
    cfg.sched2d.steps = steps
    cfg.sampler.steps = steps
    cfg.sampler.grid_n = n
    cfg.sampler.snapshot_every = 1
    cfg.render.n_views = 3
    cfg.render.width = 12
    cfg.render.height = 12
    cfg.render.samples = 6
    cfg.render.final_samples = 6
    for key, value in kw.items():
        setattr(cfg.sampler, key, value)
    return cfg


def check_schedule_round_trip() -> None:
    rng = np.random.default_rng(0)
    for kind in ("linear_beta", "cosine"):
        sched = sch.make_schedule(kind, 40)
        _expect(np.all(np.diff(sched.alpha_bar) < 0), f"{kind}: alpha_bar not decreasing")
        _expect(sched.alpha_bar.min() >= 1e-8, f"{kind}: alpha_bar guard violated")
        x0 = rng.standard_normal((5, 7))
        for t in (1, 17, 40):
            eps = rng.standard_normal(x0.shape)
            x_t = sch.forward_noise(x0, t, eps, sched)
            back = sch.predict_x0(x_t, sch.implied_eps(x_t, x0, t, sched), t, sched)
            _expect(np.allclose(back, x0, atol=1e-9), f"{kind}: round trip drift at t={t}")


def check_guidance_endpoints() -> None:
    rng = np.random.default_rng(1)
    u = rng.standard_normal(64)
    c = rng.standard_normal(64)
    _expect(np.array_equal(guidance_combine_3d(u, c, 0.0), u), "gamma=0 is not uncond")
    _expect(np.array_equal(guidance_combine_3d(u, c, 1.0), c), "gamma=1 is not cond")
    mid = guidance_combine_3d(u, c, 2.0)
    _expect(np.allclose(mid, u + 2.0 * (c - u)), "extrapolation formula broken")


def check_slab_transmittance() -> None:
    sigma = 1.7
    fld = FunctionField(lambda p: np.full(p.shape[:-1], sigma))
    origins = np.array([[-2.0, 0.0, 0.0]])
    dirs = np.array([[1.0, 0.0, 0.0]])
    near, far = 0.5, 3.5
    _, _, trans = render_rays(fld, origins, dirs, n_samples=64, near=near, far=far)
    want = np.exp(-sigma * (far - near))
    _expect(abs(trans[0] - want) <= 0.01 * want, "uniform slab transmittance off by >1%")


def check_weight_partition() -> None:
    rng = np.random.default_rng(2)
    fld = FunctionField(lambda p: 3.0 * rng.random(p.shape[:-1]))
    origins = np.tile([[0.0, 0.0, -2.0]], (4, 1))
    dirs = np.tile([[0.0, 0.0, 1.0]], (4, 1))
    rgb, _, trans = render_rays(fld, origins, dirs, n_samples=32, near=0.2, far=3.8)
    _expect(np.all(np.isfinite(rgb)), "non-finite radiance")
    _expect(np.all((trans >= -1e-12) & (trans <= 1 + 1e-12)), "transmittance out of [0,1]")


def check_density_peak() -> None:
    s = 20.0
    f = np.linspace(-0.5, 0.5, 2001)
    d = sdf_to_density(f, s)
    _expect(abs(d.max() - s / 4.0) <= 1e-9 * s, "bell peak is not s/4")
    _expect(abs(f[np.argmax(d)]) <= 1e-3, "bell peak is not at the zero set")


def check_aggregation_matches_loop() -> None:
    rng = np.random.default_rng(3)
    n = 3
    poses = make_camera_ring(2, width=5, height=5)
    images = rng.random((2, 5, 5, 3))
    views = MultiViewSet(images=images, poses=poses)
    vol = aggregate_mean_var(n, views)
    pts = lattice_points(n)
    for idx in range(n**3):
        feats = []
        for img, pose in zip(images, poses):
            u, v, _, vis = project_point(pts[idx : idx + 1], pose)
            if vis[0]:
                val, _ = sample_image_bilinear(img, u, v)
                feats.append(val[0])
        if feats:
            stack = np.stack(feats)
            want = np.concatenate([stack.mean(0), stack.var(0)])
        else:
            want = np.zeros(6)
        _expect(np.allclose(vol.values[idx], want, atol=1e-12), f"fusion mismatch at {idx}")


def check_trilinear_exact_on_lattice() -> None:
    rng = np.random.default_rng(4)
    n = 5
    grid = rng.standard_normal(n**3)
    got = sample_trilinear(grid, n, lattice_points(n))
    _expect(np.allclose(got, grid, atol=1e-12), "lattice points not reproduced")


def check_sampler_determinism() -> None:
    cfg = _tiny_run_config(seed=9)
    scene = builtin_scenes()["sphere"]
    a = run_sampler(cfg, scene)
    b = run_sampler(cfg, scene)
    _expect(np.array_equal(a.f0, b.f0), "grid differs across identical runs")
    _expect(np.array_equal(a.v0.images, b.v0.images), "views differ across identical runs")


def check_replay_from_snapshot() -> None:
    from .sampler import make_denoisers, replay_from_record
    from .render import ring_from_config

    cfg = _tiny_run_config(steps=4, seed=5)
    scene = builtin_scenes()["sphere"]
    poses = ring_from_config(cfg.render)
    sched3 = sch.make_schedule(cfg.sched3d.kind, cfg.sched3d.steps)
    sched2 = sch.make_schedule(cfg.sched2d.kind, cfg.sched2d.steps)
    den, prior, _ = make_denoisers(cfg, scene, sched3, sched2, poses)
    full = run_sampler(cfg, scene, den=den, prior=prior)
    mid = full.trajectory.at(2)
    state, _ = replay_from_record(mid, den, prior, cfg)
    _expect(np.array_equal(state.f_t, full.f0), "replayed grid differs from full run")


def check_render_gradient_fd() -> None:
    rng = np.random.default_rng(6)
    n = 6
    hi = HiResField(
        n=n,
        density=2.0 * rng.random(n**3),
        colors=rng.random((n**3, 3)),
        mask=np.ones(n**3, dtype=bool),
    )
    pose = CameraPose(30.0, 20.0, 2.2, 50.0, 6, 6)
    target = np.full((36, 3), 0.4)
    g_sigma, _, _, _ = grad_render_l1(hi, pose, target, n_samples=8, loss="sq")
    picks = rng.choice(n**3, size=12, replace=False)
    h = 1e-5
    for j in picks:
        plus = hi.copy()
        plus.density[j] += h
        minus = hi.copy()
        minus.density[j] -= h

        def value(f):
            rgb, _ = render_kernel(f, pose, 8)
            return float(((rgb - target) ** 2).sum())

        fd = (value(plus) - value(minus)) / (2 * h)
        scale = max(abs(fd), abs(g_sigma[j]), 1e-6)
        _expect(abs(fd - g_sigma[j]) / scale <= 1e-3, f"FD mismatch at voxel {j}")


def check_refine_fixed_point() -> None:
    from .config import RefineConfig
    from .distill import make_refine_score, sds_refine

    rng = np.random.default_rng(7)
    n = 8
    hi = HiResField(
        n=n,
        density=np.where(rng.random(n**3) < 0.4, 3.0 * rng.random(n**3), 0.0),
        colors=rng.random((n**3, 3)),
        mask=np.ones(n**3, dtype=bool),
    )
    hi.density[~hi.mask] = 0.0
    cfg = RefineConfig(iters=5, render_width=10, render_height=10, render_samples=8, seed=3)
    poses = make_camera_ring(3, width=10, height=10)
    sched = sch.make_schedule("cosine", 25)
    targets = np.stack([render_kernel(hi, p, 8)[0] for p in poses])
    out = sds_refine(hi, make_refine_score(targets, sched), sched, cfg, poses=poses)
    drift = float(np.abs(out.density - hi.density).max())
    _expect(drift <= 1e-12, f"zero-residual refinement moved the field by {drift:g}")


def check_config_round_trip() -> None:
    cfg = _tiny_run_config(seed=11, label="roundtrip")
    back = RunConfig.from_text(cfg.to_text())
    _expect(back == cfg, "config text round trip changed values")


def check_file_round_trips() -> None:
    rng = np.random.default_rng(8)
    with tempfile.TemporaryDirectory() as tmp:
        vals = rng.standard_normal(4**3).astype(np.float32)
        write_grid_values(os.path.join(tmp, "a.sdfg"), vals, 4)
        back, n = read_grid_values(os.path.join(tmp, "a.sdfg"))
        _expect(n == 4 and np.array_equal(back, vals), "v1 grid round trip failed")

        multi = rng.random((3**3, 5)).astype(np.float32)
        write_grid_values(os.path.join(tmp, "b.sdfg"), multi, 3)
        back, n = read_grid_values(os.path.join(tmp, "b.sdfg"))
        _expect(n == 3 and np.array_equal(back, multi), "v2 grid round trip failed")

        img = rng.random((6, 7, 3))
        write_ppm(os.path.join(tmp, "img.ppm"), img)
        got = read_ppm(os.path.join(tmp, "img.ppm"))
        _expect(np.abs(got - img).max() <= 0.5 / 255 + 1e-9, "ppm quantization exceeded")

        mesh = TriMesh(
            vertices=rng.random((5, 3)), faces=np.array([[0, 1, 2], [2, 3, 4]])
        )
        write_obj(os.path.join(tmp, "m.obj"), mesh)
        got = read_obj(os.path.join(tmp, "m.obj"))
        _expect(
            np.allclose(got.vertices, mesh.vertices) and np.array_equal(got.faces, mesh.faces),
            "obj round trip failed",
        )


def check_dataset_reproducible() -> None:
    spec = DatasetSpec(
        scenes=["sphere"], grid_n=8, m_fixed=2, n_random=1,
        width=12, height=12, samples=6, prior_n=8, seed=2,
    )
    with tempfile.TemporaryDirectory() as d1, tempfile.TemporaryDirectory() as d2:
        m1 = gen_dataset(spec, d1)
        m2 = gen_dataset(spec, d2)
    _expect(m1 == m2, "dataset manifests (file checksums) differ between reruns")


def check_metric_identities() -> None:
    scene = builtin_scenes()["sphere"]
    grid = bake_grid(scene, 12)
    _expect(metric_iou(grid.values, grid.values) == 1.0, "IoU of a grid with itself != 1")
    from .geometry import extract_mesh

    mesh = extract_mesh(grid)
    _expect(metric_chamfer(mesh, mesh) <= 1e-12, "chamfer of a mesh with itself != 0")
    img = np.full((4, 4, 3), 0.3)
    _expect(np.isinf(metric_psnr(img, img)), "psnr of identical images is finite")


CHECKS = [
    ("schedule_round_trip", check_schedule_round_trip),
    ("guidance_endpoints", check_guidance_endpoints),
    ("slab_transmittance", check_slab_transmittance),
    ("weight_partition", check_weight_partition),
    ("density_peak", check_density_peak),
    ("aggregation_matches_loop", check_aggregation_matches_loop),
    ("trilinear_exact_on_lattice", check_trilinear_exact_on_lattice),
    ("sampler_determinism", check_sampler_determinism),
    ("replay_from_snapshot", check_replay_from_snapshot),
    ("render_gradient_fd", check_render_gradient_fd),
    ("refine_fixed_point", check_refine_fixed_point),
    ("config_round_trip", check_config_round_trip),
    ("file_round_trips", check_file_round_trips),
    ("dataset_reproducible", check_dataset_reproducible),
    ("metric_identities", check_metric_identities),
]


def run_selftest(verbose: bool = False, out=None) -> int:
    """Run every check; returns the number of failures."""
    out = out or sys.stdout
    failures = 0
    total_start = time.perf_counter()
    for name, fn in CHECKS:
        started = time.perf_counter()
        try:
            fn()
        except Exception as exc:
            failures += 1
            status = f"FAIL  {type(exc).__name__}: {exc}"
        else:
            status = "ok"
        if verbose:
            took = time.perf_counter() - started
            print(f"{name:<28s} {status} [{took:.2f}s]", file=out)
    if verbose:
        total = time.perf_counter() - total_start
        word = "all passed" if failures == 0 else f"{failures} failed"
        print(f"{len(CHECKS)} checks, {word} [{total:.1f}s]", file=out)
    return failures
