"""Command line front end for the whole pipeline.

Subcommands: gen-dataset, sample, distill, refine, render, metrics,
selftest. Every generating run writes a manifest carrying the full
flattened config, the seed, the scene identity, and per-file checksums,
which is enough to reproduce the outputs bit for bit.

Exit codes: 0 on success, 2 on usage errors (argparse), 1 on runtime
failures (one structured line on stderr).
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time

import numpy as np

from .config import RunConfig, config_hash, format_kv, load_config
from .dataset import (
    DatasetSpec,
    gen_dataset,
    read_poses,
    resolve_scene,
    write_poses,
)
from .distill import (
    DensityField,
    distill,
    make_refine_score,
    read_hires_field,
    sds_refine,
    write_hires_field,
)
from .fileio import read_grid_values, read_ppm, write_grid_values, write_obj, write_ppm
from .geometry import SdfGrid, extract_mesh
from .metrics import (
    MetricReport,
    metric_chamfer,
    metric_iou,
    metric_multiview_consistency,
)
from .render import MultiViewSet, field_from_grid, make_camera_ring, render_views
from .sampler import run_sampler
from . import scheduler as sch

HIRES_SIZE = 256


def _sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise ValueError(f"bad size {text!r}, expected WIDTHxHEIGHT") from None


def _parse_range(text: str) -> tuple[float, float]:
    try:
        lo, hi = text.split(":")
        return float(lo), float(hi)
    except ValueError:
        raise ValueError(f"bad range {text!r}, expected LO:HI") from None


def _base_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg


def _load_views(views_dir) -> MultiViewSet:
    """Read view_XX.ppm plus poses.txt back into a view set."""
    poses = read_poses(os.path.join(views_dir, "poses.txt"))
    images = []
    for k in range(len(poses)):
        path = os.path.join(views_dir, f"view_{k:02d}.ppm")
        images.append(read_ppm(path))
    return MultiViewSet(images=np.stack(images), poses=poses)


def _write_run_manifest(out_dir, manifest, rel_files) -> None:
    for rel in rel_files:
        manifest.outputs[rel] = _sha256_file(os.path.join(out_dir, rel))
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write(manifest.to_text())


def _write_file_manifest(out_path, mapping: dict[str, str]) -> None:
    with open(str(out_path) + ".manifest.txt", "w") as fh:
        fh.write(format_kv(mapping))


def cmd_gen_dataset(args) -> int:
    spec = DatasetSpec(
        scenes=args.scenes.split(","),
        grid_n=args.grid_n,
        m_fixed=args.views,
        n_random=args.random,
        samples=args.samples,
        prior_n=args.prior_n,
        seed=args.seed,
    )
    spec.width, spec.height = _parse_size(args.size)
    manifest = gen_dataset(spec, args.out)
    n_files = sum(1 for k in manifest if k.startswith("sha256."))
    print(f"wrote {n_files} files for {len(spec.scenes)} scene(s) under {args.out}")
    return 0


def cmd_sample(args) -> int:
    cfg = _base_config(args)
    if args.seed is not None:
        cfg.sampler.seed = args.seed
    if args.label is not None:
        cfg.sampler.label = args.label
    if args.steps is not None:
        cfg.sampler.steps = args.steps
        cfg.sched3d.steps = args.steps
        cfg.sched2d.steps = args.steps
    scene = resolve_scene(args.scene)
    res = run_sampler(cfg, scene)

    out = args.out
    os.makedirs(out, exist_ok=True)
    rel_files = []

    def emit(rel, writer):
        writer(os.path.join(out, rel))
        rel_files.append(rel)

    emit("grid.sdfg", lambda p: write_grid_values(p, res.f0, res.n))
    emit("colors.sdfg", lambda p: write_grid_values(p, res.colors, res.n))
    for k in range(res.v0.images.shape[0]):
        emit(f"view_{k:02d}.ppm", lambda p, k=k: write_ppm(p, res.v0.images[k]))
    emit("poses.txt", lambda p: write_poses(p, res.v0.poses))
    for rec in res.trajectory.records:
        emit(f"snap_t{rec.t:03d}.sdfg",
             lambda p, r=rec: write_grid_values(p, r.f_t, res.n))
    emit("mesh.obj", lambda p: write_obj(p, extract_mesh(res.grid())))

    if args.hires:
        poses = make_camera_ring(
            cfg.render.n_views,
            cfg.render.elevation_deg,
            cfg.render.radius,
            cfg.render.fov_y_deg,
            HIRES_SIZE,
            HIRES_SIZE,
        )
        fld = field_from_grid(res.grid(), res.colors, background=cfg.render.background)
        hires = render_views(
            fld, poses, n_samples=cfg.render.final_samples, seed=cfg.sampler.seed
        )
        for k in range(len(poses)):
            emit(f"hires_{k:02d}.ppm",
                 lambda p, k=k: write_ppm(p, hires.images[k]))

    if os.path.exists(args.scene):
        res.manifest.scene_path = os.path.abspath(args.scene)
        res.manifest.scene_sha256 = _sha256_file(args.scene)
    _write_run_manifest(out, res.manifest, rel_files)
    took = res.manifest.timings.get("sample_s", 0.0)
    print(f"sampled scene {scene.name!r} in {took:.1f}s, wrote {out}")
    return 0


def cmd_distill(args) -> int:
    cfg = _base_config(args)
    dcfg = cfg.distill
    if args.iters is not None:
        dcfg.iters = args.iters
    if args.hires_n is not None:
        dcfg.hires_n = args.hires_n
    if args.seed is not None:
        dcfg.seed = args.seed

    grid_vals, n = read_grid_values(os.path.join(args.run, "grid.sdfg"))
    colors, cn = read_grid_values(os.path.join(args.run, "colors.sdfg"))
    if cn != n:
        raise ValueError("grid and color resolution disagree")
    low = field_from_grid(
        SdfGrid(values=grid_vals.astype(np.float32), n=n),
        colors,
        s=cfg.render.s_sharpness,
        background=cfg.render.background,
    )
    started = time.perf_counter()
    hi = distill(low, dcfg)
    took = time.perf_counter() - started
    write_hires_field(args.out, hi)
    mapping = {
        "kind": "distill",
        "config_hash": config_hash(cfg),
        "input_run": args.run,
        "input_grid_sha256": _sha256_file(os.path.join(args.run, "grid.sdfg")),
        "input_colors_sha256": _sha256_file(os.path.join(args.run, "colors.sdfg")),
        "output_sha256": _sha256_file(args.out),
        "timing.distill_s": f"{took:.3f}",
    }
    for key in sorted(hi.losses):
        mapping[f"loss.{key}"] = f"{hi.losses[key]:.10g}"
    for key, value in sorted(cfg.to_mapping().items()):
        mapping[f"config.{key}"] = value
    _write_file_manifest(args.out, mapping)
    print(
        f"distilled {args.run} -> {args.out} "
        f"(n={hi.n}, density_l1={hi.losses.get('density_l1', float('nan')):.5f}, "
        f"{took:.1f}s)"
    )
    return 0


def cmd_refine(args) -> int:
    cfg = _base_config(args)
    rcfg = cfg.refine
    if args.range is not None:
        rcfg.t_lo_frac, rcfg.t_hi_frac = _parse_range(args.range)
    if args.iters is not None:
        rcfg.iters = args.iters
    if args.seed is not None:
        rcfg.seed = args.seed

    hi = read_hires_field(args.infile)
    views = _load_views(args.run)
    rcfg.render_height = views.images.shape[1]
    rcfg.render_width = views.images.shape[2]
    sched = sch.make_schedule(cfg.sched2d.kind, cfg.sched2d.steps)
    score = make_refine_score(views.images, sched)
    started = time.perf_counter()
    out_hi = sds_refine(hi, score, sched, rcfg, poses=views.poses)
    took = time.perf_counter() - started
    write_hires_field(args.out, out_hi)
    mapping = {
        "kind": "refine",
        "config_hash": config_hash(cfg),
        "input_field": args.infile,
        "input_field_sha256": _sha256_file(args.infile),
        "target_run": args.run,
        "range": f"{rcfg.t_lo_frac:g}:{rcfg.t_hi_frac:g}",
        "output_sha256": _sha256_file(args.out),
        "timing.refine_s": f"{took:.3f}",
    }
    for key in sorted(out_hi.losses):
        mapping[f"loss.{key}"] = f"{out_hi.losses[key]:.10g}"
    for key, value in sorted(cfg.to_mapping().items()):
        mapping[f"config.{key}"] = value
    _write_file_manifest(args.out, mapping)
    print(f"refined {args.infile} -> {args.out} ({rcfg.iters} iters, {took:.1f}s)")
    return 0


def cmd_render(args) -> int:
    values, n = read_grid_values(args.grid)
    if values.ndim == 2 and values.shape[1] == 5:
        from .distill import HiResField

        fld = DensityField(
            HiResField(
                n=n,
                density=values[:, 0].astype(np.float64),
                colors=values[:, 1:4].astype(np.float64),
                mask=values[:, 4] > 0.5,
            )
        )
    elif values.ndim == 1:
        if args.colors:
            colors, cn = read_grid_values(args.colors)
            if cn != n:
                raise ValueError("grid and color resolution disagree")
        else:
            colors = np.full((n**3, 3), 0.5)
        fld = field_from_grid(SdfGrid(values=values.astype(np.float32), n=n), colors)
    else:
        raise ValueError(f"{args.grid}: expected 1 or 5 channels")

    width, height = (HIRES_SIZE, HIRES_SIZE) if args.hires else _parse_size(args.size)
    poses = make_camera_ring(args.views, width=width, height=height)
    view_set = render_views(fld, poses, n_samples=args.samples, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    mapping = {
        "kind": "render",
        "grid": args.grid,
        "grid_sha256": _sha256_file(args.grid),
        "views": str(args.views),
        "size": f"{width}x{height}",
        "samples": str(args.samples),
        "seed": str(args.seed),
    }
    for k in range(len(poses)):
        rel = f"ring_{k:02d}.ppm"
        write_ppm(os.path.join(args.out, rel), view_set.images[k])
        mapping[f"sha256.{rel}"] = _sha256_file(os.path.join(args.out, rel))
    write_poses(os.path.join(args.out, "poses.txt"), poses)
    with open(os.path.join(args.out, "manifest.txt"), "w") as fh:
        fh.write(format_kv(mapping))
    print(f"rendered {len(poses)} views of {args.grid} into {args.out}")
    return 0


def cmd_metrics(args) -> int:
    values_a, n_a = read_grid_values(args.grid)
    report = MetricReport(scalars={})
    if args.ref:
        values_b, n_b = read_grid_values(args.ref)
        if n_a != n_b:
            raise ValueError("grids have different resolutions")
        report.scalars["iou"] = metric_iou(values_a, values_b)
        mesh_a = extract_mesh(SdfGrid(values=values_a.astype(np.float32), n=n_a))
        mesh_b = extract_mesh(SdfGrid(values=values_b.astype(np.float32), n=n_b))
        report.scalars["chamfer"] = metric_chamfer(mesh_a, mesh_b)
    if args.views:
        views = _load_views(args.views)
        colors = None
        if args.colors:
            colors, cn = read_grid_values(args.colors)
            if cn != n_a:
                raise ValueError("grid and color resolution disagree")
        report.scalars["consistency_psnr"] = metric_multiview_consistency(
            views, values_a, n_a, colors=colors
        )
    if not report.scalars:
        raise ValueError("nothing to compute: pass --ref and/or --views")
    text = report.to_text()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    failures = run_selftest(verbose=True)
    return 0 if failures == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bidi3d",
        description="Joint 2D/3D diffusion sampling over SDF grids and view sets",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-dataset", help="bake grids, renders, and priors")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", default="sphere")
    p.add_argument("--grid-n", type=int, default=32)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--random", type=int, default=16)
    p.add_argument("--size", default="64x64")
    p.add_argument("--samples", type=int, default=128)
    p.add_argument("--prior-n", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("sample", help="run the joint reverse chain")
    p.add_argument("--scene", required=True, help="builtin name or scene file")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--label", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--hires", action="store_true",
                   help=f"also export {HIRES_SIZE}x{HIRES_SIZE} ring renders")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("distill", help="fit a hi-res voxel field to a run")
    p.add_argument("--in", dest="run", required=True, help="sample run directory")
    p.add_argument("--out", required=True, help="output field file")
    p.add_argument("--config", default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--hires-n", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("refine", help="low-noise score refinement of a field")
    p.add_argument("--in", dest="infile", required=True, help="field file")
    p.add_argument("--run", required=True, help="run directory with target views")
    p.add_argument("--out", required=True)
    p.add_argument("--range", default=None, help="noise band LO:HI as fractions")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("render", help="offline ring renders of a stored grid")
    p.add_argument("--grid", required=True, help="SDF grid or 5-channel field file")
    p.add_argument("--colors", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--size", default="64x64")
    p.add_argument("--hires", action="store_true")
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("metrics", help="compare stored grids and view sets")
    p.add_argument("--grid", required=True)
    p.add_argument("--ref", default=None)
    p.add_argument("--views", default=None, help="directory with view_XX.ppm + poses.txt")
    p.add_argument("--colors", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("selftest", help="fast invariant checks")
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
