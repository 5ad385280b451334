"""On-disk dataset generation for the desk-scale corpus.

Each scene gets its baked SDF grid, a color grid, a fixed camera ring of
renders, a set of random supervision views with logged poses, and a coarse
radiance prior latent. Generation is a pure function of (spec, seed):
rerunning writes byte-identical files.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from . import scheduler as sch
from .config import PriorConfig, format_kv, parse_kv_text
from .fileio import write_grid_values, write_ppm
from .geometry import bake_color_grid, bake_grid, builtin_scenes, load_scene
from .priors import make_prior
from .render import CameraPose, field_from_grid, make_camera_ring, render_views

_DOMAIN_RANDOM_POSE = 11
_DOMAIN_DATASET_PRIOR = 12


@dataclass
class DatasetSpec:
    scenes: list[str] = field(default_factory=lambda: ["sphere"])
    grid_n: int = 32
    m_fixed: int = 8
    n_random: int = 16
    width: int = 64
    height: int = 64
    elevation_deg: float = 30.0
    radius: float = 2.2
    fov_y_deg: float = 50.0
    samples: int = 128
    prior_n: int = 16
    seed: int = 0

    def validate(self) -> None:
        if self.m_fixed < 1:
            raise ValueError("need at least one fixed view")
        if self.width < 8 or self.height < 8:
            raise ValueError("image resolution below 8 px")
        if not self.scenes:
            raise ValueError("no scenes given")


def resolve_scene(name: str):
    """A builtin scene name, or a path to a scene text file."""
    builtins = builtin_scenes()
    if name in builtins:
        return builtins[name]
    if os.path.exists(name):
        return load_scene(name)
    raise ValueError(f"unknown scene {name!r} (not builtin, not a file)")


def write_poses(path, poses) -> None:
    lines = []
    for i, p in enumerate(poses):
        lines.append(
            f"{i} {p.azimuth_deg:.17g} {p.elevation_deg:.17g} "
            f"{p.radius:.17g} {p.fov_y_deg:.17g} {p.width} {p.height}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_poses(path) -> tuple[CameraPose, ...]:
    poses = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            _, az, el, rad, fov, w, h = parts
            poses.append(
                CameraPose(
                    azimuth_deg=float(az),
                    elevation_deg=float(el),
                    radius=float(rad),
                    fov_y_deg=float(fov),
                    width=int(w),
                    height=int(h),
                )
            )
    return tuple(poses)


def random_poses(spec: DatasetSpec, scene_idx: int) -> tuple[CameraPose, ...]:
    gen = rngmod.step_rng(spec.seed, _DOMAIN_RANDOM_POSE, scene_idx)
    out = []
    for _ in range(spec.n_random):
        out.append(
            CameraPose(
                azimuth_deg=float(gen.uniform(-180.0, 180.0)),
                elevation_deg=float(gen.uniform(-10.0, 50.0)),
                radius=spec.radius,
                fov_y_deg=spec.fov_y_deg,
                width=spec.width,
                height=spec.height,
            )
        )
    return tuple(out)


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _spec_mapping(spec: DatasetSpec) -> dict[str, str]:
    out = {}
    for key, value in vars(spec).items():
        if key == "scenes":
            out["spec.scenes"] = ",".join(value)
        else:
            out[f"spec.{key}"] = repr(value) if isinstance(value, float) else str(value)
    return out


def gen_dataset(spec: DatasetSpec, out_root) -> dict[str, str]:
    """Write the dataset under out_root; returns the manifest mapping."""
    spec.validate()
    os.makedirs(out_root, exist_ok=True)
    sched = sch.make_schedule("cosine", 50)
    prior_cfg = PriorConfig(coarse_n=spec.prior_n)
    manifest = _spec_mapping(spec)
    rel_files = []

    ring = make_camera_ring(
        spec.m_fixed,
        elevation_deg=spec.elevation_deg,
        radius=spec.radius,
        fov_y_deg=spec.fov_y_deg,
        width=spec.width,
        height=spec.height,
    )

    for scene_idx, name in enumerate(spec.scenes):
        scene = resolve_scene(name)
        scene_dir = os.path.join(out_root, scene.name)
        os.makedirs(scene_dir, exist_ok=True)

        def emit(rel, writer):
            path = os.path.join(scene_dir, rel)
            writer(path)
            rel_files.append(os.path.join(scene.name, rel))

        grid = bake_grid(scene, spec.grid_n)
        colors = bake_color_grid(scene, spec.grid_n)
        emit("grid.sdfg", lambda p: write_grid_values(p, grid.values, grid.n))
        emit("colors.sdfg", lambda p: write_grid_values(p, colors, grid.n))

        fld = field_from_grid(grid, colors)
        ring_seed = int(rngmod.hash_u64(spec.seed, 2 * scene_idx))
        ring_set = render_views(fld, ring, n_samples=spec.samples, seed=ring_seed)
        for k in range(spec.m_fixed):
            emit(f"ring_{k:02d}.ppm",
                 lambda p, k=k: write_ppm(p, ring_set.images[k]))
        emit("ring_poses.txt", lambda p: write_poses(p, ring))

        rnd = random_poses(spec, scene_idx)
        if rnd:
            rnd_seed = int(rngmod.hash_u64(spec.seed, 2 * scene_idx + 1))
            rnd_set = render_views(fld, rnd, n_samples=spec.samples, seed=rnd_seed)
            for k in range(spec.n_random):
                emit(f"rnd_{k:02d}.ppm",
                     lambda p, k=k: write_ppm(p, rnd_set.images[k]))
            emit("rnd_poses.txt", lambda p: write_poses(p, rnd))

        prior = make_prior(
            scene, sched, prior_cfg,
            seed=int(rngmod.hash_u64(spec.seed, _DOMAIN_DATASET_PRIOR, scene_idx)),
            scene_id=scene.name,
        )
        packed = np.concatenate(
            [prior.density[:, None], prior.colors], axis=1
        )
        emit("prior.sdfg", lambda p: write_grid_values(p, packed, prior.n))
        manifest[f"scene.{scene_idx}.name"] = scene.name
        manifest[f"scene.{scene_idx}.source"] = name
        manifest[f"scene.{scene_idx}.prior_t0"] = f"{prior.t0:g}"

    for rel in rel_files:
        manifest[f"sha256.{rel}"] = _sha256(os.path.join(out_root, rel))
    with open(os.path.join(out_root, "manifest.txt"), "w") as fh:
        fh.write(format_kv(manifest))
    return manifest


def spec_from_manifest(text: str) -> DatasetSpec:
    kv = parse_kv_text(text)
    spec = DatasetSpec()
    for key, raw in kv.items():
        if not key.startswith("spec."):
            continue
        name = key[len("spec.") :]
        if name == "scenes":
            spec.scenes = raw.split(",")
        elif hasattr(spec, name):
            cur = getattr(spec, name)
            setattr(spec, name, type(cur)(raw) if not isinstance(cur, bool)
                    else raw == "True")
    return spec
