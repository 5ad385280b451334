import hashlib
import os

import numpy as np
import pytest

from bidi3d.dataset import (
    DatasetSpec,
    gen_dataset,
    random_poses,
    read_poses,
    resolve_scene,
    spec_from_manifest,
    write_poses,
)
from bidi3d.fileio import read_grid_values, read_ppm
from bidi3d.geometry import bake_grid, builtin_scenes, save_scene
from bidi3d.render import make_camera_ring


def tiny_spec(**kw) -> DatasetSpec:
    base = dict(
        scenes=["sphere"],
        grid_n=8,
        m_fixed=3,
        n_random=2,
        width=16,
        height=16,
        samples=8,
        prior_n=8,
        seed=1,
    )
    base.update(kw)
    return DatasetSpec(**base)


def tree_hashes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            path = os.path.join(dirpath, name)
            rel = os.path.relpath(path, root)
            out[rel] = hashlib.sha256(open(path, "rb").read()).hexdigest()
    return out


class TestSpecAndScenes:
    def test_validation_rejects_degenerate_specs(self):
        with pytest.raises(ValueError):
            tiny_spec(m_fixed=0).validate()
        with pytest.raises(ValueError):
            tiny_spec(width=4).validate()
        with pytest.raises(ValueError):
            tiny_spec(scenes=[]).validate()

    def test_resolve_scene_builtin(self):
        scene = resolve_scene("torus")
        assert scene.name == "torus"

    def test_resolve_scene_from_file(self, tmp_path):
        path = tmp_path / "custom.scene"
        save_scene(path, builtin_scenes()["box"])
        scene = resolve_scene(str(path))
        assert scene.name == "box"

    def test_resolve_scene_unknown(self):
        with pytest.raises(ValueError, match="unknown scene"):
            resolve_scene("no_such_thing")


class TestPoses:
    def test_pose_file_round_trip(self, tmp_path):
        poses = make_camera_ring(5, width=24, height=24)
        path = tmp_path / "poses.txt"
        write_poses(path, poses)
        assert read_poses(path) == poses

    def test_random_poses_deterministic_and_bounded(self):
        spec = tiny_spec(n_random=6)
        a = random_poses(spec, 0)
        b = random_poses(spec, 0)
        other = random_poses(spec, 1)
        assert a == b
        assert a != other
        for p in a:
            assert -180.0 <= p.azimuth_deg < 180.0
            assert -10.0 <= p.elevation_deg <= 50.0
            assert p.radius == spec.radius


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    spec = tiny_spec(scenes=["sphere", "box"])
    manifest = gen_dataset(spec, root)
    return spec, root, manifest


class TestGenDataset:
    def test_rerun_is_byte_identical(self, built, tmp_path):
        spec, root, _ = built
        other = tmp_path / "again"
        gen_dataset(spec, other)
        assert tree_hashes(root) == tree_hashes(other)

    def test_expected_files_per_scene(self, built):
        spec, root, _ = built
        for scene in spec.scenes:
            names = sorted(os.listdir(os.path.join(root, scene)))
            want = sorted(
                ["grid.sdfg", "colors.sdfg", "ring_poses.txt", "rnd_poses.txt",
                 "prior.sdfg"]
                + [f"ring_{k:02d}.ppm" for k in range(spec.m_fixed)]
                + [f"rnd_{k:02d}.ppm" for k in range(spec.n_random)]
            )
            assert names == want

    def test_manifest_checksums_and_spec_round_trip(self, built):
        spec, root, manifest = built
        back = spec_from_manifest(open(os.path.join(root, "manifest.txt")).read())
        assert back == spec
        for key, value in manifest.items():
            if key.startswith("sha256."):
                rel = key[len("sha256.") :]
                digest = hashlib.sha256(
                    open(os.path.join(root, rel), "rb").read()
                ).hexdigest()
                assert digest == value

    def test_ring_poses_match_camera_ring(self, built):
        spec, root, _ = built
        got = read_poses(os.path.join(root, "sphere", "ring_poses.txt"))
        want = make_camera_ring(
            spec.m_fixed,
            elevation_deg=spec.elevation_deg,
            radius=spec.radius,
            fov_y_deg=spec.fov_y_deg,
            width=spec.width,
            height=spec.height,
        )
        assert got == want

    def test_grid_matches_direct_bake(self, built):
        spec, root, _ = built
        values, n = read_grid_values(os.path.join(root, "box", "grid.sdfg"))
        baked = bake_grid(builtin_scenes()["box"], spec.grid_n)
        assert n == spec.grid_n
        assert np.array_equal(values, baked.values)

    def test_prior_file_shape(self, built):
        spec, root, _ = built
        packed, n = read_grid_values(os.path.join(root, "sphere", "prior.sdfg"))
        assert n == spec.prior_n
        assert packed.shape == (spec.prior_n**3, 4)
        assert np.all(packed[:, 0] >= 0.0)

    def test_renders_are_images(self, built):
        spec, root, _ = built
        img = read_ppm(os.path.join(root, "sphere", "ring_00.ppm"))
        assert img.shape == (spec.height, spec.width, 3)
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_seed_changes_renders_not_geometry(self, built, tmp_path):
        spec, root, _ = built
        reseeded = tiny_spec(scenes=["sphere", "box"], seed=spec.seed + 1)
        other = tmp_path / "reseeded"
        gen_dataset(reseeded, other)
        a = tree_hashes(root)
        b = tree_hashes(other)
        assert a[os.path.join("sphere", "grid.sdfg")] == b[os.path.join("sphere", "grid.sdfg")]
        assert a[os.path.join("sphere", "ring_00.ppm")] != b[os.path.join("sphere", "ring_00.ppm")]
