import hashlib
import os
import subprocess
import sys

import numpy as np
import pytest

from bidi3d.cli import main
from bidi3d.config import RunConfig, save_config
from bidi3d.distill import read_hires_field
from bidi3d.fileio import read_grid_values, read_ppm
from bidi3d.sampler import RunManifest

TINY = dict(
    steps=6, grid_n=12, n_views=3, width=16, height=16,
    samples=8, final_samples=12,
)


def tiny_config(**overrides) -> RunConfig:
    cfg = RunConfig()
    merged = dict(TINY, **overrides)
    cfg.sched3d.steps = merged["steps"]
    cfg.sched2d.steps = merged["steps"]
    cfg.sampler.steps = merged["steps"]
    cfg.sampler.grid_n = merged["grid_n"]
    cfg.sampler.snapshot_every = 3
    cfg.render.n_views = merged["n_views"]
    cfg.render.width = merged["width"]
    cfg.render.height = merged["height"]
    cfg.render.samples = merged["samples"]
    cfg.render.final_samples = merged["final_samples"]
    cfg.distill.hires_n = 20
    cfg.distill.iters = 25
    cfg.distill.render_width = 12
    cfg.distill.render_height = 12
    cfg.distill.render_samples = 12
    cfg.refine.iters = 6
    cfg.refine.render_samples = 12
    return cfg


def sha(path) -> str:
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    """One tiny sample run shared by the downstream command tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "tiny.cfg"
    save_config(cfg_path, tiny_config())
    out = root / "run"
    code = main(["sample", "--scene", "sphere", "--out", str(out),
                 "--config", str(cfg_path), "--seed", "3"])
    assert code == 0
    return str(out), str(cfg_path)


class TestSample:
    def test_contract_files_present(self, run_dir):
        out, _ = run_dir
        names = set(os.listdir(out))
        for want in ("grid.sdfg", "colors.sdfg", "poses.txt", "mesh.obj",
                     "manifest.txt", "view_00.ppm", "snap_t006.sdfg",
                     "snap_t001.sdfg"):
            assert want in names

    def test_missing_scene_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as info:
            main(["sample", "--out", "nowhere"])
        assert info.value.code == 2

    def test_unknown_scene_is_runtime_error(self, tmp_path, capsys):
        code = main(["sample", "--scene", "nonesuch", "--out", str(tmp_path / "x")])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_manifest_supports_bit_exact_rerun(self, run_dir, tmp_path):
        out, _ = run_dir
        man = RunManifest.from_text(open(os.path.join(out, "manifest.txt")).read())
        cfg_path = tmp_path / "rebuilt.cfg"
        save_config(cfg_path, RunConfig.from_text(man.config_text))
        again = tmp_path / "again"
        assert main(["sample", "--scene", man.scene_name, "--out", str(again),
                     "--config", str(cfg_path)]) == 0
        for name in os.listdir(out):
            if name == "manifest.txt":
                continue
            assert sha(os.path.join(out, name)) == sha(again / name), name
        strip = lambda p: [ln for ln in open(p) if not ln.startswith("timing.")]
        assert strip(os.path.join(out, "manifest.txt")) == strip(again / "manifest.txt")

    def test_manifest_records_output_checksums(self, run_dir):
        out, _ = run_dir
        man = RunManifest.from_text(open(os.path.join(out, "manifest.txt")).read())
        assert man.outputs
        for rel, digest in man.outputs.items():
            assert sha(os.path.join(out, rel)) == digest

    def test_steps_flag_overrides_lockstep(self, tmp_path, run_dir):
        _, cfg_path = run_dir
        out = tmp_path / "short"
        assert main(["sample", "--scene", "sphere", "--out", str(out),
                     "--config", cfg_path, "--steps", "4"]) == 0
        man = RunManifest.from_text(open(out / "manifest.txt").read())
        assert man.sched3d.endswith(":4") and man.sched2d.endswith(":4")
        assert (out / "snap_t004.sdfg").exists()

    def test_scene_file_recorded_in_manifest(self, tmp_path, run_dir):
        from bidi3d.geometry import builtin_scenes, save_scene

        _, cfg_path = run_dir
        scene_path = tmp_path / "my.scene"
        save_scene(scene_path, builtin_scenes()["box"])
        out = tmp_path / "filescene"
        assert main(["sample", "--scene", str(scene_path), "--out", str(out),
                     "--config", cfg_path]) == 0
        man = RunManifest.from_text(open(out / "manifest.txt").read())
        assert man.scene_path == str(scene_path.resolve())
        assert man.scene_sha256 == sha(scene_path)


class TestDistillRefine:
    def test_distill_then_refine_files(self, run_dir, tmp_path):
        out, cfg_path = run_dir
        field_path = tmp_path / "hi.sdfg"
        assert main(["distill", "--in", out, "--out", str(field_path),
                     "--config", cfg_path]) == 0
        hi = read_hires_field(field_path)
        assert hi.n == 20
        assert hi.density.min() >= 0.0
        assert hi.mask.any()
        assert np.all(hi.density[~hi.mask] == 0.0)
        assert (tmp_path / "hi.sdfg.manifest.txt").exists()

        refined_path = tmp_path / "hi2.sdfg"
        assert main(["refine", "--in", str(field_path), "--run", out,
                     "--out", str(refined_path), "--config", cfg_path,
                     "--range", "0.05:0.4", "--iters", "4"]) == 0
        refined = read_hires_field(refined_path)
        assert refined.n == hi.n
        assert np.array_equal(refined.mask, hi.mask)
        assert (tmp_path / "hi2.sdfg.manifest.txt").exists()

    def test_refine_rejects_bad_range(self, run_dir, tmp_path, capsys):
        out, cfg_path = run_dir
        field_path = tmp_path / "hi.sdfg"
        assert main(["distill", "--in", out, "--out", str(field_path),
                     "--config", cfg_path, "--iters", "2"]) == 0
        code = main(["refine", "--in", str(field_path), "--run", out,
                     "--out", str(tmp_path / "bad.sdfg"), "--range", "0.9:0.2"])
        assert code == 1
        assert "error:" in capsys.readouterr().err


class TestRender:
    def test_render_sdf_grid_deterministic(self, run_dir, tmp_path):
        out, _ = run_dir
        a, b = tmp_path / "a", tmp_path / "b"
        for target in (a, b):
            assert main(["render", "--grid", os.path.join(out, "grid.sdfg"),
                         "--colors", os.path.join(out, "colors.sdfg"),
                         "--out", str(target), "--views", "2",
                         "--size", "20x14", "--samples", "10"]) == 0
        img = read_ppm(a / "ring_00.ppm")
        assert img.shape == (14, 20, 3)
        assert sha(a / "ring_00.ppm") == sha(b / "ring_00.ppm")
        assert (a / "poses.txt").exists() and (a / "manifest.txt").exists()

    def test_render_hires_field_file(self, run_dir, tmp_path):
        out, cfg_path = run_dir
        field_path = tmp_path / "hi.sdfg"
        assert main(["distill", "--in", out, "--out", str(field_path),
                     "--config", cfg_path, "--iters", "10"]) == 0
        dest = tmp_path / "rend"
        assert main(["render", "--grid", str(field_path), "--out", str(dest),
                     "--views", "2", "--size", "16x16", "--samples", "8"]) == 0
        assert read_ppm(dest / "ring_01.ppm").shape == (16, 16, 3)

    def test_bad_size_is_runtime_error(self, run_dir, tmp_path, capsys):
        out, _ = run_dir
        code = main(["render", "--grid", os.path.join(out, "grid.sdfg"),
                     "--out", str(tmp_path / "x"), "--size", "16"])
        assert code == 1
        assert "expected WIDTHxHEIGHT" in capsys.readouterr().err


class TestMetrics:
    def test_self_comparison(self, run_dir, tmp_path, capsys):
        out, _ = run_dir
        grid = os.path.join(out, "grid.sdfg")
        report = tmp_path / "rep.txt"
        assert main(["metrics", "--grid", grid, "--ref", grid,
                     "--out", str(report)]) == 0
        text = open(report).read()
        assert text == capsys.readouterr().out
        kv = dict(ln.split(" = ") for ln in text.strip().splitlines())
        assert float(kv["iou"]) == 1.0
        assert float(kv["chamfer"]) == 0.0

    def test_symmetry(self, run_dir, tmp_path, capsys):
        out, _ = run_dir
        ds = tmp_path / "ds"
        assert main(["gen-dataset", "--out", str(ds), "--scenes", "sphere",
                     "--grid-n", "12", "--views", "1", "--random", "0",
                     "--size", "16x16", "--samples", "8", "--prior-n", "8"]) == 0
        capsys.readouterr()
        a = os.path.join(out, "grid.sdfg")
        b = str(ds / "sphere" / "grid.sdfg")
        assert main(["metrics", "--grid", a, "--ref", b]) == 0
        fwd = capsys.readouterr().out
        assert main(["metrics", "--grid", b, "--ref", a]) == 0
        rev = capsys.readouterr().out
        assert fwd == rev

    def test_consistency_from_files(self, run_dir, capsys):
        out, _ = run_dir
        assert main(["metrics", "--grid", os.path.join(out, "grid.sdfg"),
                     "--colors", os.path.join(out, "colors.sdfg"),
                     "--views", out]) == 0
        kv = dict(ln.split(" = ") for ln in
                  capsys.readouterr().out.strip().splitlines())
        assert np.isfinite(float(kv["consistency_psnr"]))

    def test_no_work_requested(self, run_dir, capsys):
        out, _ = run_dir
        code = main(["metrics", "--grid", os.path.join(out, "grid.sdfg")])
        assert code == 1
        assert "nothing to compute" in capsys.readouterr().err


class TestTopLevel:
    def test_gen_dataset_rerun_identical(self, tmp_path):
        args = ["gen-dataset", "--scenes", "sphere", "--grid-n", "8",
                "--views", "2", "--random", "1", "--size", "12x12",
                "--samples", "6", "--prior-n", "8"]
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(args + ["--out", str(a)]) == 0
        assert main(args + ["--out", str(b)]) == 0
        for dirpath, _, files in os.walk(a):
            for name in files:
                rel = os.path.relpath(os.path.join(dirpath, name), a)
                assert sha(a / rel) == sha(b / rel), rel

    def test_no_command_is_usage_error(self):
        with pytest.raises(SystemExit) as info:
            main([])
        assert info.value.code == 2

    def test_module_entry_help(self):
        proc = subprocess.run(
            [sys.executable, "-m", "bidi3d", "--help"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        for sub in ("gen-dataset", "sample", "distill", "refine", "render",
                    "metrics", "selftest"):
            assert sub in proc.stdout

    def test_selftest_passes(self, capsys):
        assert main(["selftest"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert any("all passed" in ln for ln in lines)
