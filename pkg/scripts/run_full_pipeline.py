"""End-to-end demo: sample a scene, distill it, refine it, render, score.

Writes everything under --out and prints a stage-by-stage timing table.
The default configuration finishes in a few minutes on a laptop CPU;
--fast drops the sizes for a quick smoke run.
"""

import argparse
import sys
import time

from bidi3d.cli import main as cli


def run(args) -> int:
    stages = []
    out = args.out

    cfg_lines = {
        False: [
            "sched3d.steps = 50", "sched2d.steps = 50", "sampler.steps = 50",
            "sampler.grid_n = 32", "sampler.gamma_3d = 1.0", "sampler.gamma_2d = 1.0",
            "oracle3d.lambda_c = 0.1", "oracle3d.lambda_p = 0.1",
            "oracle2d.lambda_c = 0.85",
        ],
        True: [
            "sched3d.steps = 10", "sched2d.steps = 10", "sampler.steps = 10",
            "sampler.grid_n = 16", "sampler.gamma_3d = 1.0", "sampler.gamma_2d = 1.0",
            "render.samples = 12", "render.final_samples = 32",
            "oracle3d.lambda_c = 0.1", "oracle3d.lambda_p = 0.1",
            "oracle2d.lambda_c = 0.85",
            "distill.hires_n = 32", "distill.iters = 120",
            "refine.iters = 40",
        ],
    }[args.fast]
    cfg_path = f"{out}/pipeline.cfg"
    import os

    os.makedirs(out, exist_ok=True)
    with open(cfg_path, "w") as fh:
        fh.write("\n".join(cfg_lines) + "\n")

    def stage(name, argv):
        started = time.perf_counter()
        code = cli(argv)
        stages.append((name, time.perf_counter() - started))
        if code != 0:
            print(f"stage {name} failed with exit {code}", file=sys.stderr)
            sys.exit(code)

    stage("sample", ["sample", "--scene", args.scene, "--out", f"{out}/run",
                     "--config", cfg_path, "--seed", str(args.seed)])
    stage("distill", ["distill", "--in", f"{out}/run", "--out", f"{out}/hi.sdfg",
                      "--config", cfg_path])
    stage("refine", ["refine", "--in", f"{out}/hi.sdfg", "--run", f"{out}/run",
                     "--out", f"{out}/hi_refined.sdfg", "--config", cfg_path,
                     "--range", "0.02:0.2"])
    stage("render", ["render", "--grid", f"{out}/hi_refined.sdfg",
                     "--out", f"{out}/renders", "--views", "8",
                     "--size", "96x96", "--samples", "64"])
    stage("metrics", ["metrics", "--grid", f"{out}/run/grid.sdfg",
                      "--colors", f"{out}/run/colors.sdfg",
                      "--views", f"{out}/run", "--out", f"{out}/metrics.txt"])

    total = sum(t for _, t in stages)
    print("\nstage timings:")
    for name, took in stages:
        print(f"  {name:<8s} {took:7.1f}s")
    print(f"  {'total':<8s} {total:7.1f}s")
    return 0


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--scene", default="sphere")
    parser.add_argument("--out", default="out/pipeline")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--fast", action="store_true", help="tiny smoke-test sizes")
    return run(parser.parse_args())


if __name__ == "__main__":
    sys.exit(main())
