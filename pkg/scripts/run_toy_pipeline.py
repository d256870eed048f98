#!/usr/bin/env python3
"""End-to-end toy run: synthesize scenes, train, infer, fuse, evaluate.

Everything goes through the CLI entry points, so this doubles as a smoke
test of the command surface:

    python3 scripts/run_toy_pipeline.py --workdir /tmp/dspm_demo --steps 60
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from dspm import cli


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", required=True)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--scenes", type=int, default=4)
    ap.add_argument("--steps", type=int, default=60)
    ap.add_argument("--height", type=int, default=64)
    ap.add_argument("--width", type=int, default=80)
    args = ap.parse_args()

    data = os.path.join(args.workdir, "data")
    ckpt = os.path.join(args.workdir, "model.ckpt")
    depths = os.path.join(args.workdir, "depths")
    ply = os.path.join(args.workdir, "cloud.ply")
    scene0 = os.path.join(data, "scene_0000")

    steps = [
        ["synth", "--out", data, "--seed", str(args.seed), "--scenes", str(args.scenes),
         "--height", str(args.height), "--width", str(args.width)],
        ["train", "--data", data, "--out", ckpt, "--steps", str(args.steps),
         "--seed", str(args.seed)],
        ["infer", "--data", scene0, "--ckpt", ckpt, "--out", depths,
         "--seed", str(args.seed)],
        ["fuse", "--data", scene0, "--depths", depths, "--out", ply,
         "--tau-rel", "0.05", "--n-consist", "1"],
        ["eval", "--data", scene0, "--depths", depths, "--json"],
    ]
    for argv in steps:
        print(f"\n$ dspm {' '.join(argv)}", file=sys.stderr)
        rc = cli.main(argv)
        if rc != 0:
            return rc
    return 0


if __name__ == "__main__":
    sys.exit(main())
