"""End-to-end experiment on the textured sphere+box compound scene.

Generates datasets, pretrains the base denoiser, jointly trains the feature
renderer + controller, reconstructs a radiance field from 2 input views with
C-SDS, and evaluates novel-view and geometry metrics. Scaled down by default;
pass --full for the 10k-step reconstruction.

Usage:
    python scripts/run_sphere_box.py --out /tmp/sphere_box_run [--full]
"""

import argparse
import os
import sys

from sparse3d.cli import main as cli


def sh(args):
    print("+ sparse3d " + " ".join(args), flush=True)
    code = cli(args)
    if code != 0:
        sys.exit(code)


def run(out: str, full: bool, seed: int = 0):
    steps = 10000 if full else 300
    joint = 5000 if full else 200
    phase0 = 2000 if full else 150

    data = os.path.join(out, "data")
    for name, n in [("sphere", 8), ("box", 8), ("sphere_box", 12)]:
        sh(["gen-data", "--scene", name, "--views", str(n),
            "--out", os.path.join(data, name), "--seed", str(seed)])

    train = os.path.join(out, "train")
    sh(["train",
        "--data", os.path.join(data, "sphere_box"),
        "--pool", os.path.join(data, "sphere"), os.path.join(data, "box"),
        "--out", train, "--seed", str(seed),
        "--steps", str(joint), "--phase0-steps", str(phase0),
        "--heldout", "4", "--log-every", "100"])

    recon = os.path.join(out, "recon")
    sh(["reconstruct", "--data", os.path.join(data, "sphere_box"),
        "--run", train, "--out", recon, "--seed", str(seed),
        "--views", "2", "--steps", str(steps), "--log-every", "200"]
       + ([] if full else ["--iso", "2.0", "--mc-resolution", "64"]))

    sh(["eval", "--run", recon, "--data", os.path.join(data, "sphere_box"),
        "--scene", "sphere_box"] + ([] if full else ["--iso", "2.0"]))


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--full", action="store_true", help="paper-scale step counts")
    ap.add_argument("--seed", type=int, default=0)
    run(**vars(ap.parse_args()))
