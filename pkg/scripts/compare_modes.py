"""All six modes over five seeds on shared desk-scale data; prints mean ± std.

    python scripts/compare_modes.py [--out runs/compare] [--workers N]
"""
import argparse
import sys

from fairrank.cli import main

p = argparse.ArgumentParser()
p.add_argument("--out", default="runs/compare")
p.add_argument("--dataset", default="")
p.add_argument("--workers", type=int, default=1)
args = p.parse_args()

argv = ["compare", "--config", "configs/desk.cfg", "--out", args.out, "--seeds", "0,1,2,3,4",
        "--set", f"workers={args.workers}"]
if args.dataset:
    argv += ["--dataset", args.dataset]
sys.exit(main(argv))
