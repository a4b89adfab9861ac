"""FairRank over lambda in {0, .25, .5, .75, 1} and five seeds; prints per-lambda means.

    python scripts/lambda_sweep.py [--out runs/sweep] [--workers N]
"""
import argparse
import csv
import sys
from collections import defaultdict
from pathlib import Path

from fairrank.cli import main

p = argparse.ArgumentParser()
p.add_argument("--out", default="runs/sweep")
p.add_argument("--dataset", default="")
p.add_argument("--workers", type=int, default=1)
args = p.parse_args()

argv = ["sweep", "--config", "configs/desk.cfg", "--out", args.out, "--lambdas", "0,0.25,0.5,0.75,1",
        "--seeds", "0,1,2,3,4", "--set", f"workers={args.workers}"]
if args.dataset:
    argv += ["--dataset", args.dataset]
code = main(argv)

by_lam = defaultdict(list)
for row in csv.DictReader((Path(args.out) / "sweep.csv").open()):
    if row["status"] == "ok":
        by_lam[float(row["lambda"])].append((float(row["auc"]), float(row["acc_at_10"])))
print("lambda  auc     acc_at_10")
for lam, vals in sorted(by_lam.items()):
    n = len(vals)
    print(f"{lam:<6g}  {sum(v[0] for v in vals) / n:.4f}  {sum(v[1] for v in vals) / n:.4f}")
sys.exit(code)
