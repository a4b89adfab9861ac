"""Probe accuracy of a base model trained on unbiased (beta = 0) data; should sit near 0.5.

    python scripts/null_calibration.py [--seed 0]
"""
import argparse
import dataclasses

from fairrank.data import generate_synthetic, split_dataset
from fairrank.experiment import load_config, train_and_evaluate

p = argparse.ArgumentParser()
p.add_argument("--seed", type=int, default=0)
args = p.parse_args()

cfg = dataclasses.replace(load_config("configs/desk.cfg"), beta=0.0, mode="base", seed=args.seed)
ds = split_dataset(generate_synthetic(cfg.synth_config()), cfg.train_ratio, cfg.val_ratio)
report, _ = train_and_evaluate(cfg, ds)
print(report.to_json())
