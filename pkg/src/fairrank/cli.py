"""``fairrank`` command line: generate, train, evaluate, sweep, compare.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .errors import DivergenceError, FairRankError
from .experiment import (format_table, generate, load_config, run_compare, run_evaluate,
                         run_sweep, run_train)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


def _parser():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="flat key = value file, or a manifest.json to replay")
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--mode")
    shared.add_argument("--lambda", dest="lam", type=float)
    shared.add_argument("--dataset", help="directory with news.tsv and behaviors.tsv")
    shared.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable, applied last)")
    shared.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fairrank", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[shared], help="write a synthetic dataset")
    sub.add_parser("train", parents=[shared], help="train one model")
    ev = sub.add_parser("evaluate", parents=[shared], help="score a checkpoint")
    ev.add_argument("--checkpoint")
    sw = sub.add_parser("sweep", parents=[shared], help="FairRank over several lambda values")
    sw.add_argument("--lambdas", help="comma-separated lambda values")
    sw.add_argument("--seeds", help="comma-separated training seeds")
    cp = sub.add_parser("compare", parents=[shared], help="all modes over several seeds")
    cp.add_argument("--seeds", help="comma-separated training seeds")
    cp.add_argument("--modes", help="comma-separated modes")
    return p


def _overrides(args):
    pairs = []
    for key in ("out", "seed", "mode", "lam", "dataset", "checkpoint", "lambdas", "seeds", "modes"):
        value = getattr(args, key, None)
        if value is not None:
            pairs.append((key, value))
    for item in args.set:
        if "=" not in item:
            raise argparse.ArgumentTypeError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v))
    return pairs


def cmd_generate(cfg):
    ds = generate(cfg)
    print(f"wrote {len(ds.news)} news, {len(ds.users)} users, "
          f"{len(ds.impressions())} impressions to {cfg.out}")


def cmd_train(cfg):
    res, ckpt = run_train(cfg)
    last = res.log[-1]
    print(f"trained {cfg.mode} (lambda={cfg.lam}, seed={cfg.seed}); best epoch {res.best_epoch}; "
          f"final L_R={last.L_R:.4f}; checkpoint {ckpt}")


def cmd_evaluate(cfg):
    print(run_evaluate(cfg).to_json())


def cmd_sweep(cfg):
    rows = run_sweep(cfg)
    for r in rows:
        print(f"lambda={r['lambda']:<5g} seed={r['seed']} auc={r['auc']:.4f} "
              f"acc_at_10={r['acc_at_10']:.4f} {r['status']}")
    return EXIT_NUMERIC if any(r["status"] != "ok" for r in rows) else EXIT_OK


def cmd_compare(cfg):
    rows, summary = run_compare(cfg)
    print(format_table(summary), end="")
    return EXIT_NUMERIC if any(r["status"] != "ok" for r in rows) else EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate,
            "sweep": cmd_sweep, "compare": cmd_compare}


def main(argv=None):
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        return COMMANDS[args.command](cfg) or EXIT_OK
    except (DivergenceError, FloatingPointError) as e:
        print(f"fairrank: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FairRankError, OSError, argparse.ArgumentTypeError) as e:
        print(f"fairrank: error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
