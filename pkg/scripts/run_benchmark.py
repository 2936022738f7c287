"""Train and evaluate one arm on the synthetic benchmark (criterion-5 setting).

    python scripts/run_benchmark.py --arm rpn_ffm_hspl --seed 0
"""

import argparse
import json
import logging

import torch

from cmbdet.benchmark import BenchmarkData, load_benchmark_config, run_arm
from cmbdet.config import ABLATIONS


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--arm", choices=ABLATIONS, default="rpn_ffm_hspl")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="experiment JSON (default scripts/benchmark_config.json)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--root", default="runs/benchmark")
    p.add_argument("--fresh", action="store_true", help="ignore a cached run with the same config")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    cfg = load_benchmark_config(args.config, [f"ablation={json.dumps(args.arm)}", f"seed={args.seed}", *args.set])
    train, test = BenchmarkData().build()
    run = run_arm(cfg, train, test, args.root, reuse=not args.fresh)
    print(json.dumps(run.metrics, indent=2))
    print(f"run directory: {run.path}")


if __name__ == "__main__":
    main()
