"""Three-arm ablation (rpn, rpn_ffm, rpn_ffm_hspl) over several seeds.

Prints per-run metrics and the seed means, writes ``ablation_summary.json`` and
an FP_avg-vs-sensitivity / PR plot under ``--root``.

    python scripts/run_ablation.py --seeds 0 1 2
"""

import argparse
import json
import logging
from pathlib import Path

import numpy as np
import torch

from cmbdet.benchmark import BenchmarkData, load_benchmark_config, run_arm
from cmbdet.config import ABLATIONS


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--arms", nargs="+", choices=ABLATIONS, default=list(ABLATIONS))
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--root", default="runs/benchmark")
    p.add_argument("--plot", action="store_true", help="also render curves with matplotlib")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    train, test = BenchmarkData().build()
    summary = {}
    for arm in args.arms:
        runs = []
        for seed in args.seeds:
            cfg = load_benchmark_config(args.config, [f"ablation={json.dumps(arm)}", f"seed={seed}", *args.set])
            run = run_arm(cfg, train, test, args.root)
            m = run.metrics
            print(f"{arm:14s} seed {seed}: sens {m['sensitivity']:.3f}  FP_avg {m['fp_avg']:.2f}  "
                  f"AUC-PR {m['auc_pr']:.3f}")
            runs.append(run)
        summary[arm] = {k: float(np.mean([r.metrics[k] for r in runs]))
                        for k in ("sensitivity", "fp_avg", "auc_pr")}
        summary[arm]["runs"] = [str(r.path) for r in runs]
    print("\nseed means")
    for arm, s in summary.items():
        print(f"{arm:14s} sens {s['sensitivity']:.3f}  FP_avg {s['fp_avg']:.2f}  AUC-PR {s['auc_pr']:.3f}")
    out = Path(args.root)
    (out / "ablation_summary.json").write_text(json.dumps(summary, indent=2))
    if args.plot:
        from cmbdet.cli import main as cli

        curves = [str(Path(r) / "pr_curve.csv") for s in summary.values() for r in s["runs"][:1]]
        cli(["plot", "curves", *curves, "--out", str(out / "ablation_curves.png")])


if __name__ == "__main__":
    main()
