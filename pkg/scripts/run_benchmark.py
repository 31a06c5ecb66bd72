"""Proposed tracker vs. the NCC baseline on the occlusion, linear and static
families; writes one report per cell, success_curves.csv and a summary.

    python3 scripts/run_benchmark.py --out results/bench --occlusion-seeds 10
"""
import argparse
import json
import time

import numpy as np

from flowtrack.bench import FAMILIES, run_suite
from flowtrack.config import load_config
from flowtrack.fileio import write_json


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="results/bench")
    ap.add_argument("--config", default=None)
    ap.add_argument("--weights", default=None)
    ap.add_argument("--occlusion-seeds", type=int, default=10)
    ap.add_argument("--linear-seeds", type=int, default=5)
    ap.add_argument("--static-seeds", type=int, default=3)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    cfg = load_config(args.config)
    plan = [("occlusion", args.occlusion_seeds), ("linear", args.linear_seeds), ("static", args.static_seeds)]
    scenarios = [FAMILIES[fam](seed=s) for fam, n in plan for s in range(n)]
    t0 = time.perf_counter()
    reports = run_suite(scenarios, cfg, weights=args.weights, out_dir=args.out, threads=args.threads)
    elapsed = time.perf_counter() - t0

    summary = {}
    print(f"{'scenario':14s} {'AUC prop':>8s} {'AUC ncc':>8s} {'rec prop':>8s} {'rec ncc':>8s} {'fail p/n':>8s}")
    for fam, n in plan:
        rows = []
        for s in range(n):
            name = f"{fam}_{s}"
            p, b = reports[(name, "proposed")], reports[(name, "ncc")]
            rows.append((p["success"]["auc"], b["success"]["auc"], p["recall"], b["recall"], p["failures"], b["failures"]))
            print(f"{name:14s} {rows[-1][0]:8.3f} {rows[-1][1]:8.3f} {rows[-1][2]:8.3f} {rows[-1][3]:8.3f} "
                  f"{rows[-1][4]:>4d}/{rows[-1][5]:<3d}")
        r = np.array(rows, dtype=np.float64)
        summary[fam] = {
            "seeds": n,
            "auc_mean": {"proposed": float(r[:, 0].mean()), "ncc": float(r[:, 1].mean())},
            "recall_mean": {"proposed": float(r[:, 2].mean()), "ncc": float(r[:, 3].mean())},
            "failures_total": {"proposed": int(r[:, 4].sum()), "ncc": int(r[:, 5].sum())},
            "auc_wins": int((r[:, 0] > r[:, 1]).sum()),
            "recall_wins": int((r[:, 2] > r[:, 3]).sum()),
        }
    write_json(f"{args.out}/summary.json", summary)
    print(json.dumps(summary, indent=2))
    print(f"{len(reports)} cells in {elapsed:.1f}s")


if __name__ == "__main__":
    main()
