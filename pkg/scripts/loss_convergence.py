"""Training-loss curves on the easy synthetic set: per-iteration total and
per-term losses for several initialization seeds (CSV), plus a summary of
final/initial ratio and the worst rise of the 20-iteration moving average.

    python3 scripts/loss_convergence.py --seeds 0 1 2 --out results/convergence
"""
import argparse
import csv
import os
import time

import numpy as np

from flowtrack.config import load_config
from flowtrack.fileio import atomic_open, write_json
from flowtrack.model import Detector
from flowtrack.synth import easy_scenario, generate_sequence
from flowtrack.train import build_samples, train


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="results/convergence")
    ap.add_argument("--config", default=None)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--clips", type=int, default=2, help="easy clips in the training set")
    ap.add_argument("--iterations", type=int, default=None)
    args = ap.parse_args()

    cfg = load_config(args.config)
    if args.iterations is not None:
        cfg.train.iterations = args.iterations
    seqs = [generate_sequence(easy_scenario(s)) for s in range(args.clips)]
    os.makedirs(args.out, exist_ok=True)
    summary = {}
    for seed in args.seeds:
        det = Detector(cfg.detector, seed=seed, convention=cfg.convention)
        t0 = time.perf_counter()
        hist = train(det, build_samples(seqs, det, cfg.train, cfg.flow), cfg.train, cfg.loss)
        elapsed = time.perf_counter() - t0
        with atomic_open(os.path.join(args.out, f"loss_seed{seed}.csv")) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "total", "cls", "reg", "frm"])
            for h in hist:
                w.writerow([h["iteration"], repr(h["total"]), repr(h["cls"]), repr(h["reg"]), repr(h["frm"])])
        loss = np.array([h["total"] for h in hist])
        ma = np.convolve(loss, np.ones(20) / 20, mode="valid")
        summary[str(seed)] = {
            "initial": float(loss[0]), "final": float(loss[-1]), "ratio": float(loss[-1] / loss[0]),
            "max_ma20_rise": float(np.diff(ma).max()) if ma.size > 1 else 0.0, "seconds": elapsed,
        }
        s = summary[str(seed)]
        print(f"seed {seed}: {s['initial']:.3f} -> {s['final']:.4f} (ratio {s['ratio']:.3f}), "
              f"max MA20 rise {s['max_ma20_rise']:.2e}, {elapsed:.1f}s")
    write_json(os.path.join(args.out, "summary.json"), summary)


if __name__ == "__main__":
    main()
