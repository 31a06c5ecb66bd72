"""Train the packaged default detector weights on varied synthetic clips.

    python3 scripts/train_default_weights.py --clips 160 --iterations 3000 \
        --out src/flowtrack/data/default.ftw
"""
import argparse
import json
import logging
import time

import numpy as np

from flowtrack.bench import FAMILIES
from flowtrack.boxes import iou
from flowtrack.config import TrainConfig, load_config
from flowtrack.fileio import atomic_open, output_meta
from flowtrack.model import Detector
from flowtrack.synth import generate_sequence, training_scenario
from flowtrack.train import build_samples, train


def detector_quality(det, family, seeds):
    """Share of visible frames whose best detection hits IoU ≥ 0.5, mean IoU
    of that detection, and false positives per frame."""
    hits = fps = n = 0
    ious = []
    for seed in seeds:
        frames, gt = generate_sequence(FAMILIES[family](seed))
        for f, g in zip(frames, gt):
            if g.occluded:
                continue
            dets = det.detect(f)
            n += 1
            best = max((iou(d.box, g.box) for d in dets), default=0.0)
            ious.append(best)
            hits += best >= 0.5
            fps += sum(iou(d.box, g.box) < 0.1 for d in dets)
    return {"recall50": hits / n, "mean_best_iou": float(np.mean(ious)), "fp_per_frame": fps / n}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--clips", type=int, default=160)
    ap.add_argument("--iterations", type=int, default=3000)
    ap.add_argument("--batch", type=int, default=24)
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--momentum", type=float, default=0.9)
    ap.add_argument("--negatives", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--init", default=None, help="start from these weights")
    ap.add_argument("--config", default=None, help="JSON run config (architecture, loss weights)")
    ap.add_argument("--out", default="src/flowtrack/data/default.ftw")
    ap.add_argument("--log", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config)
    det = Detector(cfg.detector, seed=args.seed, convention=cfg.convention)
    if args.init:
        with open(args.init, "rb") as fh:
            det.load(fh)
    tc = TrainConfig(iterations=args.iterations, learning_rate=args.lr, momentum=args.momentum,
                     frames_per_batch=args.batch, negatives_per_positive=args.negatives, seed=args.seed)
    t0 = time.time()
    seqs = [generate_sequence(training_scenario(s)) for s in range(args.clips)]
    samples = build_samples(seqs, det, tc, cfg.flow)
    logging.info("%d samples from %d clips in %.1fs", len(samples), args.clips, time.time() - t0)

    def report(rec):
        if rec["iteration"] % 100 == 0:
            logging.info("it %5d total %.4f cls %.4f reg %.4f frm %.4f", rec["iteration"], rec["total"],
                         rec["cls"], rec["reg"], rec["frm"])

    hist = train(det, samples, tc, cfg.loss, on_iteration=report)
    with atomic_open(args.out, "wb") as fh:
        det.save(fh)
    if args.log:
        with atomic_open(args.log) as fh:
            fh.write(json.dumps({"header": output_meta(cfg.hash(), args.seed, cfg.convention)}) + "\n")
            for r in hist:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    for fam in ("static", "linear", "occlusion"):
        logging.info("%s: %s", fam, detector_quality(det, fam, range(100, 104)))
    logging.info("done in %.0fs", time.time() - t0)


if __name__ == "__main__":
    main()
