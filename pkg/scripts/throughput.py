"""Single-threaded frames per second at 320x240 with the per-stage latency
breakdown (flow, detect, associate, refine, update), per scenario family.

    python3 scripts/throughput.py --frames 100 --out results/throughput.json
"""
import argparse
import time

from flowtrack.bench import FAMILIES, fps_report, load_suite_detector
from flowtrack.config import load_config
from flowtrack.fileio import write_json
from flowtrack.synth import generate_sequence
from flowtrack.tracker import run_tracker


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="results/throughput.json")
    ap.add_argument("--config", default=None)
    ap.add_argument("--weights", default=None)
    ap.add_argument("--frames", type=int, default=100, help="frames per sequence, at least 60")
    ap.add_argument("--repeats", type=int, default=1)
    args = ap.parse_args()
    if args.frames < 60:
        ap.error("--frames must be at least 60 (the occlusion family needs room for its occluder)")

    cfg = load_config(args.config)
    det = load_suite_detector(cfg, args.weights)
    out = {}
    for fam in ("static", "linear", "occlusion"):
        frames, _ = generate_sequence(FAMILIES[fam](seed=0, frames=args.frames))
        timings = []
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            _, t = run_tracker(det, frames, cfg.tracker, cfg.flow)
            timings.extend(t)
        rep = fps_report(timings)
        out[fam] = rep
        stages = ", ".join(f"{k[:-3]} {v:.1f}" for k, v in rep["stage_mean_ms"].items())
        print(f"{fam:10s} {rep['mean_fps']:6.1f} FPS mean, {rep['median_fps']:6.1f} median | ms: {stages}")
    print(out["static"]["hardware"])
    write_json(args.out, out)


if __name__ == "__main__":
    main()
