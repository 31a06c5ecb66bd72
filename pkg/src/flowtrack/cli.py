"""Command-line entry point: synth / train / track / eval / bench.

Exit codes: 0 success, 2 input or validation error, 3 data-integrity error
(corrupt weights or frames), 1 anything else.
"""
import argparse
import json
import logging
import os
import sys

from . import __version__
from .bench import (
    MetricsError, evaluate, fps_report, load_suite_detector, run_suite, scenario_from_item,
)
from .config import ConfigError, load_config
from .fileio import (
    PnmError, SequenceError, atomic_open, output_meta, read_gt, read_jsonl, read_sequence,
    write_json, write_jsonl, write_sequence,
)
from .model import Detector
from .synth import ScenarioError, generate_sequence, load_scenario
from .tensor_core import WeightFileError
from .tracker import StreamError, run_tracker
from .train import NoForegroundError, build_samples, train

log = logging.getLogger("flowtrack")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_INTEGRITY = 0, 1, 2, 3
INPUT_ERRORS = (ConfigError, ScenarioError, SequenceError, MetricsError, StreamError, NoForegroundError, OSError)
INTEGRITY_ERRORS = (WeightFileError, PnmError)

RESULT_FIELDS = {"frame_index": int, "track_id": int, "state": str, "x": float, "y": float, "w": float,
                 "h": float, "score": float}


def _config(args):
    return load_config(args.config, {"seed": args.seed, "convention": args.convention})


def _sibling(path, suffix):
    """results.jsonl -> results<suffix>"""
    root, _ = os.path.splitext(path)
    return root + suffix


def cmd_synth(args):
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario.seed = args.seed
    frames, gt = generate_sequence(scenario)
    cfg = _config(args)
    meta = output_meta(cfg.hash(), scenario.seed, cfg.convention)
    write_sequence(args.out, frames, gt, {**meta, "scenario": scenario.name})
    print(f"{len(frames)} frames written to {args.out}")


def cmd_train(args):
    cfg = _config(args)
    if args.iterations is not None:
        cfg.train.iterations = args.iterations
    if args.lr is not None:
        cfg.train.learning_rate = args.lr
    cfg.train.__post_init__()
    seqs = []
    for d in args.sequences:
        frames, gt = read_sequence(d)
        if gt:
            seqs.append((frames, gt))
    if not seqs:
        raise SequenceError("no sequence with ground truth given")
    det = Detector(cfg.detector, seed=cfg.seed, convention=cfg.convention)
    if args.init:
        with open(args.init, "rb") as fh:
            det.load(fh)
    cfg.train.seed = cfg.seed
    samples = build_samples(seqs, det, cfg.train, cfg.flow)
    history = train(det, samples, cfg.train, cfg.loss)
    meta = output_meta(cfg.hash(), cfg.seed, cfg.convention)
    with atomic_open(args.out, "wb") as fh:
        det.save(fh)
    write_jsonl(args.log or _sibling(args.out, ".log.jsonl"), history, header=meta)
    write_json(_sibling(args.out, ".meta.json"), {**meta, "iterations": len(history), "samples": len(samples)})
    if history:
        print(f"trained {len(history)} iterations on {len(samples)} frames: "
              f"loss {history[0]['total']:.4f} -> {history[-1]['total']:.4f}")
    else:
        print("0 iterations: weights written unchanged")


def cmd_track(args):
    cfg = _config(args)
    det = load_suite_detector(cfg, args.weights)
    frames, _ = read_sequence(args.sequence, with_gt=False)
    records, timings = run_tracker(det, frames, cfg.tracker, cfg.flow)
    meta = output_meta(cfg.hash(), cfg.seed, cfg.convention)
    write_jsonl(args.out, records, header=meta)
    write_jsonl(args.timing or _sibling(args.out, ".timing.jsonl"), timings, header=meta)
    rep = fps_report(timings)
    stages = ", ".join(f"{k[:-3]} {v:.1f} ms" for k, v in rep["stage_mean_ms"].items())
    print(f"{len(frames)} frames, {len(records)} track records, mean {rep['mean_fps']:.1f} FPS ({stages})")


def _check_results(records, where):
    for n, r in enumerate(records, 1):
        for k, tp in RESULT_FIELDS.items():
            if k not in r:
                raise MetricsError(f"{where}: record {n} lacks {k!r}")
            v = r[k]
            ok = isinstance(v, (int, float)) and not isinstance(v, bool) if tp is float else isinstance(v, tp)
            if not ok or (tp is int and isinstance(v, bool)):
                raise MetricsError(f"{where}: record {n} field {k!r} has the wrong type")


def cmd_eval(args):
    header, records = read_jsonl(args.results)
    if header is None:
        raise MetricsError(f"{args.results}: missing header line")
    _check_results(records, args.results)
    gt_path = os.path.join(args.gt, "gt.jsonl") if os.path.isdir(args.gt) else args.gt
    gt = read_gt(gt_path)
    meta = {k: header.get(k) for k in ("tool", "version", "config_hash", "seed", "convention")}
    name = args.name or os.path.basename(os.path.dirname(os.path.abspath(gt_path)))
    report = evaluate(records, gt, "proposed", name, meta)
    write_json(args.out, report)
    if args.timing:
        _, timings = read_jsonl(args.timing)
        write_json(_sibling(args.out, ".fps.json"), {**meta, **fps_report(timings)})
    print(f"AUC {report['success']['auc']:.4f}, recall {report['recall']:.4f}, failures {report['failures']}")


def cmd_bench(args):
    cfg = _config(args)
    with open(args.suite) as fh:
        try:
            suite = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.suite}: invalid JSON ({e})") from None
    if not isinstance(suite, dict) or not isinstance(suite.get("scenarios"), list):
        raise ConfigError(f"{args.suite}: expected an object with a 'scenarios' list", key="scenarios")
    unknown = sorted(set(suite) - {"scenarios", "baseline", "weights"})
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}", key=unknown[0])
    scenarios = [scenario_from_item(item) for item in suite["scenarios"]]
    weights = args.weights or suite.get("weights")
    reports = run_suite(scenarios, cfg, baseline=suite.get("baseline", True), weights=weights,
                        out_dir=args.out, threads=args.threads)
    for (name, method), r in sorted(reports.items()):
        print(f"{name:16s} {method:9s} AUC {r['success']['auc']:.4f} recall {r['recall']:.4f} "
              f"failures {r['failures']}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults apply to missing keys)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--convention", choices=["paper-literal", "rcnn-standard"], default=None,
                        help="inter-frame offset encoding")
    common.add_argument("--threads", type=int, default=1, help="worker threads (bench only)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="flowtrack", description="CNN detect-and-track with a flow motion prior")
    ap.add_argument("--version", action="version", version=f"flowtrack {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="render a scenario to a sequence directory")
    p.add_argument("scenario")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train detector + offset heads")
    p.add_argument("sequences", nargs="+")
    p.add_argument("--out", required=True, help="output weights file")
    p.add_argument("--init", help="start from these weights")
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--log", help="loss log (default: <out>.log.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", parents=[common], help="track a sequence directory")
    p.add_argument("sequence")
    p.add_argument("--weights", help="weights file (default: packaged weights)")
    p.add_argument("--out", required=True, help="results JSONL")
    p.add_argument("--timing", help="timing JSONL (default: <out>.timing.jsonl)")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", parents=[common], help="score a results file against ground truth")
    p.add_argument("results")
    p.add_argument("gt", help="gt.jsonl or a sequence directory")
    p.add_argument("--out", required=True)
    p.add_argument("--timing", help="timing JSONL to summarise as FPS")
    p.add_argument("--name", help="scenario name in the report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="run a scenario x method comparison suite")
    p.add_argument("suite")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--weights")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except INTEGRITY_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INTEGRITY
    except INPUT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as e:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
