"""Evaluation metrics, the NCC template-matching baseline, and the
scenario x method comparison suite."""
import csv
import io
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .boxes import Box, iou
from .config import Config
from .fileio import atomic_open, output_meta, write_json
from .synth import (
    generate_sequence, linear_scenario, occlusion_scenario, scenario_from_dict, static_scenario,
)
from .tracker import STAGES, run_tracker

THRESHOLDS = np.round(np.arange(1, 20) * 0.05, 2)
FAILURE_RADIUS = 2.0     # center error > FAILURE_RADIUS x gt diagonal is a failure
RECALL_IOU = 0.5
NCC_RADIUS = 16
SCHEMA_VERSION = 1
METHODS = ("proposed", "ncc")

NOTES = {
    "baseline": "ncc = fixed-template normalized cross-correlation search (+/-16 px), "
                "standing in for a keypoint-descriptor baseline",
    "success_exclusion": "frames where the target is occluded and the tracker reports Occluded "
                         "are left out of the success denominator",
    "failure_rule": "a failure is a maximal run of visible-target frames whose center error "
                    "exceeds 2x the ground-truth diagonal (or with no prediction)",
    "primary_track": "per frame: Active, then Occluded, then Tentative; ties by last detection score, "
                     "then longest history, then lowest id",
}

FAMILIES = {"static": static_scenario, "linear": linear_scenario, "occlusion": occlusion_scenario}


class MetricsError(ValueError):
    pass


def _check_lengths(pred, gt):
    if len(pred) != len(gt):
        raise MetricsError(f"prediction has {len(pred)} frames, ground truth has {len(gt)}")


def success_curve(pred, gt, pred_states=None):
    """Success fraction at each IoU threshold and its mean (AUC).

    ``pred`` holds a Box or None per frame; ``pred_states`` (optional) the
    reported state per frame, used for the occluded-frame exclusion.
    """
    _check_lengths(pred, gt)
    states = pred_states if pred_states is not None else [None] * len(gt)
    _check_lengths(states, gt)
    ious = []
    for p, g, s in zip(pred, gt, states):
        if g.occluded and s == "Occluded":
            continue
        ious.append(0.0 if p is None else iou(p, g.box))
    ious = np.array(ious)
    if ious.size == 0:
        values = np.zeros(THRESHOLDS.size)
    else:
        values = (ious[None, :] >= THRESHOLDS[:, None] - 1e-12).mean(axis=1)
    return THRESHOLDS.copy(), values, float(values.mean())


def recall_and_failures(pred, gt, candidates=None):
    """Recall over visible-target frames and the number of failure episodes.

    ``candidates`` optionally lists every reported box per frame for recall;
    failures always use the per-frame primary prediction ``pred``.
    """
    _check_lengths(pred, gt)
    if candidates is None:
        candidates = [[] if p is None else [p] for p in pred]
    _check_lengths(candidates, gt)
    visible = hit = 0
    failures, in_run = 0, False
    for p, cands, g in zip(pred, candidates, gt):
        if g.occluded:
            continue
        visible += 1
        if any(iou(c, g.box) >= RECALL_IOU for c in cands):
            hit += 1
        bad = p is None or np.hypot(p.x - g.box.x, p.y - g.box.y) > FAILURE_RADIUS * g.box.diagonal
        if bad and not in_run:
            failures += 1
        in_run = bad
    return (hit / visible if visible else 0.0), failures


def hardware_descriptor():
    return (f"{platform.machine()} {platform.processor() or 'cpu'}; {os.cpu_count()} logical CPUs; "
            f"{platform.system()} {platform.release()}; Python {platform.python_version()}; numpy {np.__version__}")


def fps_report(timings):
    """Mean/median FPS and mean per-stage latency from per-frame timing records."""
    if not timings:
        raise MetricsError("fps_report needs at least one timing record")
    total = np.array([t["total_ms"] for t in timings], dtype=np.float64)
    stages = {k: float(np.mean([t[k] for t in timings])) for k in STAGES if all(k in t for t in timings)}
    return {
        "frames": len(timings),
        "mean_fps": float(1000.0 / total.mean()),
        "median_fps": float(1000.0 / np.median(total)),
        "mean_total_ms": float(total.mean()),
        "stage_mean_ms": stages,
        "hardware": hardware_descriptor(),
    }


STATE_RANK = {"Active": 2, "Occluded": 1, "Tentative": 0}


def primary_predictions(records, n_frames):
    """Reduce tracker snapshot records to one primary box/state per frame,
    plus every reported box per frame.

    The primary track is the best-ranked state (Active, then Occluded, then
    Tentative), then the highest last-detection score, then the longest
    history, then the lowest id.
    """
    by_frame = [[] for _ in range(n_frames)]
    for r in records:
        k = int(r["frame_index"])
        if not 0 <= k < n_frames:
            raise MetricsError(f"result frame_index {k} outside 0..{n_frames - 1}")
        by_frame[k].append(r)
    seen = {}
    boxes, states, cands = [], [], []
    for recs in by_frame:
        for r in recs:
            seen[r["track_id"]] = seen.get(r["track_id"], 0) + 1
        cands.append([Box(r["x"], r["y"], r["w"], r["h"]) for r in recs])
        if not recs:
            boxes.append(None)
            states.append(None)
            continue
        best = max(recs, key=lambda r: (STATE_RANK.get(r["state"], 0), r["score"], seen[r["track_id"]],
                                        -r["track_id"]))
        boxes.append(Box(best["x"], best["y"], best["w"], best["h"]))
        states.append(best["state"])
    return boxes, states, cands


def ncc_baseline_track(frames, init_box, radius=NCC_RADIUS):
    """Fixed-template NCC tracker: exhaustive search within ±radius px of the
    previous position; ties go to the smallest displacement."""
    g0 = np.asarray(frames[0], dtype=np.float64)
    H, W = g0.shape[:2]
    tw, th = int(round(init_box.w)), int(round(init_box.h))
    x0 = int(np.floor(init_box.x - tw / 2 + 0.5))
    y0 = int(np.floor(init_box.y - th / 2 + 0.5))
    if x0 < 0 or y0 < 0 or x0 + tw > W or y0 + th > H or tw < 1 or th < 1:
        raise MetricsError(f"initial box {init_box} is not inside the first frame")
    tmpl = g0[y0:y0 + th, x0:x0 + tw]
    tc = tmpl - tmpl.mean()
    tn = np.sqrt((tc * tc).sum())
    n = tw * th
    out = [init_box]
    cx, cy = x0, y0
    for f in frames[1:]:
        g = np.asarray(f, dtype=np.float64)
        xa, xb = max(0, cx - radius), min(W - tw, cx + radius)
        ya, yb = max(0, cy - radius), min(H - th, cy + radius)
        region = g[ya:yb + th, xa:xb + tw]
        win = sliding_window_view(region, (th, tw))
        s1 = win.sum(axis=(2, 3))
        s2 = np.einsum("ijkl,ijkl->ij", win, win)
        var = s2 - s1 * s1 / n
        num = np.einsum("ijkl,kl->ij", win, tc)
        with np.errstate(invalid="ignore", divide="ignore"):
            score = np.where((var > 1e-9 * n) & (tn > 0), num / np.sqrt(np.maximum(var, 0)) / tn, 0.0)
        dy, dx = np.mgrid[ya - cy:yb - cy + 1, xa - cx:xb - cx + 1]
        best = score.max()
        tie = score == best
        key = np.where(tie, (dx * dx + dy * dy) * 10**6 + (dy + radius) * 1000 + (dx + radius), np.iinfo(np.int64).max)
        i, j = np.unravel_index(np.argmin(key), key.shape)
        cx, cy = cx + int(dx[i, j]), cy + int(dy[i, j])
        out.append(Box(init_box.x + (cx - x0), init_box.y + (cy - y0), init_box.w, init_box.h))
    return out


def scenario_from_item(item):
    """Suite entries are either full scenario documents or {"family", "seed", ...}."""
    if "family" in item:
        args = dict(item)
        fam = args.pop("family")
        if fam not in FAMILIES:
            raise MetricsError(f"unknown scenario family {fam!r}; choose from {sorted(FAMILIES)}")
        return FAMILIES[fam](**args)
    return scenario_from_dict(item)


def evaluate(records, gt, method, scenario_name, meta, proposed=True):
    """Build one metrics report from tracker snapshots (or baseline boxes)."""
    if proposed:
        boxes, states, cands = primary_predictions(records, len(gt))
    else:
        boxes, states, cands = list(records), None, None
    th, values, auc = success_curve(boxes, gt, states)
    recall, failures = recall_and_failures(boxes, gt, cands)
    evaluated = sum(1 for g, s in zip(gt, states or [None] * len(gt)) if not (g.occluded and s == "Occluded"))
    return {
        "schema_version": SCHEMA_VERSION,
        **meta,
        "scenario": scenario_name,
        "method": method,
        "frames": len(gt),
        "evaluated_frames": evaluated,
        "success": {"thresholds": [float(t) for t in th], "values": [float(v) for v in values], "auc": auc},
        "recall": float(recall),
        "failures": int(failures),
        "notes": NOTES,
    }


def run_cell(scenario, method, detector, cfg, frames=None, gt=None):
    """Track one scenario with one method; returns (report, fps report)."""
    if frames is None:
        frames, gt = generate_sequence(scenario)
    meta = output_meta(cfg.hash(), scenario.seed, cfg.convention)
    if method == "proposed":
        records, timings = run_tracker(detector, frames, cfg.tracker, cfg.flow)
        report = evaluate(records, gt, method, scenario.name, meta)
    elif method == "ncc":
        timings = []
        t0 = time.perf_counter()
        boxes = ncc_baseline_track(frames, gt[0].box)
        per = (time.perf_counter() - t0) * 1e3 / len(frames)
        timings = [{"frame_index": k, "total_ms": per} for k in range(len(frames))]
        report = evaluate(boxes, gt, method, scenario.name, meta, proposed=False)
    else:
        raise MetricsError(f"unknown method {method!r}; choose from {METHODS}")
    return report, fps_report(timings)


def default_weights_path():
    return os.path.join(os.path.dirname(__file__), "data", "default.ftw")


def load_suite_detector(cfg, weights=None):
    from .model import load_detector
    path = weights or default_weights_path()
    if not os.path.exists(path):
        raise FileNotFoundError(f"weights file not found: {path}")
    return load_detector(path, cfg.detector, cfg.convention)


def run_suite(scenarios, cfg=None, baseline=True, weights=None, detector=None, out_dir=None, threads=1):
    """Run every scenario with the proposed tracker (and the baseline).

    Returns {(scenario name, method): report}.  With ``out_dir`` each cell is
    written as <scenario>__<method>.json (deterministic), its wall-clock
    numbers go to timing/<scenario>__<method>.json (not deterministic), and
    all success curves to success_curves.csv.
    """
    cfg = cfg or Config()
    if detector is None:
        detector = load_suite_detector(cfg, weights)
    methods = ["proposed"] + (["ncc"] if baseline else [])
    cells = [(s, m) for s in scenarios for m in methods]
    names = [s.name for s in scenarios]
    if len(set(names)) != len(names):
        raise MetricsError("scenario names in a suite must be unique")

    def work(cell):
        return run_cell(cell[0], cell[1], detector, cfg)

    if threads > 1:
        # a shared detector is not re-entrant (layers cache activations): one copy per cell
        import copy

        def work(cell):  # noqa: F811
            return run_cell(cell[0], cell[1], copy.deepcopy(detector), cfg)

        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(work, cells))
    else:
        results = [work(c) for c in cells]

    reports = {}
    for (s, m), (rep, fps) in zip(cells, results):
        reports[(s.name, m)] = rep
        if out_dir is not None:
            write_json(os.path.join(out_dir, f"{s.name}__{m}.json"), rep)
            write_json(os.path.join(out_dir, "timing", f"{s.name}__{m}.json"),
                       {**output_meta(cfg.hash(), s.seed, cfg.convention), "scenario": s.name, "method": m, **fps})
    if out_dir is not None:
        with atomic_open(os.path.join(out_dir, "success_curves.csv")) as fh:
            fh.write(success_csv(reports.values()))
    return reports


def success_csv(reports):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario", "method", "auc", "recall", "failures"] + [f"{t:.2f}" for t in THRESHOLDS])
    for r in sorted(reports, key=lambda r: (r["scenario"], r["method"])):
        w.writerow([r["scenario"], r["method"], repr(r["success"]["auc"]), repr(r["recall"]), r["failures"]]
                   + [repr(v) for v in r["success"]["values"]])
    return buf.getvalue()
