"""Detect-and-track loop: flow-propagated tracks are matched against fresh
detections, refined, and carried through a small lifecycle state machine."""
import logging
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .boxes import Box, iou_matrix
from .config import TrackerConfig
from .flow import FlowGeometryError, FlowParams, estimate_flow, flow_offset_for_box, propagate_box

log = logging.getLogger(__name__)

STAGES = ("flow_ms", "detect_ms", "associate_ms", "refine_ms", "update_ms")


class StreamError(ValueError):
    """Frame geometry changed mid-stream."""


class TrackState(str, Enum):
    TENTATIVE = "Tentative"
    ACTIVE = "Active"
    OCCLUDED = "Occluded"
    LOST = "Lost"


@dataclass
class Track:
    id: int
    box: Box
    template: np.ndarray
    state: TrackState = TrackState.TENTATIVE
    velocity: tuple = (0.0, 0.0)
    hits: int = 0
    misses: int = 0
    age: int = 0
    score: float = 0.0

    @property
    def live(self):
        return self.state is not TrackState.LOST

    def snapshot(self, frame_index):
        return {"frame_index": frame_index, "track_id": self.id, "state": self.state.value,
                "x": float(self.box.x), "y": float(self.box.y), "w": float(self.box.w), "h": float(self.box.h),
                "score": float(self.score)}


def _cosine(a, b):
    if a is None or b is None:
        return 1.0
    return float(np.dot(a, b))


def associate(tracks, dets, cfg=None, boxes=None):
    """Greedy IoU matching gated by appearance.

    ``boxes`` optionally overrides the track boxes (the flow-propagated ones).
    Returns (matches [(track_idx, det_idx)], unmatched track idx, unmatched det idx).
    """
    cfg = cfg or TrackerConfig()
    boxes = [t.box for t in tracks] if boxes is None else boxes
    if not tracks or not dets:
        return [], list(range(len(tracks))), list(range(len(dets)))
    ious = iou_matrix(boxes, [d.box for d in dets])
    cands = []
    for i, j in zip(*np.nonzero(ious >= cfg.iou_match_threshold)):
        if _cosine(tracks[i].template, dets[j].embedding) >= cfg.appearance_gate:
            cands.append((-ious[i, j], tracks[i].id, j, i))
    cands.sort()
    used_t, used_d, matches = set(), set(), []
    for _, _, j, i in cands:
        if i in used_t or j in used_d:
            continue
        used_t.add(i)
        used_d.add(j)
        matches.append((i, j))
    matches.sort()
    return (matches, [i for i in range(len(tracks)) if i not in used_t],
            [j for j in range(len(dets)) if j not in used_d])


def refine_with_flow(track, det, flow_box, cfg=None):
    """Blend detection and flow centers (weight α on the detection); size from the detection."""
    cfg = cfg or TrackerConfig()
    if det is None:
        return flow_box
    a = cfg.flow_blend
    b = det.box
    return Box(flow_box.x + a * (b.x - flow_box.x), flow_box.y + a * (b.y - flow_box.y), b.w, b.h)


def update_online_model(track, embedding, cfg=None):
    """Exponential template update, renormalized; counts a hit."""
    cfg = cfg or TrackerConfig()
    eta = cfg.template_update_rate
    if embedding is not None:
        blend = (1 - eta) * np.asarray(track.template, np.float64) + eta * np.asarray(embedding, np.float64)
        n = np.linalg.norm(blend)
        if n > 1e-12:
            track.template = blend / n
        else:
            log.warning("track %d: template blend has zero norm, keeping previous template", track.id)
    track.hits += 1
    track.misses = 0
    return track


def lifecycle_step(track, matched, cfg=None):
    """Advance the state machine by one frame.  Hit/miss bookkeeping for a
    match is done by :func:`update_online_model`; misses are counted here."""
    cfg = cfg or TrackerConfig()
    if track.state is TrackState.LOST:
        return track
    if matched:
        if track.state is TrackState.TENTATIVE and track.hits >= cfg.confirm_hits:
            track.state = TrackState.ACTIVE
        elif track.state is TrackState.OCCLUDED:
            track.state = TrackState.ACTIVE
        return track
    track.misses += 1
    if track.state is TrackState.TENTATIVE or track.misses >= cfg.lost_after_misses:
        track.state = TrackState.LOST
    elif track.misses >= cfg.occlude_after_misses:
        track.state = TrackState.OCCLUDED
    return track


@dataclass
class Tracker:
    """One tracker per stream.  ``detector`` needs ``detect(frame)`` returning
    detections that carry unit-norm ``embedding`` vectors."""
    detector: object
    cfg: TrackerConfig = field(default_factory=TrackerConfig)
    flow_params: FlowParams = field(default_factory=FlowParams)

    def __post_init__(self):
        self.tracks = []
        self.frame_index = 0
        self._next_id = 1
        self._prev = None
        self._shape = None

    def live_tracks(self):
        return [t for t in self.tracks if t.live]

    def _coast(self, track, field):
        """Motion-prior box for one track, plus the flow offset it used (or None).

        The median flow over the box is used unless the track is Occluded,
        the box has left the frame, or (for tracks with a velocity history)
        the flow disagrees with the velocity by more than the gate, which
        is what happens when an occluder slides over the target.  Those
        tracks move by their velocity estimate instead.
        """
        if field is not None and track.state is not TrackState.OCCLUDED:
            try:
                off = flow_offset_for_box(field, track.box)
            except FlowGeometryError:
                off = None
            if off is not None:
                gate = self.cfg.flow_velocity_gate
                if track.hits < 2 or np.hypot(off[0] - track.velocity[0], off[1] - track.velocity[1]) <= gate:
                    return propagate_box(track.box, off), off
        return propagate_box(track.box, track.velocity), None

    def _drop_duplicates(self):
        """Two live tracks on one target: keep the older, retire the other."""
        kept = []
        for t in sorted(self.live_tracks(), key=lambda t: (-t.age, t.id)):
            if kept and iou_matrix([t.box], [k.box for k in kept]).max() >= self.cfg.duplicate_iou:
                t.state = TrackState.LOST
            else:
                kept.append(t)

    def step(self, frame):
        """Process one frame; returns (snapshots of live tracks, timing record)."""
        t_start = time.perf_counter()
        frame = np.asarray(frame)
        if self._shape is None:
            self._shape = frame.shape
        elif frame.shape != self._shape:
            raise StreamError(f"frame {self.frame_index} has shape {frame.shape}, stream started with {self._shape}")
        timing = {}

        t0 = time.perf_counter()
        field = estimate_flow(self._prev, frame, self.flow_params) if self._prev is not None else None
        live = self.live_tracks()
        coasted = [self._coast(t, field) for t in live]
        flow_boxes = [b for b, _ in coasted]
        timing["flow_ms"] = (time.perf_counter() - t0) * 1e3

        t0 = time.perf_counter()
        dets = self.detector.detect(frame)
        timing["detect_ms"] = (time.perf_counter() - t0) * 1e3

        t0 = time.perf_counter()
        matches, _, unmatched_d = associate(live, dets, self.cfg, boxes=flow_boxes)
        timing["associate_ms"] = (time.perf_counter() - t0) * 1e3

        t0 = time.perf_counter()
        det_for = {i: dets[j] for i, j in matches}
        limit = float(self.flow_params.max_displacement)
        decay = self.cfg.velocity_decay
        for i, t in enumerate(live):
            new_box = refine_with_flow(t, det_for.get(i), flow_boxes[i], self.cfg)
            if i in det_for:
                # the trusted flow offset is a far steadier motion measurement than
                # the detection-driven center delta; fall back to the latter without it
                off = coasted[i][1]
                step = off if off is not None else (new_box.x - t.box.x, new_box.y - t.box.y)
                keep = decay if t.hits > 1 else 0.0   # the first measured step seeds the average
                vx = keep * t.velocity[0] + (1 - keep) * step[0]
                vy = keep * t.velocity[1] + (1 - keep) * step[1]
                t.velocity = (float(np.clip(vx, -limit, limit)), float(np.clip(vy, -limit, limit)))
            t.box = new_box
        timing["refine_ms"] = (time.perf_counter() - t0) * 1e3

        t0 = time.perf_counter()
        for i, t in enumerate(live):
            d = det_for.get(i)
            if d is not None:
                update_online_model(t, d.embedding, self.cfg)
                t.score = float(d.score)
            lifecycle_step(t, d is not None, self.cfg)
            t.age += 1
        self._drop_duplicates()
        anchors = [t.box for t in self.tracks if t.live]
        for j in unmatched_d:
            d = dets[j]
            if anchors and iou_matrix([d.box], anchors).max() >= self.cfg.spawn_overlap_iou:
                continue   # a second response on an already-tracked target
            emb = d.embedding if d.embedding is not None else np.array([1.0])
            state = TrackState.ACTIVE if self.cfg.confirm_hits <= 1 else TrackState.TENTATIVE
            self.tracks.append(Track(self._next_id, d.box, np.asarray(emb, np.float64), state=state, hits=1,
                                     score=float(d.score)))
            self._next_id += 1
            anchors.append(d.box)
        self.tracks = [t for t in self.tracks if t.live]
        timing["update_ms"] = (time.perf_counter() - t0) * 1e3

        self._prev = frame
        snaps = [t.snapshot(self.frame_index) for t in self.tracks]
        timing["total_ms"] = (time.perf_counter() - t_start) * 1e3
        timing = {"frame_index": self.frame_index, **timing}
        self.frame_index += 1
        return snaps, timing


def run_tracker(detector, frames, cfg=None, flow_params=None):
    """Run a fresh tracker over ``frames``; returns (all snapshots, timing records)."""
    tr = Tracker(detector, cfg or TrackerConfig(), flow_params or FlowParams())
    results, timings = [], []
    for f in frames:
        snaps, timing = tr.step(f)
        results.extend(snaps)
        timings.append(timing)
    return results, timings
