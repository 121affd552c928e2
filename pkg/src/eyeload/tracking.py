"""IoU tracking of per-frame eye detections and localized feature lookup."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import OutOfExtent
from .geometry import BBox, iou


def localize_feature(feature_map: np.ndarray, box: BBox, stride: int) -> np.ndarray:
    """Feature column under the box center of an (H, W, C) map."""
    ix = int(math.floor(box.cx / stride))
    iy = int(math.floor(box.cy / stride))
    h, w = feature_map.shape[:2]
    if not (0 <= ix < w and 0 <= iy < h):
        raise OutOfExtent(f"box center ({box.cx}, {box.cy}) maps to cell ({ix}, {iy}) outside {w}x{h}")
    return feature_map[iy, ix].copy()


@dataclass(frozen=True)
class TrackerConfig:
    theta: float = 0.3
    max_gap: int = 2
    policy: str = "optimal"  # or "greedy"

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise ValueError("theta must lie in (0, 1)")
        if self.policy not in ASSOCIATION_POLICIES:
            raise ValueError(f"policy must be one of {sorted(ASSOCIATION_POLICIES)}")
        if self.max_gap < 0:
            raise ValueError("max_gap must be non-negative")


@dataclass
class TrackEntry:
    frame: int
    box: BBox
    feature: np.ndarray | None = None
    payload: object = None  # detector output attached by the caller


@dataclass
class Track:
    id: int
    entries: list[TrackEntry] = field(default_factory=list)
    status: str = "active"
    misses: int = 0

    @property
    def last_box(self) -> BBox:
        return self.entries[-1].box

    @property
    def frames(self) -> list[int]:
        return [e.frame for e in self.entries]

    def __len__(self):
        return len(self.entries)


def greedy_pairs(ious: np.ndarray, theta: float) -> list[tuple[int, int]]:
    """Pairs (track, detection) chosen by descending IoU, each side used once.

    Only pairs with IoU strictly above ``theta`` qualify; equal IoUs go to the
    earlier track, then the earlier detection.
    """
    cand = [(-ious[t, d], t, d) for t in range(ious.shape[0]) for d in range(ious.shape[1]) if ious[t, d] > theta]
    cand.sort()
    used_t, used_d, out = set(), set(), []
    for _, t, d in cand:
        if t in used_t or d in used_d:
            continue
        used_t.add(t)
        used_d.add(d)
        out.append((t, d))
    return out


def optimal_pairs(ious: np.ndarray, theta: float) -> list[tuple[int, int]]:
    """One-to-one pairs with IoU above ``theta`` maximizing their summed IoU."""
    if ious.size == 0:
        return []
    rows, cols = linear_sum_assignment(np.where(ious > theta, ious, 0.0), maximize=True)
    return sorted((int(t), int(d)) for t, d in zip(rows, cols) if ious[t, d] > theta)


ASSOCIATION_POLICIES = {"greedy": greedy_pairs, "optimal": optimal_pairs}


@dataclass
class Association:
    matches: list[tuple[int, int]]  # (track id, detection index)
    new_tracks: list[int]
    terminated: list[int]


class IoUTracker:
    """Frame-to-frame association by box IoU.

    Pairs need IoU strictly above ``theta``; among those, ``policy`` picks
    either the assignment with the largest summed IoU or the greedy one.
    A track survives up to ``max_gap`` consecutive frames without a match and
    is terminated on the next miss.
    """

    def __init__(self, config: TrackerConfig = TrackerConfig()):
        self.config = config
        self.tracks: list[Track] = []
        self._next_id = 0
        self._last_frame = -1

    @property
    def active(self) -> list[Track]:
        return [t for t in self.tracks if t.status == "active"]

    def update(self, frame: int, boxes, features=None, payloads=None) -> Association:
        if frame <= self._last_frame:
            raise ValueError(f"frame {frame} is not after frame {self._last_frame}")
        self._last_frame = frame
        boxes = list(boxes)
        active = self.active
        ious = np.array([[iou(t.last_box, b) for b in boxes] for t in active]).reshape(len(active), len(boxes))
        pairs = ASSOCIATION_POLICIES[self.config.policy](ious, self.config.theta)
        matched_t = {t for t, _ in pairs}
        matched_d = {d for _, d in pairs}

        def entry(d):
            f = None if features is None else features[d]
            p = None if payloads is None else payloads[d]
            return TrackEntry(frame, boxes[d], f, p)

        matches = []
        for t, d in pairs:
            track = active[t]
            track.entries.append(entry(d))
            track.misses = 0
            matches.append((track.id, d))
        terminated = []
        for t, track in enumerate(active):
            if t not in matched_t:
                track.misses += 1
                if track.misses > self.config.max_gap:
                    track.status = "terminated"
                    terminated.append(track.id)
        new = []
        for d in range(len(boxes)):
            if d not in matched_d:
                track = Track(self._next_id, [entry(d)])
                self._next_id += 1
                self.tracks.append(track)
                new.append(track.id)
        return Association(matches, new, terminated)

    def finish(self) -> list[Track]:
        for t in self.tracks:
            t.status = "terminated"
        return self.tracks


def associate(active_tracks: list[Track], detections, theta: float, policy: str = "optimal"):
    """Stateless single-step association; returns ``(pairs, unmatched_detection_indices)``.

    ``pairs`` holds ``(track index, detection index)``.
    """
    ious = np.array([[iou(t.last_box, b) for b in detections] for t in active_tracks])
    ious = ious.reshape(len(active_tracks), len(detections))
    pairs = ASSOCIATION_POLICIES[policy](ious, theta)
    matched = {d for _, d in pairs}
    return pairs, [d for d in range(len(detections)) if d not in matched]


def track_sequence(per_frame_boxes, config: TrackerConfig = TrackerConfig(), per_frame_features=None,
                   per_frame_payloads=None) -> list[Track]:
    tracker = IoUTracker(config)
    for t, boxes in enumerate(per_frame_boxes):
        feats = None if per_frame_features is None else per_frame_features[t]
        pays = None if per_frame_payloads is None else per_frame_payloads[t]
        tracker.update(t, boxes, feats, pays)
    return tracker.finish()


def longest_track(tracks: list[Track]) -> Track | None:
    return max(tracks, key=lambda t: (len(t), -t.id), default=None)


def write_tracks(path, tracks: list[Track], clip_id: str = "", include_features: bool = False,
                 mode: str = "w") -> None:
    """Line-delimited JSON, one line per (track, frame) entry."""
    with Path(path).open(mode, encoding="utf-8") as fh:
        for t in tracks:
            for e in t.entries:
                rec = {
                    "clip_id": clip_id,
                    "track_id": t.id,
                    "frame": e.frame,
                    "box": [e.box.x1, e.box.y1, e.box.x2, e.box.y2],
                    "score": e.box.score,
                    "state": e.box.state,
                }
                kp = getattr(e.payload, "keypoints", None)
                if kp is not None:
                    rec["keypoints"] = kp.as_dict()
                if include_features and e.feature is not None:
                    rec["feature"] = [float(v) for v in e.feature]
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_tracks(path) -> list[dict]:
    return [json.loads(ln) for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
