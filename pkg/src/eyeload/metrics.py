"""Keypoint and box average precision, blink metrics and a throughput bench.

Keypoint matching uses a weighted, box-width-normalized distance over the
pupil and both canthi (canthi only for closed eyes).  Detections are sorted
by score across the whole test set and matched greedily, one ground-truth
eye per detection.  The single-eye rule drops, per image, the first
unmatched detection that is clearly the unannotated partner eye (weighted
distance above the ignore cutoff, or zero box overlap in box mode).
"""

from __future__ import annotations

import csv
import json
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import jsonschema
import numpy as np

from .datakit import AnnotationRecord
from .errors import EmptyInput, EyeloadError, MissingLandmark
from .geometry import BBox, KeypointSet, iou

DEFAULT_THRESHOLDS = tuple(round(0.01 * k, 2) for k in range(1, 11))
CANTHUS_SPAN_FACTOR = 1.3


@dataclass(frozen=True)
class MatchConfig:
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    canthus_weight: float = 0.5
    pupil_weight: float = 1.0
    single_eye_rule: bool = True
    ignore_distance: float = 0.5
    mode: str = "keypoint"  # or "box"
    iou_threshold: float = 0.5
    normalization: str = "box_width"  # or "canthus_span"

    def __post_init__(self):
        th = tuple(float(t) for t in self.thresholds)
        object.__setattr__(self, "thresholds", th)
        if not th or any(not 0 < t < 1 for t in th) or any(b <= a for a, b in zip(th, th[1:])):
            raise ValueError("thresholds must be strictly increasing inside (0, 1)")
        if self.mode not in ("keypoint", "box"):
            raise ValueError(f"unknown match mode {self.mode!r}")
        if self.normalization not in ("box_width", "canthus_span"):
            raise ValueError(f"unknown normalization {self.normalization!r}")


@dataclass
class Prediction:
    score: float
    box: BBox
    keypoints: KeypointSet | None = None
    closed_prob: float | None = None


@dataclass
class GroundTruth:
    box: BBox
    keypoints: KeypointSet
    state: str

    @classmethod
    def from_record(cls, r: AnnotationRecord) -> "GroundTruth":
        if r.lateral_canthus is None or r.medial_canthus is None:
            raise MissingLandmark(f"{r.image_id}: ground truth needs both canthi")
        kp = KeypointSet(r.lateral_canthus, r.medial_canthus, r.pupil,
                         pupil_visible=r.pupil is not None and r.state == "open")
        return cls(r.box, kp, r.state)

    def scale(self, normalization: str = "box_width") -> float:
        if normalization == "canthus_span":
            a, b = np.asarray(self.keypoints.lateral), np.asarray(self.keypoints.medial)
            return float(np.hypot(*(a - b))) * CANTHUS_SPAN_FACTOR
        return self.box.w


def prediction_from_detection(det) -> Prediction:
    return Prediction(det.box.score, det.box, det.keypoints, getattr(det, "state_prob", None))


def weighted_keypoint_distance(pred: KeypointSet, gt: KeypointSet, box_width: float,
                               canthus_weight: float = 0.5, pupil_weight: float = 1.0) -> float:
    """Weighted mean landmark distance divided by ``box_width``.

    The pupil enters only when the ground truth shows it.
    """
    if gt.lateral is None or gt.medial is None:
        raise MissingLandmark("ground truth needs both canthi")
    if box_width <= 0:
        raise ValueError("box_width must be positive")
    pairs = [(pred.lateral, gt.lateral, canthus_weight), (pred.medial, gt.medial, canthus_weight)]
    if gt.pupil is not None and gt.pupil_visible:
        pairs.append((pred.pupil, gt.pupil, pupil_weight))
    total = wsum = 0.0
    for p, g, w in pairs:
        if p is None:
            raise MissingLandmark("prediction lacks a landmark the ground truth has")
        total += w * float(np.hypot(p[0] - g[0], p[1] - g[1]))
        wsum += w
    return total / wsum / box_width


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    scores: np.ndarray
    r_tot: int
    tp: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    fp: np.ndarray = field(default_factory=lambda: np.zeros(0, int))

    def points(self) -> list[tuple[float, float]]:
        """(precision, recall) pairs in score order."""
        return [(float(p), float(r)) for p, r in zip(self.precision, self.recall)]


def _flat_predictions(preds_per_image):
    flat = []
    for i, preds in enumerate(preds_per_image):
        for j, p in enumerate(preds):
            flat.append((i, j, p))
    # stable: ties keep image order, then in-image order
    flat.sort(key=lambda t: -t[2].score)
    return flat


def _pair_table(preds_per_image, gts_per_image, cfg: MatchConfig):
    """Per-prediction closeness to each ground truth in its image.

    Keypoint mode stores the weighted distance; box mode stores IoU.
    """
    table = {}
    for i, (preds, gts) in enumerate(zip(preds_per_image, gts_per_image)):
        for j, p in enumerate(preds):
            row = []
            for g in gts:
                if cfg.mode == "box":
                    row.append(iou(p.box, g.box))
                elif p.keypoints is None:
                    raise MissingLandmark("keypoint matching needs predicted keypoints")
                else:
                    row.append(weighted_keypoint_distance(p.keypoints, g.keypoints, g.scale(cfg.normalization),
                                                          cfg.canthus_weight, cfg.pupil_weight))
            table[i, j] = row
    return table


def _match(flat, table, gts_per_image, cfg: MatchConfig, tau: float):
    """Greedy pass in score order; returns per-prediction outcome 'tp' | 'fp' | 'ignored'."""
    matched = [set() for _ in gts_per_image]
    ignored_used = [False] * len(gts_per_image)
    outcome = []
    for i, j, _ in flat:
        row = table[i, j]
        best, best_k = None, None
        for k, v in enumerate(row):
            if k in matched[i]:
                continue
            ok = v >= cfg.iou_threshold if cfg.mode == "box" else v < tau
            if ok and (best is None or (v > best if cfg.mode == "box" else v < best)):
                best, best_k = v, k
        if best_k is not None:
            matched[i].add(best_k)
            outcome.append("tp")
            continue
        if cfg.single_eye_rule and not ignored_used[i]:
            if cfg.mode == "box":
                partner = all(v == 0.0 for v in row)
            else:
                partner = all(v > cfg.ignore_distance for v in row)
            if partner:
                ignored_used[i] = True
                outcome.append("ignored")
                continue
        outcome.append("fp")
    return outcome


def _curve_from_outcomes(flat, outcome, r_tot: int) -> PRCurve:
    tp = fp = 0
    rec, prec, sc, tps, fps = [], [], [], [], []
    for k, ((_, _, p), o) in enumerate(zip(flat, outcome)):
        tp += o == "tp"
        fp += o == "fp"
        last_of_score = k + 1 == len(flat) or flat[k + 1][2].score != p.score
        if last_of_score and tp + fp > 0:
            rec.append(tp / r_tot if r_tot else 0.0)
            prec.append(tp / (tp + fp))
            sc.append(p.score)
            tps.append(tp)
            fps.append(fp)
    return PRCurve(np.array(rec), np.array(prec), np.array(sc), r_tot, np.array(tps, int), np.array(fps, int))


def match_and_score(preds_per_image: Sequence[Sequence[Prediction]], gts_per_image: Sequence[Sequence[GroundTruth]],
                    cfg: MatchConfig = MatchConfig()) -> dict[float, PRCurve]:
    """PR curve per distance threshold (box mode: a single curve keyed by the IoU threshold)."""
    if len(preds_per_image) != len(gts_per_image):
        raise ValueError("predictions and ground truth must cover the same images")
    flat = _flat_predictions(preds_per_image)
    table = _pair_table(preds_per_image, gts_per_image, cfg)
    r_tot = sum(len(g) for g in gts_per_image)
    taus = (cfg.iou_threshold,) if cfg.mode == "box" else cfg.thresholds
    return {tau: _curve_from_outcomes(flat, _match(flat, table, gts_per_image, cfg, tau), r_tot) for tau in taus}


def average_precision(curve: PRCurve) -> float:
    """Step sum of precision over recall increments, recall counted as a fraction."""
    prev, total = 0.0, 0.0
    for r, p in zip(curve.recall, curve.precision):
        total += (r - prev) * p
        prev = r
    return float(total)


def mean_average_precision(curves: dict[float, PRCurve]) -> float:
    if not curves:
        raise EmptyInput("no curves to average")
    return float(np.mean([average_precision(c) for c in curves.values()]))


def annotated_eye_prediction(preds: Sequence[Prediction], gt: GroundTruth) -> Prediction | None:
    """Highest-scoring prediction overlapping the annotated eye, if any."""
    hits = [p for p in preds if iou(p.box, gt.box) > 0]
    return max(hits, key=lambda p: p.score, default=None)


def keypoint_errors(preds_per_image, gts_per_image, cfg: MatchConfig = MatchConfig()) -> np.ndarray:
    """Weighted error of the annotated eye's detection per image; NaN when it was missed."""
    out = []
    for preds, gts in zip(preds_per_image, gts_per_image):
        for g in gts:
            p = annotated_eye_prediction(preds, g)
            if p is None or p.keypoints is None:
                out.append(np.nan)
            else:
                out.append(weighted_keypoint_distance(p.keypoints, g.keypoints, g.scale(cfg.normalization),
                                                      cfg.canthus_weight, cfg.pupil_weight))
    return np.array(out)


def blink_metrics(pred_states: Sequence[str], gt_states: Sequence[str], scores: Sequence[float] | None = None) -> dict:
    """Binary metrics with ``closed`` as the positive class; AP ranks by closed-class score."""
    if len(pred_states) != len(gt_states):
        raise ValueError("predicted and ground-truth states differ in length")
    if not gt_states:
        raise EmptyInput("no samples")
    pred = np.array([s == "closed" for s in pred_states])
    gt = np.array([s == "closed" for s in gt_states])
    tp = int(np.sum(pred & gt))
    fp = int(np.sum(pred & ~gt))
    fn = int(np.sum(~pred & gt))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    out = {"accuracy": float(np.mean(pred == gt)), "precision": precision, "recall": recall, "f1": f1,
           "tp": tp, "fp": fp, "fn": fn, "tn": int(np.sum(~pred & ~gt))}
    if scores is not None:
        order = np.argsort(-np.asarray(scores, dtype=float), kind="stable")
        s = np.asarray(scores, dtype=float)[order]
        hits = gt[order]
        ctp = np.cumsum(hits)
        k = np.arange(1, len(s) + 1)
        last = np.r_[s[1:] != s[:-1], True]
        n_pos = int(gt.sum())
        rec = ctp[last] / n_pos if n_pos else np.zeros(int(last.sum()))
        pr = ctp[last] / k[last]
        out["ap"] = average_precision(PRCurve(rec, pr, s[last], n_pos))
    return out


def environment_info() -> dict:
    return {
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "platform": platform.platform(),
        "machine": platform.machine(),
        "cpu_count": os.cpu_count(),
    }


def throughput_bench(infer: Callable[[np.ndarray], object], images: Sequence[np.ndarray], warmup: int = 3) -> dict:
    """Frames per second at batch size one, with warm-up calls excluded."""
    if len(images) == 0:
        raise EmptyInput("throughput bench needs at least one image")
    for k in range(warmup):
        infer(images[k % len(images)])
    lat = []
    start = time.perf_counter()
    for img in images:
        t0 = time.perf_counter()
        infer(img)
        lat.append(time.perf_counter() - t0)
    total = time.perf_counter() - start
    lat_ms = np.array(lat) * 1e3
    return {
        "fps": len(images) / total if total > 0 else float("inf"),
        "total_seconds": total,
        "images": len(images),
        "warmup": warmup,
        "latency_ms": {q: float(np.percentile(lat_ms, int(q[1:]))) for q in ("p50", "p90", "p99")},
        "environment": environment_info(),
    }


REPORT_SCHEMA = {
    "type": "object",
    "required": ["keypoint_ap", "mAP", "box_ap50", "mean_weighted_error", "state_accuracy", "blink", "counts"],
    "properties": {
        "keypoint_ap": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
        "mAP": {"type": "number", "minimum": 0, "maximum": 1},
        "box_ap50": {"type": "number", "minimum": 0, "maximum": 1},
        "mean_weighted_error": {"type": ["number", "null"], "minimum": 0},
        "state_accuracy": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "blink": {
            "type": "object",
            "required": ["accuracy", "precision", "recall", "f1"],
            "properties": {k: {"type": "number"} for k in ("accuracy", "precision", "recall", "f1", "ap")},
        },
        "load": {"type": "object"},
        "fps": {"type": "object"},
        "counts": {
            "type": "object",
            "required": ["images", "detections", "missed"],
            "properties": {k: {"type": "integer", "minimum": 0} for k in ("images", "detections", "missed")},
        },
    },
}


def evaluate_detections(preds_per_image, records: Sequence[AnnotationRecord], cfg: MatchConfig = MatchConfig()) -> dict:
    """Full detection report: keypoint AP per threshold, mAP, box AP50, errors, state and blink metrics."""
    if len(records) == 0:
        raise EmptyInput("no ground-truth records")
    gts = [[GroundTruth.from_record(r)] for r in records]
    curves = match_and_score(preds_per_image, gts, cfg)
    box_cfg = MatchConfig(cfg.thresholds, single_eye_rule=cfg.single_eye_rule, mode="box",
                          iou_threshold=cfg.iou_threshold)
    box_curve = match_and_score(preds_per_image, gts, box_cfg)[cfg.iou_threshold]
    errs = keypoint_errors(preds_per_image, gts, cfg)
    found = ~np.isnan(errs)
    pred_states, gt_states, closed_scores = [], [], []
    for preds, g in zip(preds_per_image, gts):
        p = annotated_eye_prediction(preds, g[0])
        if p is None:
            continue
        pc = p.closed_prob if p.closed_prob is not None else float(p.box.state == "closed")
        pred_states.append("closed" if pc > 0.5 else "open")
        gt_states.append(g[0].state)
        closed_scores.append(pc)
    blink = (blink_metrics(pred_states, gt_states, closed_scores) if gt_states
             else {"accuracy": 0.0, "precision": 0.0, "recall": 0.0, "f1": 0.0})
    return {
        "keypoint_ap": {f"{t:.2f}": average_precision(c) for t, c in curves.items()},
        "mAP": mean_average_precision(curves),
        "box_ap50": average_precision(box_curve),
        "mean_weighted_error": float(np.mean(errs[found])) if found.any() else None,
        "state_accuracy": blink["accuracy"] if gt_states else None,
        "blink": blink,
        "counts": {"images": len(records), "detections": int(sum(len(p) for p in preds_per_image)),
                   "missed": int((~found).sum())},
        "_curves": curves,
        "_errors": errs,
    }


def public_report(report: dict) -> dict:
    return {k: v for k, v in report.items() if not k.startswith("_")}


def validate_report(report: dict) -> None:
    try:
        jsonschema.validate(public_report(report), REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise EyeloadError(f"metrics report invalid: {exc.message}") from None


def write_report(report: dict, json_path, csv_path=None) -> None:
    pub = public_report(report)
    validate_report(pub)
    Path(json_path).write_text(json.dumps(pub, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if csv_path is not None:
        rows = []

        def walk(prefix, v):
            if isinstance(v, dict):
                for k in sorted(v):
                    walk(f"{prefix}.{k}" if prefix else k, v[k])
            else:
                rows.append((prefix, v))

        walk("", pub)
        with Path(csv_path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "value"])
            w.writerows(rows)


def plot_pr_curves(curves: dict[float, PRCurve], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for t, c in curves.items():
        ax.step(np.r_[0, c.recall], np.r_[c.precision[:1] if len(c.precision) else [1.0], c.precision],
                where="post", label=f"{t:.2f}")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(title="threshold", fontsize=6, ncol=2)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_error_histogram(errors: np.ndarray, path, bins: int = 30) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    e = np.asarray(errors, dtype=float)
    e = e[~np.isnan(e)]
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.hist(e, bins=bins, range=(0, max(0.2, float(e.max()) if e.size else 0.2)))
    ax.set_xlabel("weighted keypoint error (box widths)")
    ax.set_ylabel("images")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
