"""Annotation records, two-pass agreement, final-dataset filters and flip augmentation.

Annotation files are UTF-8 JSON lines.  The first line is a header
``{"schema": "eyeload.annotations", "version": 1}``; every following line is
one record with the fields ``image_id``, ``state``, ``bounding_box``
(x1, y1, x2, y2), ``lateral_canthus``, ``medial_canthus``, ``pupil`` and an
optional ``pass``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import jsonschema
import numpy as np

from .errors import JoinMismatch, SchemaError
from .geometry import BBox, KeypointSet, iou_corners

SCHEMA_NAME = "eyeload.annotations"
SCHEMA_VERSION = 1
KEYPOINTS = ("pupil", "lateral_canthus", "medial_canthus")
DISTANCE_BINS = (0.05, 0.1, 0.2)
BIN_LABELS = ("<0.05", "[0.05,0.1)", "[0.1,0.2)", ">=0.2")

_point = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
RECORD_SCHEMA = {
    "type": "object",
    "required": ["image_id", "state", "bounding_box", "lateral_canthus", "medial_canthus", "pupil"],
    "properties": {
        "image_id": {"type": "string", "minLength": 1},
        "state": {"enum": ["open", "closed"]},
        "bounding_box": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
        "lateral_canthus": {"oneOf": [_point, {"type": "null"}]},
        "medial_canthus": {"oneOf": [_point, {"type": "null"}]},
        "pupil": {"oneOf": [_point, {"type": "null"}]},
        "pass": {"enum": [1, 2, None]},
    },
}
HEADER_SCHEMA = {
    "type": "object",
    "required": ["schema", "version"],
    "properties": {"schema": {"const": SCHEMA_NAME}, "version": {"const": SCHEMA_VERSION}},
}


def _pt(v):
    return None if v is None else (float(v[0]), float(v[1]))


@dataclass(frozen=True)
class AnnotationRecord:
    image_id: str
    state: str
    bounding_box: tuple[float, float, float, float]
    lateral_canthus: tuple[float, float] | None
    medial_canthus: tuple[float, float] | None
    pupil: tuple[float, float] | None = None
    pass_id: int | None = None

    def __post_init__(self):
        x1, y1, x2, y2 = self.bounding_box
        if not (x1 < x2 and y1 < y2):
            raise SchemaError(f"{self.image_id}: degenerate bounding box {self.bounding_box}")
        if self.state not in ("open", "closed"):
            raise SchemaError(f"{self.image_id}: state must be open or closed")
        if self.pupil is not None and self.state != "open":
            raise SchemaError(f"{self.image_id}: pupil annotated on a closed eye")

    @property
    def box(self) -> BBox:
        return BBox.from_corners(*self.bounding_box, state=self.state)

    @property
    def width(self) -> float:
        return self.bounding_box[2] - self.bounding_box[0]

    def keypoint(self, name: str):
        return getattr(self, name)

    def keypoints(self) -> KeypointSet:
        return KeypointSet(self.lateral_canthus, self.medial_canthus, self.pupil, self.pupil is not None)

    def to_json(self) -> dict:
        out = {
            "image_id": self.image_id,
            "state": self.state,
            "bounding_box": [float(v) for v in self.bounding_box],
            "lateral_canthus": None if self.lateral_canthus is None else list(self.lateral_canthus),
            "medial_canthus": None if self.medial_canthus is None else list(self.medial_canthus),
            "pupil": None if self.pupil is None else list(self.pupil),
        }
        if self.pass_id is not None:
            out["pass"] = self.pass_id
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "AnnotationRecord":
        try:
            jsonschema.validate(obj, RECORD_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise SchemaError(exc.message) from None
        return cls(
            image_id=obj["image_id"],
            state=obj["state"],
            bounding_box=tuple(float(v) for v in obj["bounding_box"]),
            lateral_canthus=_pt(obj["lateral_canthus"]),
            medial_canthus=_pt(obj["medial_canthus"]),
            pupil=_pt(obj["pupil"]),
            pass_id=obj.get("pass"),
        )


def write_annotations(path, records: Iterable[AnnotationRecord]) -> None:
    lines = [json.dumps({"schema": SCHEMA_NAME, "version": SCHEMA_VERSION}, sort_keys=True)]
    lines += [json.dumps(r.to_json(), sort_keys=True) for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_annotations(path) -> list[AnnotationRecord]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise SchemaError(f"{path}: empty annotation file (missing header)")
    try:
        jsonschema.validate(json.loads(lines[0]), HEADER_SCHEMA)
    except (json.JSONDecodeError, jsonschema.ValidationError) as exc:
        raise SchemaError(f"{path}: bad header line: {exc}") from None
    records = []
    for n, line in enumerate(lines[1:], start=2):
        try:
            records.append(AnnotationRecord.from_json(json.loads(line)))
        except (json.JSONDecodeError, SchemaError) as exc:
            raise SchemaError(f"{path}:{n}: {exc}") from None
    return records


# --- two-pass validation --------------------------------------------------


@dataclass(frozen=True)
class JoinedRecord:
    image_id: str
    first: AnnotationRecord
    second: AnnotationRecord


def join_passes(pass1: Sequence[AnnotationRecord], pass2: Sequence[AnnotationRecord]):
    """Pair records by image id.

    Returns ``(joined, unpaired_ids)``; images annotated only once are not
    comparable and come back in ``unpaired_ids``.
    """
    a, b = _index(pass1, "pass 1"), _index(pass2, "pass 2")
    common = [k for k in a if k in b]
    if not common and (a or b):
        raise JoinMismatch("the two passes share no image ids")
    unpaired = sorted(set(a) ^ set(b))
    return [JoinedRecord(k, a[k], b[k]) for k in common], unpaired


def _index(records, label):
    out = {}
    for r in records:
        if r.image_id in out:
            raise JoinMismatch(f"{label}: duplicate image id {r.image_id!r}")
        out[r.image_id] = r
    return out


def keypoint_distances(j: JoinedRecord) -> dict[str, float]:
    """Per-keypoint distance between passes over the mean box width.

    A keypoint annotated in only one pass gets ``inf``; one annotated in
    neither pass is left out.
    """
    width = 0.5 * (j.first.width + j.second.width)
    out = {}
    for name in KEYPOINTS:
        p, q = j.first.keypoint(name), j.second.keypoint(name)
        if p is None and q is None:
            continue
        out[name] = math.inf if p is None or q is None else math.dist(p, q) / width
    return out


def canthus_angle(lateral, medial) -> float:
    """Inclination of the canthus line from horizontal, in degrees within [0, 90]."""
    dx, dy = medial[0] - lateral[0], medial[1] - lateral[1]
    return math.degrees(math.atan2(abs(dy), abs(dx)))


def _mean_point(p, q):
    if p is None:
        return q
    if q is None:
        return p
    return ((p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0)


def _merged_box(j: JoinedRecord):
    return tuple((u + v) / 2.0 for u, v in zip(j.first.bounding_box, j.second.bounding_box))


def _rotation(j: JoinedRecord) -> float | None:
    lat = _mean_point(j.first.lateral_canthus, j.second.lateral_canthus)
    med = _mean_point(j.first.medial_canthus, j.second.medial_canthus)
    if lat is None or med is None:
        return None
    return canthus_angle(lat, med)


@dataclass(frozen=True)
class FilterConfig:
    min_iou: float = 0.3
    max_keypoint_distance: float = 0.2
    min_box_width: float = 30.0
    max_rotation_deg: float = 45.0


def fails_bounding_box(j: JoinedRecord, cfg: FilterConfig = FilterConfig()) -> bool:
    return iou_corners(j.first.bounding_box, j.second.bounding_box) < cfg.min_iou


def fails_state(j: JoinedRecord, cfg: FilterConfig = FilterConfig()) -> bool:
    return j.first.state != j.second.state


def fails_keypoints(j: JoinedRecord, cfg: FilterConfig = FilterConfig()) -> bool:
    return any(d >= cfg.max_keypoint_distance for d in keypoint_distances(j).values())


def fails_out_of_interest(j: JoinedRecord, cfg: FilterConfig = FilterConfig()) -> bool:
    x1, _, x2, _ = _merged_box(j)
    if x2 - x1 < cfg.min_box_width:
        return True
    angle = _rotation(j)
    return angle is not None and angle > cfg.max_rotation_deg


# Image-level filters, in the order used to attribute a removal.
IMAGE_FILTERS = (
    ("bounding_box", fails_bounding_box),
    ("state", fails_state),
    ("out_of_interest", fails_out_of_interest),
)


def merge(j: JoinedRecord, keep_keypoints: bool = True) -> AnnotationRecord:
    """Mean box and keypoint coordinates of the two passes."""
    if keep_keypoints:
        lat = _mean_point(j.first.lateral_canthus, j.second.lateral_canthus)
        med = _mean_point(j.first.medial_canthus, j.second.medial_canthus)
        pupil = _mean_point(j.first.pupil, j.second.pupil)
    else:
        lat = med = pupil = None
    return AnnotationRecord(j.image_id, j.first.state, _merged_box(j), lat, med, pupil)


def apply_final_filters(joined: Sequence[JoinedRecord], cfg: FilterConfig = FilterConfig()):
    """Drop disagreeing or out-of-interest images and disagreeing keypoints.

    Returns ``(cleaned, removal_log)``.  Each dropped image is logged exactly
    once, under the first failing filter of :data:`IMAGE_FILTERS`; images that
    survive but lose their keypoints are logged under ``keypoints``.
    """
    cleaned, log = [], []
    for j in joined:
        failed = next((name for name, pred in IMAGE_FILTERS if pred(j, cfg)), None)
        if failed is not None:
            log.append({"image_id": j.image_id, "filter": failed})
            continue
        drop_kpts = fails_keypoints(j, cfg)
        if drop_kpts:
            log.append({"image_id": j.image_id, "filter": "keypoints"})
        cleaned.append(merge(j, keep_keypoints=not drop_kpts))
    return cleaned, log


@dataclass
class AgreementReport:
    pairs: int
    mean_iou: float
    state_agreement: float
    histograms: dict[str, list[float]]
    annotated_pairs: dict[str, int]
    removed: dict[str, int] = field(default_factory=dict)
    unpaired: int = 0

    def to_json(self) -> dict:
        return {
            "pairs": self.pairs,
            "mean_iou": self.mean_iou,
            "state_agreement": self.state_agreement,
            "bins": list(BIN_LABELS),
            "histograms": self.histograms,
            "annotated_pairs": self.annotated_pairs,
            "removed": self.removed,
            "unpaired": self.unpaired,
        }


def distance_bin(d: float) -> int:
    return int(np.searchsorted(DISTANCE_BINS, d, side="right"))


def two_pass_agreement(pass1, pass2, cfg: FilterConfig = FilterConfig()) -> AgreementReport:
    joined, unpaired = join_passes(pass1, pass2)
    ious = [iou_corners(j.first.bounding_box, j.second.bounding_box) for j in joined]
    box_ok = [j for j, v in zip(joined, ious) if v >= cfg.min_iou]
    agree = [j.first.state == j.second.state for j in box_ok]
    counts = {k: [0, 0, 0, 0] for k in KEYPOINTS}
    for j in joined:
        for name, d in keypoint_distances(j).items():
            counts[name][distance_bin(d)] += 1
    annotated = {k: sum(v) for k, v in counts.items()}
    hist = {k: [c / annotated[k] if annotated[k] else 0.0 for c in v] for k, v in counts.items()}
    _, log = apply_final_filters(joined, cfg)
    removed = {name: 0 for name, _ in IMAGE_FILTERS}
    removed["keypoints"] = 0
    for entry in log:
        removed[entry["filter"]] += 1
    return AgreementReport(
        pairs=len(joined),
        mean_iou=float(np.mean(ious)) if ious else 0.0,
        state_agreement=float(np.mean(agree)) if agree else 0.0,
        histograms=hist,
        annotated_pairs=annotated,
        removed=removed,
        unpaired=len(unpaired),
    )


# --- flip + gradient mask -------------------------------------------------


def flip_record(r: AnnotationRecord, image_width: float) -> AnnotationRecord:
    def fx(p):
        return None if p is None else (image_width - p[0], p[1])

    x1, y1, x2, y2 = r.bounding_box
    return replace(
        r,
        bounding_box=(image_width - x2, y1, image_width - x1, y2),
        lateral_canthus=fx(r.lateral_canthus),
        medial_canthus=fx(r.medial_canthus),
        pupil=fx(r.pupil),
    )


def gradient_mask_regions(r: AnnotationRecord, image_size, near=1.5, far=3.0, expand=0.5):
    """Rectangle where the unannotated partner eye probably sits.

    The annotated box is shifted along the lateral-to-medial direction by
    ``near`` and ``far`` box widths; the bounding rectangle of both shifts is
    grown by ``expand`` box heights in total (split over top and bottom),
    trimmed so it never touches the annotated box, and clipped to the image.
    """
    if r.lateral_canthus is None or r.medial_canthus is None:
        return []
    dx = r.medial_canthus[0] - r.lateral_canthus[0]
    dy = r.medial_canthus[1] - r.lateral_canthus[1]
    norm = math.hypot(dx, dy)
    if norm == 0:
        return []
    ux, uy = dx / norm, dy / norm
    x1, y1, x2, y2 = r.bounding_box
    w, h = x2 - x1, y2 - y1
    shifts = [(near * w * ux, near * w * uy), (far * w * ux, far * w * uy)]
    rx1 = min(x1 + sx for sx, _ in shifts)
    rx2 = max(x2 + sx for sx, _ in shifts)
    ry1 = min(y1 + sy for _, sy in shifts) - expand * h / 2
    ry2 = max(y2 + sy for _, sy in shifts) + expand * h / 2
    overlaps = rx1 < x2 and rx2 > x1 and ry1 < y2 and ry2 > y1
    if overlaps:
        if abs(ux) >= abs(uy):
            rx1, rx2 = (max(rx1, x2), rx2) if ux > 0 else (rx1, min(rx2, x1))
        else:
            ry1, ry2 = (max(ry1, y2), ry2) if uy > 0 else (ry1, min(ry2, y1))
    width, height = image_size
    rx1, rx2 = max(rx1, 0.0), min(rx2, float(width))
    ry1, ry2 = max(ry1, 0.0), min(ry2, float(height))
    if rx2 <= rx1 or ry2 <= ry1:
        return []
    return [(rx1, ry1, rx2, ry2)]


@dataclass
class MaskedSample:
    image: np.ndarray
    record: AnnotationRecord
    mask_regions: list


def flip_with_gradient_mask(image: np.ndarray, record: AnnotationRecord):
    """Return ``(flipped, original)`` samples, each with its gradient-mask regions."""
    h, w = image.shape[:2]
    flipped_record = flip_record(record, w)
    flipped = MaskedSample(image[:, ::-1].copy(), flipped_record, gradient_mask_regions(flipped_record, (w, h)))
    original = MaskedSample(image, record, gradient_mask_regions(record, (w, h)))
    return flipped, original


def write_image(path, image: np.ndarray) -> None:
    """Grayscale [0, 1] image as a 16-bit PNG."""
    from PIL import Image

    q = np.round(np.clip(np.asarray(image, dtype=float), 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(path, format="PNG")


def read_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im)
    scale = 65535.0 if arr.dtype == np.uint16 or arr.max(initial=0) > 255 else 255.0
    return arr.astype(float) / scale
