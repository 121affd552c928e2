"""Box parameterization, IoU and greedy non-max suppression.

Boxes live in continuous pixel coordinates: pixel ``i`` covers ``[i, i+1)``.
Grid cells are ``stride`` pixels wide, so cell ``(ix, iy)`` spans
``[ix*stride, (ix+1)*stride)`` horizontally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import OffsetOutOfRange

STATES = ("open", "closed", "unknown")


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float
    score: float = 1.0
    state: str = "unknown"

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box size must be positive, got w={self.w}, h={self.h}")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if self.state not in STATES:
            raise ValueError(f"unknown state {self.state!r}")

    @classmethod
    def from_corners(cls, x1, y1, x2, y2, score=1.0, state="unknown") -> "BBox":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1, score, state)

    @property
    def x1(self) -> float:
        return self.cx - self.w / 2.0

    @property
    def y1(self) -> float:
        return self.cy - self.h / 2.0

    @property
    def x2(self) -> float:
        return self.cx + self.w / 2.0

    @property
    def y2(self) -> float:
        return self.cy + self.h / 2.0

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return self.w * self.h

    def with_score(self, score: float) -> "BBox":
        return replace(self, score=score)


@dataclass(frozen=True)
class KeypointSet:
    """Eye landmarks in image pixels. ``pupil`` is None when not annotated."""

    lateral: tuple[float, float]
    medial: tuple[float, float]
    pupil: tuple[float, float] | None = None
    pupil_visible: bool = True

    def __post_init__(self):
        if self.pupil is None and self.pupil_visible:
            object.__setattr__(self, "pupil_visible", False)

    def as_dict(self) -> dict:
        return {
            "lateral_canthus": list(self.lateral),
            "medial_canthus": list(self.medial),
            "pupil": None if self.pupil is None else list(self.pupil),
            "pupil_visible": self.pupil_visible,
        }


@dataclass(frozen=True)
class GridSpec:
    stride: int
    cols: int
    rows: int

    def __post_init__(self):
        if self.stride <= 0 or self.cols <= 0 or self.rows <= 0:
            raise ValueError("grid stride and extent must be positive")

    @classmethod
    def for_image(cls, width: int, height: int, stride: int) -> "GridSpec":
        if width % stride or height % stride:
            raise ValueError(f"image {width}x{height} is not divisible by stride {stride}")
        return cls(stride, width // stride, height // stride)

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        ix = min(max(int(math.floor(x / self.stride)), 0), self.cols - 1)
        iy = min(max(int(math.floor(y / self.stride)), 0), self.rows - 1)
        return ix, iy

    def cell_centers(self) -> np.ndarray:
        """(rows, cols, 2) array of cell centers in pixels, x first."""
        xs = (np.arange(self.cols) + 0.5) * self.stride
        ys = (np.arange(self.rows) + 0.5) * self.stride
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)


@dataclass(frozen=True)
class CellPrediction:
    tp: float
    tx: float
    ty: float
    tw: float
    th: float
    cell_ix: int
    cell_iy: int
    prior_w: float
    prior_h: float


def decode_cell(p: CellPrediction, g: GridSpec) -> BBox:
    """Turn one cell's raw outputs into a box.

    The center offset ``tanh(t) + 0.5`` spans (-0.5, 1.5) cells, so a cell can
    place the box center up to the middle of either neighbour.
    """
    if not (0 <= p.cell_ix < g.cols and 0 <= p.cell_iy < g.rows):
        raise ValueError(f"cell ({p.cell_ix}, {p.cell_iy}) outside {g.cols}x{g.rows} grid")
    bx = math.tanh(p.tx) + 0.5 + p.cell_ix
    by = math.tanh(p.ty) + 0.5 + p.cell_iy
    score = 1.0 / (1.0 + math.exp(-p.tp)) if p.tp > -700 else 0.0
    return BBox(
        bx * g.stride,
        by * g.stride,
        p.prior_w * math.exp(p.tw),
        p.prior_h * math.exp(p.th),
        score=score,
    )


def decode_grid(raw: np.ndarray, g: GridSpec, prior: tuple[float, float]) -> np.ndarray:
    """Vectorized decode of a (rows, cols, >=5) map into (rows, cols, 4) cx, cy, w, h."""
    ix = np.arange(g.cols)[None, :]
    iy = np.arange(g.rows)[:, None]
    cx = (np.tanh(raw[..., 1]) + 0.5 + ix) * g.stride
    cy = (np.tanh(raw[..., 2]) + 0.5 + iy) * g.stride
    w = prior[0] * np.exp(raw[..., 3])
    h = prior[1] * np.exp(raw[..., 4])
    return np.stack([cx, cy, w, h], axis=-1)


def encode_target(
    b: BBox, g: GridSpec, prior: tuple[float, float], cell: tuple[int, int] | None = None
) -> CellPrediction:
    """Inverse of :func:`decode_cell` for the cell containing the box center.

    ``cell`` overrides the assigned cell; the required offset must then still
    fall strictly inside (-0.5, 1.5) cells or ``OffsetOutOfRange`` is raised.
    """
    ix, iy = g.cell_of(b.cx, b.cy) if cell is None else cell
    ux = b.cx / g.stride - ix - 0.5
    uy = b.cy / g.stride - iy - 0.5
    if not (-1.0 < ux < 1.0 and -1.0 < uy < 1.0):
        raise OffsetOutOfRange(f"center offset ({ux + 0.5:.4f}, {uy + 0.5:.4f}) cells is unreachable")
    return CellPrediction(
        tp=math.inf,
        tx=math.atanh(ux),
        ty=math.atanh(uy),
        tw=math.log(b.w / prior[0]),
        th=math.log(b.h / prior[1]),
        cell_ix=ix,
        cell_iy=iy,
        prior_w=prior[0],
        prior_h=prior[1],
    )


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return min(1.0, inter / union)


def iou_corners(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two (x1, y1, x2, y2) boxes."""
    return iou(BBox.from_corners(*a), BBox.from_corners(*b))


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) arrays of x1, y1, x2, y2."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms(dets: Iterable[BBox], iou_threshold: float = 0.5) -> list[BBox]:
    """Greedy suppression by descending score.

    Equal scores keep their input order, so callers that list detections in
    cell order get the lower cell index first.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    order = sorted(enumerate(dets), key=lambda t: (-t[1].score, t[0]))
    kept: list[BBox] = []
    for _, d in order:
        if all(iou(d, k) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


def nms_indices(boxes: Sequence[BBox], iou_threshold: float = 0.5) -> list[int]:
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    kept: list[int] = []
    for i in order:
        if all(iou(boxes[i], boxes[k]) <= iou_threshold for k in kept):
            kept.append(i)
    return kept
