"""Heatmap quantization and sub-pixel offset recovery for keypoints.

A keypoint at real crop coordinates ``c`` maps to heatmap index
``q = round(c * grid / crop)`` and a residual offset
``t = c / crop - (q + alpha) / grid`` in crop-normalized units.  Given the
index and the residual the original coordinate is recovered exactly, which
is what the offset branch of the keypoint head learns to predict.

Rounding is half away from zero; indices are clamped into the grid and the
residual is taken against the clamped index, so the round trip stays exact
at crop edges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import OutOfCrop, ShapeMismatch

KEYPOINT_KINDS = ("lateral_canthus", "medial_canthus", "pupil")


@dataclass(frozen=True)
class SubpixelKeypoint:
    x: float
    y: float
    kind: str


@dataclass
class HeatmapPair:
    mask: np.ndarray  # (h', w') or (h', w', K) keypoint scores
    offsets: np.ndarray  # (h', w', 2) offsets in crop-normalized units
    crop_w: float
    crop_h: float
    alpha: float = 0.5

    def __post_init__(self):
        if self.mask.shape[:2] != self.offsets.shape[:2] or self.offsets.shape[-1] != 2:
            raise ShapeMismatch(f"mask {self.mask.shape} vs offsets {self.offsets.shape}")
        if self.crop_w <= 0 or self.crop_h <= 0:
            raise ValueError("crop size must be positive")

    @property
    def grid(self) -> tuple[int, int]:
        return self.mask.shape[1], self.mask.shape[0]

    def keypoint(self, channel: int = 0, use_offsets: bool = True) -> tuple[float, float]:
        """Argmax of one mask channel, refined by the offset at that cell."""
        m = self.mask if self.mask.ndim == 2 else self.mask[..., channel]
        iy, ix = np.unravel_index(int(np.argmax(m)), m.shape)
        t = self.offsets[iy, ix] if use_offsets else (0.0, 0.0)
        return recover((ix, iy), t, (self.crop_w, self.crop_h), self.grid, self.alpha)


def _round_half_away(v: float) -> int:
    return int(math.floor(abs(v) + 0.5)) * (1 if v >= 0 else -1)


def _check_inside(c, crop):
    x, y = c
    w, h = crop
    if not (0.0 <= x < w and 0.0 <= y < h):
        raise OutOfCrop(f"point ({x}, {y}) outside crop {w}x{h}")


def quantize(c, crop, grid, base: int = 0) -> tuple[int, int]:
    """Heatmap index of crop point ``c``; ``base=1`` gives one-based indices."""
    _check_inside(c, crop)
    out = []
    for v, size, extent in zip(c, crop, grid):
        q = _round_half_away(v * extent / size)
        out.append(min(max(q, 0), extent - 1) + base)
    return out[0], out[1]


def offset_target(c, crop, grid, alpha: float = 0.5, base: int = 0) -> tuple[float, float]:
    q = quantize(c, crop, grid, base)
    return tuple(v / size - (qi + alpha) / extent for v, size, qi, extent in zip(c, crop, q, grid))


def recover(ix, t, crop, grid, alpha: float = 0.5) -> tuple[float, float]:
    """Crop coordinates from a heatmap index plus predicted offset."""
    return tuple(
        ((qi + alpha) / extent + ti) * size for qi, ti, size, extent in zip(ix, t, crop, grid)
    )


def quantize_array(points: np.ndarray, crop, grid) -> np.ndarray:
    """Vectorized :func:`quantize` for an (N, 2) array, zero-based, no bounds check."""
    points = np.asarray(points, dtype=float)
    scaled = points * np.asarray(grid, float) / np.asarray(crop, float)
    q = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    hi = np.asarray(grid) - 1
    return np.clip(q, 0, hi).astype(int)


def offset_target_array(points: np.ndarray, crop, grid, alpha: float = 0.5) -> np.ndarray:
    q = quantize_array(points, crop, grid)
    return np.asarray(points, float) / np.asarray(crop, float) - (q + alpha) / np.asarray(grid, float)


def recover_array(ix: np.ndarray, t: np.ndarray, crop, grid, alpha: float = 0.5) -> np.ndarray:
    grid = np.asarray(grid, float)
    return ((np.asarray(ix, float) + alpha) / grid + np.asarray(t, float)) * np.asarray(crop, float)


def masked_offset_loss(pred, target, mask, cost: str = "l1") -> float:
    """Sum of ``cost(pred_i, target_i)`` over cells with ``mask == 1``."""
    pred, target, mask = _check_fields(pred, target, mask)
    d = (pred - target)[mask > 0]
    if cost == "l1":
        return float(np.abs(d).sum())
    if cost == "l2":
        return float((d * d).sum())
    raise ValueError(f"unknown loss kernel {cost!r}")


def masked_offset_loss_grad(pred, target, mask, cost: str = "l1") -> np.ndarray:
    pred, target, mask = _check_fields(pred, target, mask)
    d = pred - target
    g = np.sign(d) if cost == "l1" else 2.0 * d
    return g * (mask > 0)[..., None]


def _check_fields(pred, target, mask):
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    mask = np.asarray(mask)
    if pred.shape != target.shape or pred.shape[:-1] != mask.shape:
        raise ShapeMismatch(f"pred {pred.shape}, target {target.shape}, mask {mask.shape}")
    return pred, target, mask


def mask_softmax_loss(logits: np.ndarray, index: tuple[int, int]) -> tuple[float, np.ndarray]:
    """Cross-entropy of a softmax over all heatmap cells against one target cell.

    Returns the loss and its gradient with respect to ``logits`` (h', w').
    """
    flat = logits.reshape(-1)
    m = flat.max()
    e = np.exp(flat - m)
    z = e.sum()
    k = index[1] * logits.shape[1] + index[0]
    loss = float(np.log(z) + m - flat[k])
    g = e / z
    g[k] -= 1.0
    return loss, g.reshape(logits.shape)
