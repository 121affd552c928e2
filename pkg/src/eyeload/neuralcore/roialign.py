"""Bilinear RoI-Align on channels-last feature maps.

Feature value ``F[i, j]`` sits at continuous position ``(j + 0.5, i + 0.5)``
in feature units.  Each output bin averages ``sampling x sampling`` bilinear
samples placed on a regular sub-grid.  Because bilinear sampling is separable
the whole operation is ``Py @ F @ Px.T`` per channel, with ``Py`` (out_h, H)
and ``Px`` (out_w, W) interpolation matrices, which also gives the backward
pass for free.
"""

from __future__ import annotations

import numpy as np

from ..errors import EmptyRoI, NoForwardState


def _axis_weights(lo: float, hi: float, bins: int, sampling: int, size: int) -> np.ndarray:
    """Average bilinear weights for ``bins`` bins spanning ``[lo, hi)`` along one axis."""
    step = (hi - lo) / bins
    offs = (np.arange(sampling) + 0.5) / sampling
    pos = lo + (np.arange(bins)[:, None] + offs[None, :]) * step  # (bins, sampling)
    pos = pos.reshape(-1) - 0.5
    mat = np.zeros((pos.size, size))
    valid = (pos >= -1.0) & (pos <= size)
    p = np.clip(pos, 0.0, size - 1)
    i0 = np.floor(p).astype(int)
    i1 = np.minimum(i0 + 1, size - 1)
    frac = p - i0
    rows = np.arange(pos.size)
    np.add.at(mat, (rows, i0), np.where(valid, 1.0 - frac, 0.0))
    np.add.at(mat, (rows, i1), np.where(valid, frac, 0.0))
    return mat.reshape(bins, sampling, size).mean(axis=1)


def roi_weights(box, feat_hw, out, scale, sampling=2):
    """Interpolation matrices for a box given as (x1, y1, x2, y2) image pixels."""
    x1, y1, x2, y2 = (float(v) * scale for v in box)
    h, w = feat_hw
    if not (x2 > x1 and y2 > y1) or x2 <= 0 or y2 <= 0 or x1 >= w or y1 >= h:
        raise EmptyRoI(f"box {tuple(box)} does not intersect the {h}x{w} feature map")
    out_h, out_w = out
    py = _axis_weights(y1, y2, out_h, sampling, h)
    px = _axis_weights(x1, x2, out_w, sampling, w)
    return py, px


def roi_align(feature: np.ndarray, box, out=(8, 16), scale: float = 1.0, sampling: int = 2) -> np.ndarray:
    """Pool one box from an (H, W, C) feature map into (out_h, out_w, C).

    ``box`` is (x1, y1, x2, y2) in image pixels or a BBox; ``scale`` converts
    image pixels to feature cells (1/stride).
    """
    if hasattr(box, "corners"):
        box = box.corners
    py, px = roi_weights(box, feature.shape[:2], out, scale, sampling)
    return np.einsum("ah,hwc,bw->abc", py, feature, px, optimize=True)


class RoIAlign:
    """Batched RoI-Align with a backward pass into the source feature maps."""

    kind = "roialign"

    def __init__(self, out=(8, 16), scale=1.0 / 8, sampling=2):
        self.out, self.scale, self.sampling = tuple(out), float(scale), int(sampling)
        self._cache = None

    def spec(self):
        return {"kind": self.kind, "out": list(self.out), "scale": self.scale, "sampling": self.sampling}

    def forward(self, features: np.ndarray, boxes, image_index=None) -> np.ndarray:
        """``features`` (N, H, W, C); ``boxes`` (B, 4) corners; ``image_index`` (B,)."""
        boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
        idx = np.arange(len(boxes)) if image_index is None else np.asarray(image_index, int)
        mats = [roi_weights(b, features.shape[1:3], self.out, self.scale, self.sampling) for b in boxes]
        out = np.empty((len(boxes),) + self.out + (features.shape[-1],))
        for k, (py, px) in enumerate(mats):
            out[k] = np.einsum("ah,hwc,bw->abc", py, features[idx[k]], px, optimize=True)
        self._cache = (mats, idx, features.shape)
        return out

    def backward(self, g: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise NoForwardState("roialign: backward called without a forward pass")
        mats, idx, shape = self._cache
        dfeat = np.zeros(shape)
        for k, (py, px) in enumerate(mats):
            dfeat[idx[k]] += np.einsum("ah,abc,bw->hwc", py, g[k], px, optimize=True)
        return dfeat
