"""Single-shot eye detector with a sub-pixel keypoint head.

The backbone maps a 128x128 grayscale frame to a stride-8 feature map.  A
3x3 convolution predicts six values per cell: objectness ``tp``, box
parameters ``tx, ty, tw, th`` and an open/closed logit.  Keypoints come
from one of four head variants:

``direct_regressor``
    a conv subnet on the full feature map regressing the three keypoints
    relative to each cell's box.
``mask_only_trained``
    RoI-Aligned mask branch trained alone; keypoints at mask argmax cells.
``mlr_mask_prediction``
    mask and offset branches trained jointly, offsets ignored at inference.
``mlr_full``
    joint training, keypoint = mask argmax cell + predicted offset.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import subpixel
from .datakit import AnnotationRecord, flip_with_gradient_mask, gradient_mask_regions
from .errors import ConfigInvalid, IncompatibleCheckpoint, ShapeMismatch
from .geometry import BBox, GridSpec, KeypointSet, decode_grid, encode_target, nms_indices
from .neuralcore import Conv2d, Model, ReLU, RoIAlign, Sequential, conv_bn_relu, make_optimizer
from .neuralcore import checkpoint
from .tracking import localize_feature

HEAD_VARIANTS = ("direct_regressor", "mask_only_trained", "mlr_mask_prediction", "mlr_full")
KP_ORDER = ("lateral_canthus", "medial_canthus", "pupil")
LOSS_TERMS = ("objectness", "box", "state", "mask", "offset", "regress")


@dataclass
class DetectorConfig:
    backbone_channels: tuple[int, ...] = (16, 32, 64, 128)
    image_size: int = 128
    stride: int = 8
    head_variant: str = "mlr_full"
    roi_out: tuple[int, int] = (8, 16)  # (H, W) of the heatmap
    roi_scale: int = 8  # stride of the map RoI-Align samples from
    roi_sampling: int = 2
    mlr_depth: int = 2
    mlr_channels: int = 64
    prior: tuple[float, float] = (60.0, 30.0)
    nms_threshold: float = 0.5
    offset_cost: str = "l1"
    loss_weights: dict = field(default_factory=lambda: {k: 1.0 for k in LOSS_TERMS})
    objectness_bias: float = -4.0
    neighbor_ignore: int = 1  # cells around the positive left out of the objectness loss
    seed: int = 0

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        self.roi_out = tuple(int(v) for v in self.roi_out)
        self.prior = tuple(float(v) for v in self.prior)
        self.validate()

    def validate(self):
        if self.head_variant not in HEAD_VARIANTS:
            raise ConfigInvalid(f"head_variant must be one of {HEAD_VARIANTS}, got {self.head_variant!r}")
        if len(self.backbone_channels) != 4:
            raise ConfigInvalid("backbone needs exactly 4 block widths")
        if self.stride != 8 or self.roi_scale != self.stride:
            raise ConfigInvalid("the backbone stride chain totals 8; roi_scale must equal it")
        if self.image_size % self.stride:
            raise ConfigInvalid("image size must be a multiple of the stride")
        if self.mlr_depth < 1 or self.mlr_channels < 1:
            raise ConfigInvalid("mlr_depth and mlr_channels must be positive")
        if min(self.prior) <= 0:
            raise ConfigInvalid("prior box size must be positive")
        if self.neighbor_ignore < 0:
            raise ConfigInvalid("neighbor_ignore must be non-negative")
        if not 0 < self.nms_threshold < 1:
            raise ConfigInvalid("nms_threshold must lie in (0, 1)")
        unknown = set(self.loss_weights) - set(LOSS_TERMS)
        if unknown:
            raise ConfigInvalid(f"unknown loss terms {sorted(unknown)}")

    @property
    def grid(self) -> GridSpec:
        return GridSpec.for_image(self.image_size, self.image_size, self.stride)

    @property
    def heatmap(self) -> tuple[int, int]:
        """(w', h') of the keypoint heatmap."""
        return self.roi_out[1], self.roi_out[0]

    @property
    def uses_mask_head(self) -> bool:
        return self.head_variant != "direct_regressor"

    @property
    def trains_offsets(self) -> bool:
        return self.head_variant in ("mlr_mask_prediction", "mlr_full")

    def weight(self, term: str) -> float:
        return float(self.loss_weights.get(term, 1.0))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        d["roi_out"] = list(self.roi_out)
        d["prior"] = list(self.prior)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigInvalid(f"unknown detector config keys {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from None


def median_prior(records) -> tuple[float, float]:
    ws = [r.bounding_box[2] - r.bounding_box[0] for r in records]
    hs = [r.bounding_box[3] - r.bounding_box[1] for r in records]
    if not ws:
        raise ConfigInvalid("cannot compute a prior from an empty training split")
    return float(np.median(ws)), float(np.median(hs))


def _branch(in_ch, mid_ch, depth, out_ch, rng) -> Sequential:
    layers = []
    c = in_ch
    for _ in range(depth):
        layers += [Conv2d(c, mid_ch, 3, rng=rng), ReLU()]
        c = mid_ch
    layers.append(Conv2d(c, out_ch, 1, rng=rng))
    return Sequential(*layers)


@dataclass
class Detection:
    box: BBox
    state_prob: float  # probability the eye is closed
    keypoints: KeypointSet
    feature: np.ndarray
    cell: tuple[int, int]

    @property
    def state(self) -> str:
        return self.box.state


@dataclass
class DetectionOutput:
    detections: list[Detection]
    feature_map: np.ndarray | None = None

    @property
    def boxes(self) -> list[BBox]:
        return [d.box for d in self.detections]

    def __len__(self):
        return len(self.detections)


class EyeDetector(Model):
    def __init__(self, config: DetectorConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        c1, c2, c3, c4 = config.backbone_channels
        self.backbone = Sequential(
            *conv_bn_relu(1, c1, 3, 2, rng=rng),
            *conv_bn_relu(c1, c2, 3, 2, rng=rng),
            *conv_bn_relu(c2, c3, 3, 2, rng=rng),
            *conv_bn_relu(c3, c3, 3, 1, rng=rng),
            *conv_bn_relu(c3, c4, 3, 1, rng=rng),
        )
        head = Conv2d(c4, 6, 3, rng=rng)
        head.params["weight"] *= 0.1
        head.params["bias"][0] = config.objectness_bias
        self.head = Sequential(head)
        self.roi = RoIAlign(config.roi_out, 1.0 / config.roi_scale, config.roi_sampling)
        d, m = config.mlr_depth, config.mlr_channels
        if config.uses_mask_head:
            self.mask_branch = _branch(c4, m, d, len(KP_ORDER), rng)
            self.offset_branch = _branch(c4, m, d, 2, rng)
            self.offset_branch.layers[-1].params["weight"] *= 0.1
        else:
            self.regress_branch = _branch(c4, m, d, 2 * len(KP_ORDER), rng)
            self.regress_branch.layers[-1].params["weight"] *= 0.1

    def components(self):
        comps = {"backbone": self.backbone, "head": self.head}
        if self.config.uses_mask_head:
            comps["mask_branch"] = self.mask_branch
            comps["offset_branch"] = self.offset_branch
        else:
            comps["regress_branch"] = self.regress_branch
        return comps

    # --- forward pieces ---------------------------------------------------

    @staticmethod
    def prepare(images) -> np.ndarray:
        x = np.asarray(images, dtype=float)
        if x.ndim == 2:
            x = x[None]
        if x.ndim == 3:
            x = x[..., None]
        return x - 0.5

    def features(self, images, train=False) -> np.ndarray:
        x = self.prepare(images)
        n = self.config.image_size
        if x.shape[1:3] != (n, n):
            raise ShapeMismatch(f"expected {n}x{n} images, got {x.shape[1:3]}")
        return self.backbone.forward(x, train)

    # --- inference --------------------------------------------------------

    def infer(self, image) -> DetectionOutput:
        return self.infer_batch(np.asarray(image)[None])[0]

    def infer_batch(self, images, keep_features: bool = False) -> list[DetectionOutput]:
        cfg = self.config
        feat = self.features(images, train=False)
        raw = self.head.forward(feat, train=False)
        reg = self.regress_branch.forward(feat, train=False) if not cfg.uses_mask_head else None
        outs = []
        for i in range(len(feat)):
            outs.append(self._decode_image(feat[i], raw[i], None if reg is None else reg[i], keep_features))
        return outs

    def _decode_image(self, feat, raw, reg, keep_features) -> DetectionOutput:
        cfg = self.config
        g = cfg.grid
        boxes_map = decode_grid(raw, g, cfg.prior)
        cand = []
        for iy, ix in zip(*np.nonzero(raw[..., 0] > 0)):
            cx, cy, w, h = boxes_map[iy, ix]
            p_closed = _sigmoid(raw[iy, ix, 5])
            box = BBox(cx, cy, w, h, score=float(_sigmoid(raw[iy, ix, 0])),
                       state="closed" if p_closed > 0.5 else "open")
            cand.append((box, float(p_closed), (int(ix), int(iy))))
        keep = nms_indices([c[0] for c in cand], cfg.nms_threshold)
        kept = [cand[k] for k in keep]
        dets = []
        if kept and cfg.uses_mask_head:
            corners = np.array([c[0].corners for c in kept])
            rois = self.roi.forward(feat[None], corners, np.zeros(len(kept), int))
            masks = self.mask_branch.forward(rois, train=False)
            offs = self.offset_branch.forward(rois, train=False) if cfg.head_variant == "mlr_full" else None
        for k, (box, p_closed, cell) in enumerate(kept):
            if cfg.uses_mask_head:
                pts = self._mask_keypoints(box, masks[k], None if offs is None else offs[k])
            else:
                pts = [(box.cx + reg[cell[1], cell[0], 2 * j] * box.w,
                        box.cy + reg[cell[1], cell[0], 2 * j + 1] * box.h) for j in range(3)]
            kp = KeypointSet(pts[0], pts[1], pts[2], pupil_visible=box.state == "open")
            fvec = _safe_feature(feat, box, cfg.stride, cell)
            dets.append(Detection(box, p_closed, kp, fvec, cell))
        return DetectionOutput(dets, feat if keep_features else None)

    def _mask_keypoints(self, box: BBox, mask, offsets):
        cfg = self.config
        gw, gh = cfg.heatmap
        pts = []
        for j in range(len(KP_ORDER)):
            iy, ix = np.unravel_index(int(np.argmax(mask[..., j])), mask.shape[:2])
            t = (0.0, 0.0) if offsets is None else (offsets[iy, ix, 0] / gw, offsets[iy, ix, 1] / gh)
            x, y = subpixel.recover((ix, iy), t, (box.w, box.h), (gw, gh))
            pts.append((box.x1 + x, box.y1 + y))
        return pts

    # --- checkpoints ------------------------------------------------------

    def save(self, path, extra: dict | None = None):
        meta = {"format": "eyeload.detector", "config": self.config.to_dict()}
        if extra:
            meta["extra"] = extra
        checkpoint.save(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "EyeDetector":
        header, arrays = checkpoint.load(path)
        if header.get("format") != "eyeload.detector":
            raise IncompatibleCheckpoint(f"{path} is not a detector checkpoint")
        model = cls(DetectorConfig.from_dict(header["config"]))
        try:
            model.load_state_dict(arrays)
        except (KeyError, ValueError) as exc:
            raise IncompatibleCheckpoint(str(exc)) from None
        return model


def _safe_feature(feat, box, stride, cell):
    try:
        return localize_feature(feat, box, stride)
    except Exception:
        return feat[cell[1], cell[0]].copy()


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def _bce(logit, target):
    """Binary cross-entropy on a logit and its gradient."""
    logit = np.asarray(logit, dtype=float)
    loss = np.maximum(logit, 0) - logit * target + np.log1p(np.exp(-np.abs(logit)))
    return loss, _sigmoid(logit) - target


# --- training targets and losses -----------------------------------------


@dataclass
class DetectionTarget:
    cell: tuple[int, int]
    box_t: np.ndarray  # tx, ty, tw, th
    closed: float
    corners: tuple[float, float, float, float]
    keypoints: np.ndarray  # (3, 2) image pixels
    present: np.ndarray  # (3,) bool
    ignore: np.ndarray  # (rows, cols) bool, cells inside gradient-mask regions
    roi: tuple[float, float, float, float] | None = None  # mask-branch RoI; the annotated box if None

    @property
    def roi_corners(self) -> tuple[float, float, float, float]:
        return self.corners if self.roi is None else self.roi


def cells_in_regions(grid: GridSpec, regions) -> np.ndarray:
    centers = grid.cell_centers()
    out = np.zeros((grid.rows, grid.cols), dtype=bool)
    for x1, y1, x2, y2 in regions:
        out |= (centers[..., 0] >= x1) & (centers[..., 0] < x2) & (centers[..., 1] >= y1) & (centers[..., 1] < y2)
    return out


def make_target(record: AnnotationRecord, cfg: DetectorConfig, regions=()) -> DetectionTarget:
    g = cfg.grid
    enc = encode_target(record.box, g, cfg.prior)
    kps, present = np.zeros((3, 2)), np.zeros(3, dtype=bool)
    for j, name in enumerate(KP_ORDER):
        p = record.keypoint(name)
        if p is not None:
            kps[j] = p
            present[j] = True
    return DetectionTarget(
        cell=(enc.cell_ix, enc.cell_iy),
        box_t=np.array([enc.tx, enc.ty, enc.tw, enc.th]),
        closed=1.0 if record.state == "closed" else 0.0,
        corners=record.bounding_box,
        keypoints=kps,
        present=present,
        ignore=cells_in_regions(g, regions),
    )


def detection_loss(raw: np.ndarray, targets: list[DetectionTarget], cfg: DetectorConfig):
    """Objectness, box and state losses for a batch of (rows, cols, 6) maps.

    Objectness is binary cross-entropy summed over every cell not covered by
    a gradient-mask region, except the negatives within ``neighbor_ignore``
    cells of the positive, which look almost like it and are left to NMS;
    box (squared error on ``t``) and state (binary
    cross-entropy) use the positive cell only.  All terms are averaged over
    the batch.  Returns ``(total, breakdown, grad)``.
    """
    if raw.ndim != 4 or raw.shape[0] != len(targets) or raw.shape[-1] != 6:
        raise ShapeMismatch(f"raw map {raw.shape} does not fit {len(targets)} targets")
    n = len(targets)
    grad = np.zeros_like(raw)
    obj = box = state = 0.0
    for i, t in enumerate(targets):
        y = np.zeros(raw.shape[1:3])
        y[t.cell[1], t.cell[0]] = 1.0
        keep = ~t.ignore
        r = cfg.neighbor_ignore
        if r:
            ix, iy = t.cell
            keep[max(iy - r, 0) : iy + r + 1, max(ix - r, 0) : ix + r + 1] = False
            keep[iy, ix] = not t.ignore[iy, ix]
        lo, go = _bce(raw[i, ..., 0], y)
        obj += float((lo * keep).sum())
        grad[i, ..., 0] = go * keep * cfg.weight("objectness")
        ix, iy = t.cell
        d = raw[i, iy, ix, 1:5] - t.box_t
        box += float((d * d).sum())
        grad[i, iy, ix, 1:5] += 2 * d * cfg.weight("box")
        ls, gs = _bce(raw[i, iy, ix, 5], t.closed)
        state += float(ls)
        grad[i, iy, ix, 5] += float(gs) * cfg.weight("state")
    breakdown = {"objectness": obj / n, "box": box / n, "state": state / n}
    total = sum(cfg.weight(k) * v for k, v in breakdown.items())
    return total, breakdown, grad / n


def keypoint_head_loss(masks, offsets, targets: list[DetectionTarget], cfg: DetectorConfig, with_offsets: bool):
    """Softmax mask loss per keypoint plus the masked offset loss.

    Offsets are predicted in heatmap-cell units; the target ``t * (w', h')``
    is compared only at the cell each keypoint quantizes to.  Targets are
    relative to each target's RoI; keypoints outside it are skipped.
    """
    gw, gh = cfg.heatmap
    n = len(targets)
    gm = np.zeros_like(masks)
    go = np.zeros_like(offsets) if with_offsets else None
    mask_loss = off_loss = 0.0
    for i, t in enumerate(targets):
        x1, y1, x2, y2 = t.roi_corners
        crop = (x2 - x1, y2 - y1)
        field_t = np.zeros((gh, gw, 2))
        field_m = np.zeros((gh, gw))
        for j in range(len(KP_ORDER)):
            if not t.present[j]:
                continue
            u, v = t.keypoints[j, 0] - x1, t.keypoints[j, 1] - y1
            if not (0.0 <= u <= crop[0] and 0.0 <= v <= crop[1]):
                continue
            c = (min(u, np.nextafter(crop[0], 0)), min(v, np.nextafter(crop[1], 0)))
            q = subpixel.quantize(c, crop, (gw, gh))
            loss, g = subpixel.mask_softmax_loss(masks[i, ..., j], q)
            mask_loss += loss
            gm[i, ..., j] = g
            off = subpixel.offset_target(c, crop, (gw, gh))
            field_t[q[1], q[0]] = (off[0] * gw, off[1] * gh)
            field_m[q[1], q[0]] = 1
        if with_offsets:
            off_loss += subpixel.masked_offset_loss(offsets[i], field_t, field_m, cfg.offset_cost)
            go[i] = subpixel.masked_offset_loss_grad(offsets[i], field_t, field_m, cfg.offset_cost)
    breakdown = {"mask": mask_loss / n}
    gm *= cfg.weight("mask") / n
    if with_offsets:
        breakdown["offset"] = off_loss / n
        go *= cfg.weight("offset") / n
    return breakdown, gm, go


def regress_loss(reg, targets: list[DetectionTarget], cfg: DetectorConfig):
    """L1 on keypoints relative to the ground-truth box, at the positive cell."""
    n = len(targets)
    grad = np.zeros_like(reg)
    total = 0.0
    for i, t in enumerate(targets):
        ix, iy = t.cell
        x1, y1, x2, y2 = t.corners
        cx, cy, w, h = (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1
        for j in range(len(KP_ORDER)):
            if not t.present[j]:
                continue
            tgt = np.array([(t.keypoints[j, 0] - cx) / w, (t.keypoints[j, 1] - cy) / h])
            d = reg[i, iy, ix, 2 * j : 2 * j + 2] - tgt
            total += float(np.abs(d).sum())
            grad[i, iy, ix, 2 * j : 2 * j + 2] = np.sign(d)
    return {"regress": total / n}, grad * cfg.weight("regress") / n


def train_step(model: EyeDetector, images, targets: list[DetectionTarget]) -> dict[str, float]:
    """Forward + backward on one batch; gradients land in the model's layers."""
    cfg = model.config
    model.zero_grad()
    feat = model.features(images, train=True)
    raw = model.head.forward(feat, train=True)
    total, breakdown, graw = detection_loss(raw, targets, cfg)
    dfeat = model.head.backward(graw)
    if cfg.uses_mask_head:
        corners = np.array([t.roi_corners for t in targets])
        rois = model.roi.forward(feat, corners)
        masks = model.mask_branch.forward(rois, train=True)
        offs = model.offset_branch.forward(rois, train=True)
        kb, gm, go = keypoint_head_loss(masks, offs, targets, cfg, cfg.trains_offsets)
        droi = model.mask_branch.backward(gm)
        if cfg.trains_offsets:
            droi = droi + model.offset_branch.backward(go)
        dfeat = dfeat + model.roi.backward(droi)
    else:
        reg = model.regress_branch.forward(feat, train=True)
        kb, greg = regress_loss(reg, targets, cfg)
        dfeat = dfeat + model.regress_branch.backward(greg)
    model.backbone.backward(dfeat)
    breakdown.update(kb)
    breakdown["total"] = float(sum(cfg.weight(k) * v for k, v in breakdown.items() if k != "total"))
    return breakdown


@dataclass
class TrainSchedule:
    iterations: int = 300
    batch_size: int = 16
    lr: float = 2e-3
    optimizer: str = "adam"
    decay_at: tuple[float, ...] = (0.7, 0.9)
    decay: float = 0.3
    flip_prob: float = 0.5
    roi_jitter: float = 0.1  # sd of the mask-branch RoI shift (box fractions) and log-scale
    seed: int = 0

    def lr_at(self, it: int) -> float:
        lr = self.lr
        for frac in self.decay_at:
            if it >= frac * self.iterations:
                lr *= self.decay
        return lr


def train(dataset, config: DetectorConfig, schedule: TrainSchedule = TrainSchedule(),
          callback=None, model: EyeDetector | None = None):
    """Train a detector on ``(image, AnnotationRecord)`` pairs.

    Each draw is horizontally flipped with probability ``flip_prob`` and
    carries the gradient-mask region inferred from its annotation.  The
    mask branch sees the annotated box perturbed by ``roi_jitter``, as a
    stand-in for predicted boxes at inference.  Returns
    ``(model, log)`` where ``log`` holds one dict per iteration.
    """
    samples = [(np.asarray(img, dtype=float), rec) for img, rec in dataset]
    if not samples:
        raise ConfigInvalid("training set is empty")
    if schedule.iterations < 1 or schedule.batch_size < 1:
        raise ConfigInvalid("iterations and batch_size must be positive")
    model = model or EyeDetector(config)
    cfg = model.config
    params = model.parameters()
    opt = make_optimizer(schedule.optimizer, params, schedule.lr)
    rng = np.random.default_rng(schedule.seed)
    size = cfg.image_size
    order = rng.permutation(len(samples))
    pos = 0
    log = []
    start = time.perf_counter()
    for it in range(schedule.iterations):
        imgs, tgts = [], []
        for _ in range(schedule.batch_size):
            if pos == len(order):
                order, pos = rng.permutation(len(samples)), 0
            img, rec = samples[order[pos]]
            pos += 1
            if rng.random() < schedule.flip_prob:
                s = flip_with_gradient_mask(img, rec)[0]
                img, rec, regions = s.image, s.record, s.mask_regions
            else:
                regions = gradient_mask_regions(rec, (size, size))
            imgs.append(img)
            t = make_target(rec, cfg, regions)
            if schedule.roi_jitter > 0:
                t = replace(t, roi=jitter_box(t.corners, schedule.roi_jitter, rng))
            tgts.append(t)
        terms = train_step(model, np.stack(imgs), tgts)
        opt.lr = schedule.lr_at(it)
        opt.step(model.gradients())
        entry = {"iteration": it + 1, **terms, "lr": opt.lr, "wall_time": time.perf_counter() - start}
        log.append(entry)
        if callback is not None:
            callback(entry)
    return model, log


def jitter_box(corners, sd: float, rng: np.random.Generator):
    x1, y1, x2, y2 = corners
    w, h = x2 - x1, y2 - y1
    dx, dy, sw, sh = rng.normal(0.0, sd, 4)
    cx, cy = (x1 + x2) / 2 + dx * w, (y1 + y2) / 2 + dy * h
    w, h = w * np.exp(sw), h * np.exp(sh)
    return (float(cx - w / 2), float(cy - h / 2), float(cx + w / 2), float(cy + h / 2))


def with_variant(cfg: DetectorConfig, variant: str) -> DetectorConfig:
    return replace(cfg, head_variant=variant, loss_weights=dict(cfg.loss_weights))


def inference_variant(model: EyeDetector, variant: str) -> EyeDetector:
    """View of a trained mask-head model decoded as another mask-based variant.

    ``mlr_mask_prediction`` and ``mlr_full`` share weights; only decoding differs.
    """
    if not model.config.uses_mask_head or variant == "direct_regressor":
        raise ConfigInvalid("only mask-head models can be re-decoded")
    other = object.__new__(EyeDetector)
    other.__dict__.update(model.__dict__)
    other.config = replace(model.config, head_variant=variant)
    return other
