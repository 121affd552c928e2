"""1-D convolutional load classifier over per-frame eye features.

Each clip becomes a fixed-length sequence: the longest IoU track's
localized feature vectors (or the scalar horizontal pupil position for the
ablation), linearly resampled to ``sequence_len`` frames.  The network is
``len(block_channels)`` blocks of three Conv-BN-ReLU layers, the last of
each block striding by 2, followed by global average pooling and a single
logit.

Fine-tuning re-extracts features from 64x64 crops aligned to the stride-8
grid so the backbone runs on a quarter of each frame.  The crop places the
eye center in local cell (3, 3); with the default backbone the feature at
that cell equals the full-frame feature exactly for crops away from the
image border.
"""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigInvalid, IncompatibleCheckpoint, SequenceTooShort
from .geometry import BBox
from .neuralcore import Adam, GlobalAvgPool, Linear, Model, Sequential, conv_bn_relu
from .neuralcore import checkpoint
from .tracking import TrackerConfig, longest_track, track_sequence

INPUT_KINDS = ("localized", "pupil_x")
CROP_CELLS = 8
CROP_CENTER_CELL = 3


@dataclass
class TemporalConfig:
    block_channels: tuple[int, ...] = (32, 64, 128, 256)
    input_dim: int = 128
    sequence_len: int = 64
    fine_tune_backbone: bool = False
    input_kind: str = "localized"
    iterations: int = 150
    batch_size: int = 8
    lr: float = 1e-3
    backbone_lr: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        self.block_channels = tuple(int(c) for c in self.block_channels)
        self.validate()

    @property
    def min_length(self) -> int:
        return 2 ** len(self.block_channels)

    def validate(self):
        if not self.block_channels or min(self.block_channels) < 1:
            raise ConfigInvalid("block_channels must be a non-empty list of positive widths")
        if self.sequence_len < self.min_length:
            raise ConfigInvalid(f"sequence_len {self.sequence_len} < 2^{len(self.block_channels)}")
        if self.input_kind not in INPUT_KINDS:
            raise ConfigInvalid(f"input_kind must be one of {INPUT_KINDS}")
        if self.input_kind == "pupil_x" and (self.input_dim != 1 or self.fine_tune_backbone):
            raise ConfigInvalid("the pupil_x input is one scalar per frame and has no backbone to tune")
        if self.iterations < 1 or self.batch_size < 2:
            raise ConfigInvalid("iterations must be positive and batch_size at least 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_channels"] = list(self.block_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TemporalConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigInvalid(f"unknown temporal config keys {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from None


class TemporalNet(Model):
    def __init__(self, config: TemporalConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        layers = []
        c = config.input_dim
        for width in config.block_channels:
            for k in range(3):
                layers += conv_bn_relu(c, width, 3, 2 if k == 2 else 1, rng=rng, dims=1)
                c = width
        self.blocks = Sequential(*layers)
        self.classifier = Sequential(GlobalAvgPool(), Linear(c, 1, rng=rng, zero_init=True))

    def components(self):
        return {"blocks": self.blocks, "classifier": self.classifier}

    def encode(self, x, train=False) -> np.ndarray:
        """Feature sequence before pooling, length ceil(T / 2^blocks)."""
        return self.blocks.forward(np.asarray(x, dtype=float), train)

    def forward(self, x, train=False) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 3:
            raise ConfigInvalid(f"expected (N, T, C) input, got {x.shape}")
        if x.shape[1] < self.config.min_length:
            raise SequenceTooShort(f"{x.shape[1]} frames < minimum {self.config.min_length}")
        return self.classifier.forward(self.blocks.forward(x, train), train)[:, 0]

    def backward(self, dlogit: np.ndarray) -> np.ndarray:
        return self.blocks.backward(self.classifier.backward(dlogit[:, None]))

    def classify(self, track_features) -> float:
        """Probability of high load for one variable-length feature sequence."""
        f = np.asarray(track_features, dtype=float)
        if f.ndim == 1:
            f = f[:, None]
        if len(f) < self.config.min_length:
            raise SequenceTooShort(f"{len(f)} frames < minimum {self.config.min_length}")
        x = resample_matrix(len(f), self.config.sequence_len) @ f
        return float(_sigmoid(self.forward(x[None], train=False))[0])


class BackboneModel(Model):
    """Wraps a detector backbone so it can be hashed and checkpointed alone."""

    def __init__(self, backbone: Sequential):
        self.backbone = backbone

    def components(self):
        return {"backbone": self.backbone}


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) linear-interpolation weights spanning the first to last frame."""
    if n_in < 1:
        raise SequenceTooShort("cannot resample an empty sequence")
    if n_in == 1:
        return np.ones((n_out, 1))
    pos = np.linspace(0.0, n_in - 1, n_out)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    w = np.zeros((n_out, n_in))
    w[np.arange(n_out), lo] = 1.0 - frac
    w[np.arange(n_out), lo + 1] += frac
    return w


def crop_origin(box: BBox, stride: int = 8) -> tuple[int, int]:
    kx, ky = int(math.floor(box.cx / stride)), int(math.floor(box.cy / stride))
    return (kx - CROP_CENTER_CELL) * stride, (ky - CROP_CENTER_CELL) * stride


def eye_crop(frame: np.ndarray, box: BBox, stride: int = 8) -> np.ndarray:
    """Stride-aligned square crop holding the box center in local cell (3, 3).

    Pixels outside the frame read 0.5, which the detector's input centering
    maps to the zero padding the full-frame convolution sees.
    """
    size = CROP_CELLS * stride
    x0, y0 = crop_origin(box, stride)
    h, w = frame.shape
    out = np.full((size, size), 0.5, dtype=np.float32)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + size, w), min(y0 + size, h)
    if sx1 > sx0 and sy1 > sy0:
        out[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = frame[sy0:sy1, sx0:sx1]
    return out


def crop_features(backbone: Sequential, crops: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Center-cell features of (N, 64, 64) crops with frozen BN statistics."""
    out = []
    for i in range(0, len(crops), chunk):
        x = np.asarray(crops[i : i + chunk], dtype=float)[..., None] - 0.5
        out.append(backbone.forward(x, train=False)[:, CROP_CENTER_CELL, CROP_CENTER_CELL])
    return np.concatenate(out) if out else np.zeros((0, 0))


@dataclass
class TrackClip:
    clip_id: str
    label: int
    frames: list[int]
    boxes: list[BBox]
    features: np.ndarray  # (n, C) localized features from the detector
    pupil_x: np.ndarray  # (n,) pupil x relative to box center, in box widths
    crops: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.frames)


def pupil_series(detections) -> np.ndarray:
    """Horizontal pupil position per detection, forward-filled over closed frames."""
    vals, last = [], None
    for d in detections:
        if d.keypoints.pupil is not None and d.keypoints.pupil_visible:
            last = (d.keypoints.pupil[0] - d.box.cx) / d.box.w
        vals.append(last)
    first = next((v for v in vals if v is not None), 0.0)
    return np.array([first if v is None else v for v in vals], dtype=float)


def build_track_clip(detector, frames: np.ndarray, clip_id: str, label: int,
                     tracker: TrackerConfig = TrackerConfig(), with_crops: bool = True,
                     batch: int = 16) -> TrackClip:
    """Detect on every frame, track, and keep the longest track."""
    outs = []
    for i in range(0, len(frames), batch):
        outs.extend(detector.infer_batch(frames[i : i + batch]))
    tracks = track_sequence([o.boxes for o in outs], tracker,
                            per_frame_payloads=[o.detections for o in outs])
    best = longest_track(tracks)
    if best is None:
        raise SequenceTooShort(f"{clip_id}: no detections in any frame")
    dets = [e.payload for e in best.entries]
    stride = detector.config.stride
    crops = None
    if with_crops:
        crops = np.stack([eye_crop(frames[e.frame], e.box, stride) for e in best.entries])
    return TrackClip(
        clip_id=clip_id,
        label=int(label),
        frames=best.frames,
        boxes=[e.box for e in best.entries],
        features=np.stack([d.feature for d in dets]),
        pupil_x=pupil_series(dets),
        crops=crops,
    )


def clip_inputs(clips: list[TrackClip], cfg: TemporalConfig, backbone: Sequential | None = None) -> np.ndarray:
    """(N, sequence_len, input_dim) resampled inputs for the configured input kind."""
    seqs = []
    for c in clips:
        if len(c) < cfg.min_length:
            raise SequenceTooShort(f"{c.clip_id}: track of {len(c)} frames < {cfg.min_length}")
        if cfg.input_kind == "pupil_x":
            f = c.pupil_x[:, None]
        elif backbone is not None and c.crops is not None:
            f = crop_features(backbone, c.crops)
        else:
            f = c.features
        if f.shape[1] != cfg.input_dim:
            raise ConfigInvalid(f"input_dim {cfg.input_dim} != feature width {f.shape[1]}")
        seqs.append(resample_matrix(len(f), cfg.sequence_len) @ f)
    return np.stack(seqs)


@dataclass
class TemporalResult:
    model: TemporalNet
    backbone: Sequential | None
    log: list[dict]

    @property
    def config(self) -> TemporalConfig:
        return self.model.config

    def predict(self, clips: list[TrackClip]) -> np.ndarray:
        x = clip_inputs(clips, self.config, self.backbone)
        return _sigmoid(self.model.forward(x, train=False))

    def save(self, path):
        arrays = {f"temporal.{k}": v for k, v in self.model.state_dict().items()}
        if self.backbone is not None:
            arrays.update({f"features.{k}": v for k, v in BackboneModel(self.backbone).state_dict().items()})
        checkpoint.save(path, arrays, {"format": "eyeload.temporal", "config": self.config.to_dict(),
                                       "has_backbone": self.backbone is not None})

    @classmethod
    def load(cls, path, backbone_template: Sequential | None = None) -> "TemporalResult":
        header, arrays = checkpoint.load(path)
        if header.get("format") != "eyeload.temporal":
            raise IncompatibleCheckpoint(f"{path} is not a temporal checkpoint")
        model = TemporalNet(TemporalConfig.from_dict(header["config"]))
        model.load_state_dict({k[9:]: v for k, v in arrays.items() if k.startswith("temporal.")})
        backbone = None
        if header.get("has_backbone"):
            if backbone_template is None:
                raise IncompatibleCheckpoint("checkpoint carries a backbone; pass a template to load it")
            backbone = copy.deepcopy(backbone_template)
            BackboneModel(backbone).load_state_dict({k[9:]: v for k, v in arrays.items() if k.startswith("features.")})
        return cls(model, backbone, [])


def _balanced_batch(rng, labels: np.ndarray, size: int) -> np.ndarray:
    pos, neg = np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise ConfigInvalid("training needs clips of both load classes")
    half = size // 2
    return np.concatenate([rng.choice(pos, half), rng.choice(neg, size - half)])


def train_temporal(clips: list[TrackClip], config: TemporalConfig, backbone: Sequential | None = None,
                   callback=None) -> TemporalResult:
    """Train the classifier on labelled track clips.

    With ``fine_tune_backbone`` a private copy of ``backbone`` is updated
    through the crop features; the caller's backbone is never mutated.
    """
    if not clips:
        raise ConfigInvalid("no training clips")
    cfg = config
    if cfg.fine_tune_backbone and (backbone is None or any(c.crops is None for c in clips)):
        raise ConfigInvalid("fine-tuning needs a backbone and per-frame crops")
    rng = np.random.default_rng(cfg.seed)
    net = TemporalNet(cfg)
    labels = np.array([c.label for c in clips])
    opt = Adam(net.parameters(), lr=cfg.lr)
    tuned, bopt, static = None, None, None
    if cfg.fine_tune_backbone:
        tuned = copy.deepcopy(backbone)
        bmodel = BackboneModel(tuned)
        bopt = Adam(bmodel.parameters(), lr=cfg.backbone_lr)
        mats = [resample_matrix(len(c), cfg.sequence_len) for c in clips]
    else:
        static = clip_inputs(clips, cfg, backbone if cfg.input_kind == "localized" else None)
    log = []
    start = time.perf_counter()
    for it in range(cfg.iterations):
        idx = _balanced_batch(rng, labels, cfg.batch_size)
        y = labels[idx].astype(float)
        net.zero_grad()
        if tuned is not None:
            bmodel.zero_grad()
            crops = np.concatenate([clips[i].crops for i in idx]).astype(float)[..., None] - 0.5
            fmap = tuned.forward(crops, train=False)
            feats = fmap[:, CROP_CENTER_CELL, CROP_CENTER_CELL]
            splits = np.cumsum([len(clips[i]) for i in idx])[:-1]
            parts = np.split(feats, splits)
            x = np.stack([mats[i] @ p for i, p in zip(idx, parts)])
        else:
            x = static[idx]
        logit = net.forward(x, train=True)
        p = _sigmoid(logit)
        loss = float(np.mean(np.maximum(logit, 0) - logit * y + np.log1p(np.exp(-np.abs(logit)))))
        dx = net.backward((p - y) / len(idx))
        opt.step(net.gradients())
        if tuned is not None:
            dfeat = np.concatenate([mats[i].T @ d for i, d in zip(idx, dx)])
            dmap = np.zeros_like(fmap)
            dmap[:, CROP_CENTER_CELL, CROP_CENTER_CELL] = dfeat
            tuned.backward(dmap)
            bopt.step(bmodel.gradients())
        entry = {"iteration": it + 1, "loss": loss, "accuracy": float(np.mean((p > 0.5) == (y > 0.5))),
                 "wall_time": time.perf_counter() - start}
        log.append(entry)
        if callback is not None:
            callback(entry)
    return TemporalResult(net, tuned if tuned is not None else (backbone if cfg.input_kind == "localized" else None), log)


def accuracy(probs: np.ndarray, labels) -> float:
    return float(np.mean((np.asarray(probs) > 0.5) == (np.asarray(labels) == 1)))


def write_predictions(path, clips: list[TrackClip], probs) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for c, p in zip(clips, probs):
            fh.write(json.dumps({"clip_id": c.clip_id, "probability": float(p), "label": int(c.label)},
                                sort_keys=True) + "\n")
