"""Parametric grayscale eye renderer with exact landmark ground truth.

An eye is drawn in a local frame where the lateral canthus sits at
``(-w/2, 0)`` and the medial canthus at ``(+w/2, 0)``; the upper and lower
lids are parabolas through both canthi whose heights scale with the
openness.  The local frame is mapped to the image by a similarity transform
(``rotation``, ``scale``, ``center``), so landmark annotations are the exact
images of the local landmark positions and never come from re-detection.

Load sequences move the pupil with a discrete Ornstein-Uhlenbeck walk whose
stationary standard deviation is the clip's dispersion ``sigma``; high load
narrows it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .datakit import AnnotationRecord
from .errors import GeometryOutOfBounds

GENERATOR_VERSION = "1"
CLOSED_BELOW = 0.2
AMBIGUOUS = (0.2, 0.4)
LOWER_LID = 0.6  # lower lid height relative to the upper lid
PUPIL_X_LIMIT = 0.32  # |pupil x| limit, in eye widths


@dataclass(frozen=True)
class EyeSceneParams:
    center: tuple[float, float] = (64.0, 64.0)
    eye_w: float = 48.0
    eye_h: float = 22.0
    pupil: tuple[float, float] = (0.0, 0.0)  # local offset in eye widths
    openness: float = 1.0
    iris_radius: float = 0.2  # in eye widths
    pupil_radius: float = 0.08
    skin: float = 0.6
    sclera: float = 0.9
    iris: float = 0.35
    pupil_level: float = 0.06
    background_seed: int = 0
    rotation: float = 0.0  # degrees
    scale: float = 1.0
    noise: float = 0.02
    noise_seed: int = 0
    image_size: int = 128
    box_margin: tuple[float, float] = (0.12, 0.35)  # fraction of eye w / eye h added per side
    partner_eye: bool = False

    @property
    def state(self) -> str:
        return "closed" if self.openness < CLOSED_BELOW else "open"


def _rot(deg):
    t = math.radians(deg)
    return np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])


def to_image(p: EyeSceneParams, local) -> np.ndarray:
    """Map local eye coordinates (..., 2) to image pixels."""
    local = np.asarray(local, dtype=float)
    return local @ (p.scale * _rot(p.rotation)).T + np.asarray(p.center)


def to_local(p: EyeSceneParams, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=float) - np.asarray(p.center)
    return pts @ _rot(-p.rotation).T / p.scale


def local_landmarks(p: EyeSceneParams) -> dict[str, np.ndarray]:
    return {
        "lateral_canthus": np.array([-p.eye_w / 2, 0.0]),
        "medial_canthus": np.array([p.eye_w / 2, 0.0]),
        "pupil": np.array([p.pupil[0] * p.eye_w, p.pupil[1] * p.eye_w]),
    }


def eye_box(p: EyeSceneParams) -> tuple[float, float, float, float]:
    """Axis-aligned box of the fully open eye outline plus margins."""
    u = np.linspace(-p.eye_w / 2, p.eye_w / 2, 401)
    s = 1.0 - (2 * u / p.eye_w) ** 2
    top = np.stack([u, -p.eye_h / 2 * s], axis=1)
    bot = np.stack([u, LOWER_LID * p.eye_h / 2 * s], axis=1)
    pts = to_image(p, np.concatenate([top, bot]))
    mx = p.box_margin[0] * p.eye_w * p.scale
    my = p.box_margin[1] * p.eye_h * p.scale
    x1, y1 = pts.min(axis=0)
    x2, y2 = pts.max(axis=0)
    return (float(x1 - mx), float(y1 - my), float(x2 + mx), float(y2 + my))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _background(p: EyeSceneParams) -> np.ndarray:
    rng = np.random.default_rng(p.background_seed)
    n = p.image_size
    tex = gaussian_filter(rng.standard_normal((n, n)), sigma=6.0, mode="wrap")
    tex = tex / (tex.std() + 1e-12)
    gx = np.linspace(-1, 1, n)
    shade = rng.uniform(-0.08, 0.08) * gx[None, :] + rng.uniform(-0.08, 0.08) * gx[:, None]
    return p.skin + 0.05 * tex + shade


def _draw_eye(img, p: EyeSceneParams, mirrored: bool = False):
    n = p.image_size
    ys, xs = np.mgrid[0:n, 0:n] + 0.5
    loc = to_local(p, np.stack([xs, ys], axis=-1))
    u, v = loc[..., 0], loc[..., 1]
    if mirrored:
        u = -u
    px = 1.0 / p.scale  # one image pixel in local units
    s = 1.0 - (2 * u / p.eye_w) ** 2
    o = p.openness
    top = -o * p.eye_h / 2 * s
    bot = LOWER_LID * o * p.eye_h / 2 * s
    # socket shading gives the detector context beyond the opening
    socket = np.exp(-((u / (0.75 * p.eye_w)) ** 2 + (v / (1.1 * p.eye_h)) ** 2))
    img -= 0.12 * socket
    # the socket darkens toward the nose, so direction is visible across the whole eye
    img -= 0.08 * socket * np.clip(u / p.eye_w + 0.5, 0.0, 1.5)
    inside = _sigmoid(np.minimum(v - top, bot - v) / px * 2.0) * (s > 0)
    pup = local_landmarks(p)["pupil"]
    r = np.hypot(u - pup[0], v - pup[1])
    iris = _sigmoid((p.iris_radius * p.eye_w - r) / px * 2.0)
    pupil = _sigmoid((p.pupil_radius * p.eye_w - r) / px * 2.0)
    eye = p.sclera + (p.iris - p.sclera) * iris + (p.pupil_level - p.iris) * pupil
    img[...] = img * (1 - inside) + eye * inside
    # lash line along the upper lid, heavier toward the lateral corner, and the lid crease
    lid = np.exp(-0.5 * ((v - top) / (1.2 * px)) ** 2) * _sigmoid((p.eye_w / 2 - np.abs(u)) / px)
    img -= 0.3 * lid * (1.0 + 0.6 * np.clip(-2 * u / p.eye_w, 0.0, 1.0))
    crease_y = -(o * 0.5 + 0.6) * p.eye_h / 2 * s
    crease = np.exp(-0.5 * ((v - crease_y) / (1.5 * px)) ** 2) * (s > 0)
    img -= 0.06 * crease
    # medial-side cues: caruncle in the inner corner and a nose-bridge shadow,
    # so lateral and medial stay distinguishable after a horizontal flip
    car = np.exp(-0.5 * (((u - 0.41 * p.eye_w) / (0.08 * p.eye_w)) ** 2 + (v / (0.12 * p.eye_h + px)) ** 2))
    img += 0.25 * car
    # the shadow ends at the nose midline, halfway to a partner eye
    ramp = _sigmoid((u - 0.65 * p.eye_w) / (0.08 * p.eye_w)) * _sigmoid((1.1 * p.eye_w - u) / (0.08 * p.eye_w))
    bridge = ramp * np.exp(-0.5 * (v / (1.2 * p.eye_h)) ** 2)
    img -= 0.15 * bridge


def render_frame(p: EyeSceneParams, image_id: str = "img") -> tuple[np.ndarray, AnnotationRecord]:
    """Render one grayscale frame in [0, 1] and its exact annotation."""
    if not 0.0 <= p.openness <= 1.0:
        raise GeometryOutOfBounds(f"openness {p.openness} outside [0, 1]")
    if abs(p.rotation) > 45.0:
        raise GeometryOutOfBounds(f"rotation {p.rotation} exceeds 45 degrees")
    box = eye_box(p)
    n = p.image_size
    if box[0] < 0 or box[1] < 0 or box[2] > n or box[3] > n:
        raise GeometryOutOfBounds(f"eye box {box} leaves the {n}x{n} image")
    img = _background(p)
    _draw_eye(img, p)
    if p.partner_eye:
        partner = partner_params(p)
        if partner is not None:
            _draw_eye(img, partner, mirrored=True)
    if p.noise > 0:
        img = img + np.random.default_rng(p.noise_seed).normal(0.0, p.noise, img.shape)
    img = np.clip(img, 0.0, 1.0)
    pts = {k: to_image(p, v) for k, v in local_landmarks(p).items()}
    state = p.state
    record = AnnotationRecord(
        image_id=image_id,
        state=state,
        bounding_box=box,
        lateral_canthus=tuple(float(v) for v in pts["lateral_canthus"]),
        medial_canthus=tuple(float(v) for v in pts["medial_canthus"]),
        pupil=tuple(float(v) for v in pts["pupil"]) if state == "open" else None,
    )
    return img, record


def partner_params(p: EyeSceneParams, spacing: float = 2.2):
    """Mirror-image eye placed ``spacing`` eye widths toward the medial side, if it fits."""
    d = to_image(p, [[p.eye_w * spacing, 0.0]])[0] - np.asarray(p.center)
    q = replace(p, center=(p.center[0] + d[0], p.center[1] + d[1]), partner_eye=False)
    x1, y1, x2, y2 = eye_box(q)
    if x2 < 0 or y2 < 0 or x1 > p.image_size or y1 > p.image_size:
        return None
    return q


# --- random scenes --------------------------------------------------------


@dataclass(frozen=True)
class SceneDistribution:
    eye_w: tuple[float, float] = (36.0, 60.0)
    aspect: tuple[float, float] = (0.4, 0.5)
    rotation: tuple[float, float] = (-20.0, 20.0)
    closed_fraction: float = 0.5
    noise: tuple[float, float] = (0.01, 0.04)
    pupil_range: float = 0.25
    partner_eye: bool = False
    image_size: int = 128


def sample_openness(rng: np.random.Generator, closed: bool) -> float:
    if closed:
        return float(rng.uniform(0.0, 0.15))
    return float(rng.uniform(AMBIGUOUS[1] + 0.05, 1.0))


def random_scene(rng: np.random.Generator, dist: SceneDistribution = SceneDistribution(),
                 closed: bool | None = None) -> EyeSceneParams:
    if closed is None:
        closed = bool(rng.random() < dist.closed_fraction)
    eye_w = float(rng.uniform(*dist.eye_w))
    base = EyeSceneParams(
        eye_w=eye_w,
        eye_h=eye_w * float(rng.uniform(*dist.aspect)),
        pupil=(float(rng.uniform(-dist.pupil_range, dist.pupil_range)),
               float(rng.uniform(-0.05, 0.05))),
        openness=sample_openness(rng, closed),
        iris_radius=float(rng.uniform(0.17, 0.22)),
        pupil_radius=float(rng.uniform(0.06, 0.09)),
        skin=float(rng.uniform(0.45, 0.7)),
        sclera=float(rng.uniform(0.8, 0.95)),
        iris=float(rng.uniform(0.2, 0.45)),
        pupil_level=float(rng.uniform(0.02, 0.1)),
        background_seed=int(rng.integers(2**31)),
        rotation=float(rng.uniform(*dist.rotation)),
        noise=float(rng.uniform(*dist.noise)),
        noise_seed=int(rng.integers(2**31)),
        image_size=dist.image_size,
        partner_eye=dist.partner_eye,
    )
    # place the eye so its box lies inside the image with a small border
    x1, y1, x2, y2 = eye_box(base)
    ox, oy = base.center
    n = dist.image_size
    cx = float(rng.uniform(ox - x1 + 2, n - (x2 - ox) - 2))
    cy = float(rng.uniform(oy - y1 + 2, n - (y2 - oy) - 2))
    return replace(base, center=(cx, cy))


@dataclass
class Sample:
    image: np.ndarray
    record: AnnotationRecord
    params: EyeSceneParams


def generate_dataset(count: int, seed: int, dist: SceneDistribution = SceneDistribution(),
                     prefix: str = "synth") -> list[Sample]:
    """Independent single-eye frames; half closed by default."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        p = random_scene(rng, dist)
        img, rec = render_frame(p, f"{prefix}{i:06d}")
        out.append(Sample(img, rec, p))
    return out


# --- load sequences -------------------------------------------------------


SIGMA_LOW_LOAD = 0.12
SIGMA_HIGH_LOAD = 0.05


@dataclass(frozen=True)
class LoadSequenceParams:
    load: str = "low"
    sigma: float | None = None  # defaults from the load label
    reversion: float = 0.25  # fraction of the gap to the mean closed per frame
    frames: int = 64
    blink_prob: float = 0.02
    blink_frames: int = 3
    vertical_ratio: float = 0.5  # vertical dispersion relative to horizontal
    center_drift: float = 0.15  # pixels per frame
    sigma_low: float = SIGMA_LOW_LOAD
    sigma_high: float = SIGMA_HIGH_LOAD

    def __post_init__(self):
        if self.load not in ("low", "high"):
            raise ValueError("load must be 'low' or 'high'")
        if self.sigma_high >= self.sigma_low:
            raise ValueError("high-load dispersion must be below low-load dispersion")

    @property
    def dispersion(self) -> float:
        if self.sigma is not None:
            return self.sigma
        return self.sigma_low if self.load == "low" else self.sigma_high


def ou_walk(rng: np.random.Generator, n: int, sigma: float, reversion: float, mean: float = 0.0) -> np.ndarray:
    """AR(1) walk with stationary standard deviation ``sigma``, started at stationarity."""
    a = 1.0 - reversion
    innov = sigma * math.sqrt(1.0 - a * a)
    x = np.empty(n)
    x[0] = mean + sigma * rng.standard_normal()
    eps = rng.standard_normal(n)
    for t in range(1, n):
        x[t] = mean + a * (x[t - 1] - mean) + innov * eps[t]
    return x


@dataclass
class SequenceSample:
    frames: np.ndarray  # (T, H, W)
    records: list[AnnotationRecord]
    load: str
    trajectory: np.ndarray  # (T, 2) pupil position in eye widths
    openness: np.ndarray
    params: list[EyeSceneParams] = field(repr=False, default_factory=list)

    @property
    def label(self) -> int:
        return 1 if self.load == "high" else 0


@dataclass
class SequencePlan:
    """Per-frame scene parameters of a clip, before rendering."""

    params: list[EyeSceneParams]
    load: str
    trajectory: np.ndarray  # (T, 2) pupil position in eye widths
    openness: np.ndarray


def plan_sequence(seq: LoadSequenceParams, seed: int,
                  dist: SceneDistribution = SceneDistribution(rotation=(-10.0, 10.0))) -> SequencePlan:
    if seq.frames < 2:
        raise ValueError("a sequence needs at least 2 frames")
    rng = np.random.default_rng(seed)
    base = random_scene(rng, replace(dist, pupil_range=0.0), closed=False)
    base = replace(base, openness=float(rng.uniform(0.75, 1.0)))
    t_n = seq.frames
    sigma = seq.dispersion
    gaze = (float(rng.uniform(-0.05, 0.05)), float(rng.uniform(-0.02, 0.02)))
    xs = ou_walk(rng, t_n, sigma, seq.reversion, gaze[0])
    ys = ou_walk(rng, t_n, sigma * seq.vertical_ratio, seq.reversion, gaze[1])
    xs = np.clip(xs, -PUPIL_X_LIMIT, PUPIL_X_LIMIT)
    y_lim = 0.25 * base.eye_h / base.eye_w
    ys = np.clip(ys, -y_lim, y_lim)
    drift = np.stack([ou_walk(rng, t_n, seq.center_drift * 3, 0.1) for _ in range(2)], axis=1)
    openness = np.full(t_n, base.openness)
    t = 0
    blink_draws = rng.random(t_n)
    while t < t_n:
        if blink_draws[t] < seq.blink_prob:
            openness[t : t + seq.blink_frames] = 0.05
            t += seq.blink_frames
        else:
            t += 1
    noise_seeds = rng.integers(2**31, size=t_n)
    params = [
        replace(
            base,
            center=(base.center[0] + drift[k, 0], base.center[1] + drift[k, 1]),
            pupil=(float(xs[k]), float(ys[k])),
            openness=float(openness[k]),
            noise_seed=int(noise_seeds[k]),
        )
        for k in range(t_n)
    ]
    return SequencePlan(params, seq.load, np.stack([xs, ys], axis=1), openness)


def generate_sequence(seq: LoadSequenceParams, seed: int,
                      dist: SceneDistribution = SceneDistribution(rotation=(-10.0, 10.0)),
                      clip_id: str = "clip") -> SequenceSample:
    plan = plan_sequence(seq, seed, dist)
    frames, records = [], []
    for k, p in enumerate(plan.params):
        img, rec = render_frame(p, f"{clip_id}_{k:04d}")
        frames.append(img)
        records.append(rec)
    return SequenceSample(np.stack(frames), records, plan.load, plan.trajectory, plan.openness, plan.params)


def clip_dispersion(trajectory: np.ndarray) -> float:
    """Per-clip pupil dispersion: RMS of per-axis sample standard deviations."""
    return float(np.sqrt(np.mean(trajectory.std(axis=0) ** 2)))
