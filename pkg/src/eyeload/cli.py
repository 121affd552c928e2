"""Command-line entry point: ``eyeload <command> [options]``.

Every command takes ``--seed``, ``--config`` (JSON), ``--out`` and
``--workers``.  Settings resolve as built-in defaults, then the config file
(either flat or keyed by command name), then explicit flags; the resolved
set is written to ``<out>/resolved_config.json``.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, datakit, metrics, synthdata, temporal
from .datakit import AnnotationRecord, read_annotations, read_image, write_annotations, write_image
from .detector import DetectorConfig, EyeDetector, TrainSchedule, median_prior, train
from .errors import ConfigInvalid, EyeloadError
from .geometry import BBox, KeypointSet
from .tracking import TrackerConfig, track_sequence, write_tracks

log = logging.getLogger("eyeload")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3

DEFAULTS = {
    "synth-gen": {"count": 100, "sequences": 0, "frames": 64, "closed_fraction": 0.5, "partner_eye": False},
    "train-detector": {"data": None, "variant": "mlr_full", "iterations": 200, "batch_size": 8, "lr": 2e-3,
                       "flip_prob": 0.5},
    "track": {"data": None, "checkpoint": None, "theta": 0.3, "max_gap": 2, "policy": "optimal"},
    "train-temporal": {"data": None, "tracks": None, "checkpoint": None, "input_kind": "localized",
                       "fine_tune": False, "iterations": 150, "batch_size": 8, "lr": 1e-3, "backbone_lr": 1e-4,
                       "sequence_len": 64},
    "evaluate": {"data": None, "checkpoint": None, "predictions": None, "temporal": None, "tracks": None,
                 "single_eye_rule": True, "normalization": "box_width", "bench": False},
    "validate-annotations": {"pass1": None, "pass2": None},
    "bench": {"data": None, "checkpoint": None, "warmup": 3, "limit": 0},
}


# --- config resolution ----------------------------------------------------


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    cfg = {"seed": 0, "workers": 1, **DEFAULTS[command]}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigInvalid(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigInvalid("config file must hold a JSON object")
        section = loaded.get(command, loaded) if command in loaded else loaded
        section = {k.replace("-", "_"): v for k, v in section.items() if k not in DEFAULTS}
        unknown = set(section) - set(cfg)
        if unknown:
            raise ConfigInvalid(f"unknown {command} settings {sorted(unknown)}")
        cfg.update(section)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if int(cfg["workers"]) < 1:
        raise ConfigInvalid("workers must be at least 1")
    return cfg


def _prepare_out(args, cfg: dict) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = {"command": args.command, "version": __version__, "out": str(out), **cfg}
    (out / "resolved_config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def _require(cfg: dict, *keys):
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise ConfigInvalid(f"missing required setting(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# --- dataset on disk ------------------------------------------------------


def load_image_dataset(data_dir) -> list[tuple[np.ndarray, AnnotationRecord]]:
    d = Path(data_dir)
    records = read_annotations(d / "annotations.jsonl")
    return [(read_image(d / "images" / f"{r.image_id}.png"), r) for r in records]


def load_sequence_index(data_dir) -> list[dict]:
    path = Path(data_dir) / "sequences.jsonl"
    if not path.exists():
        return []
    return [json.loads(ln) for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]


def load_sequence_frames(data_dir, entry: dict) -> np.ndarray:
    d = Path(data_dir) / "sequences" / entry["clip_id"]
    return np.stack([read_image(d / f"{k:04d}.png") for k in range(entry["frames"])])


def _render_clip(job):
    clip_id, load, seed, frames, out_dir = job
    s = synthdata.generate_sequence(synthdata.LoadSequenceParams(load=load, frames=frames), seed, clip_id=clip_id)
    d = Path(out_dir) / "sequences" / clip_id
    d.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(s.frames):
        write_image(d / f"{k:04d}.png", img)
    write_annotations(d / "annotations.jsonl", s.records)
    return {"clip_id": clip_id, "load": load, "label": s.label, "frames": frames, "seed": int(seed),
            "dispersion": synthdata.clip_dispersion(s.trajectory)}


def cmd_synth_gen(args, cfg):
    if args.manifest:
        try:
            man = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
            cfg.update(man["parameters"])
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigInvalid(f"unreadable manifest {args.manifest}: {exc}") from None
    if cfg["count"] < 0 or cfg["sequences"] < 0 or cfg["frames"] < 2:
        raise ConfigInvalid("count and sequences must be non-negative and frames at least 2")
    out = _prepare_out(args, cfg)
    (out / "images").mkdir(exist_ok=True)
    dist = synthdata.SceneDistribution(closed_fraction=float(cfg["closed_fraction"]),
                                       partner_eye=bool(cfg["partner_eye"]))
    samples = synthdata.generate_dataset(int(cfg["count"]), int(cfg["seed"]), dist)
    for s in samples:
        write_image(out / "images" / f"{s.record.image_id}.png", s.image)
    write_annotations(out / "annotations.jsonl", [s.record for s in samples])
    seeds = np.random.default_rng([int(cfg["seed"]), 7]).integers(2**31, size=int(cfg["sequences"]))
    jobs = [(f"clip{i:04d}", "high" if i % 2 else "low", int(seeds[i]), int(cfg["frames"]), str(out))
            for i in range(int(cfg["sequences"]))]
    if cfg["workers"] > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=int(cfg["workers"])) as pool:
            index = list(pool.map(_render_clip, jobs))
    else:
        index = [_render_clip(j) for j in jobs]
    (out / "sequences.jsonl").write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in index),
                                         encoding="utf-8")
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name not in ("manifest.json", "resolved_config.json"))
    manifest = {
        "generator_version": synthdata.GENERATOR_VERSION,
        "parameters": {k: cfg[k] for k in ("seed", "count", "sequences", "frames", "closed_fraction", "partner_eye")},
        "files": {str(p.relative_to(out)): _sha256(p) for p in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("wrote %d images and %d clips to %s", len(samples), len(index), out)
    return EXIT_OK


def cmd_train_detector(args, cfg):
    _require(cfg, "data")
    out = _prepare_out(args, cfg)
    data = load_image_dataset(cfg["data"])
    if not data:
        raise ConfigInvalid("training set is empty")
    dcfg = DetectorConfig(head_variant=cfg["variant"], prior=median_prior([r for _, r in data]), seed=int(cfg["seed"]))
    sched = TrainSchedule(iterations=int(cfg["iterations"]), batch_size=int(cfg["batch_size"]), lr=float(cfg["lr"]),
                          flip_prob=float(cfg["flip_prob"]), seed=int(cfg["seed"]))
    with (out / "train_log.jsonl").open("w", encoding="utf-8") as fh:
        model, _ = train(data, dcfg, sched, callback=lambda e: fh.write(json.dumps(e, sort_keys=True) + "\n"))
    model.save(out / "detector.ckpt")
    log.info("saved %s", out / "detector.ckpt")
    return EXIT_OK


def cmd_track(args, cfg):
    _require(cfg, "data", "checkpoint")
    out = _prepare_out(args, cfg)
    det = EyeDetector.load(cfg["checkpoint"])
    try:
        tcfg = TrackerConfig(theta=float(cfg["theta"]), max_gap=int(cfg["max_gap"]), policy=cfg["policy"])
    except ValueError as exc:
        raise ConfigInvalid(str(exc)) from None
    path = out / "tracks.jsonl"
    path.write_text("", encoding="utf-8")
    for entry in load_sequence_index(cfg["data"]):
        frames = load_sequence_frames(cfg["data"], entry)
        outs = []
        for i in range(0, len(frames), 16):
            outs.extend(det.infer_batch(frames[i : i + 16]))
        tracks = track_sequence([o.boxes for o in outs], tcfg, [[d.feature for d in o.detections] for o in outs],
                                [o.detections for o in outs])
        write_tracks(path, tracks, clip_id=entry["clip_id"], include_features=True, mode="a")
    return EXIT_OK


def _payload_keypoints(rec):
    kp = rec.get("keypoints")
    if not kp:
        return None
    return KeypointSet(tuple(kp["lateral_canthus"]), tuple(kp["medial_canthus"]),
                       None if kp.get("pupil") is None else tuple(kp["pupil"]),
                       pupil_visible=kp.get("pupil_visible", True))


class _Det:
    def __init__(self, box, keypoints):
        self.box, self.keypoints = box, keypoints


def clips_from_tracks(tracks_path, data_dir, with_crops: bool) -> list[temporal.TrackClip]:
    """Longest track per clip rebuilt from a tracks file."""
    by_clip: dict[str, dict[int, list[dict]]] = {}
    for rec in [json.loads(ln) for ln in Path(tracks_path).read_text(encoding="utf-8").splitlines() if ln.strip()]:
        by_clip.setdefault(rec["clip_id"], {}).setdefault(rec["track_id"], []).append(rec)
    index = {e["clip_id"]: e for e in load_sequence_index(data_dir)}
    clips = []
    for clip_id in sorted(by_clip):
        if clip_id not in index:
            raise EyeloadError(f"track clip {clip_id} not found in {data_dir}")
        tid = max(by_clip[clip_id], key=lambda k: (len(by_clip[clip_id][k]), -k))
        ents = sorted(by_clip[clip_id][tid], key=lambda r: r["frame"])
        boxes = [BBox.from_corners(*e["box"], score=e["score"], state=e["state"]) for e in ents]
        dets = [_Det(b, _payload_keypoints(e)) for b, e in zip(boxes, ents)]
        crops = None
        if with_crops:
            frames = load_sequence_frames(data_dir, index[clip_id])
            crops = np.stack([temporal.eye_crop(frames[e["frame"]], b) for e, b in zip(ents, boxes)])
        clips.append(temporal.TrackClip(clip_id, int(index[clip_id]["label"]), [e["frame"] for e in ents], boxes,
                                        np.array([e["feature"] for e in ents], dtype=float),
                                        temporal.pupil_series(dets), crops))
    return clips


def cmd_train_temporal(args, cfg):
    _require(cfg, "data", "tracks")
    out = _prepare_out(args, cfg)
    kind = cfg["input_kind"]
    fine = bool(cfg["fine_tune"])
    backbone = None
    if kind == "localized" and (fine or cfg["checkpoint"]):
        _require(cfg, "checkpoint")
        backbone = EyeDetector.load(cfg["checkpoint"]).backbone
    clips = clips_from_tracks(cfg["tracks"], cfg["data"], with_crops=backbone is not None)
    dim = 1 if kind == "pupil_x" else clips[0].features.shape[1] if clips else 128
    tcfg = temporal.TemporalConfig(input_dim=dim, sequence_len=int(cfg["sequence_len"]), fine_tune_backbone=fine,
                                   input_kind=kind, iterations=int(cfg["iterations"]),
                                   batch_size=int(cfg["batch_size"]), lr=float(cfg["lr"]),
                                   backbone_lr=float(cfg["backbone_lr"]), seed=int(cfg["seed"]))
    with (out / "train_log.jsonl").open("w", encoding="utf-8") as fh:
        result = temporal.train_temporal(clips, tcfg, backbone,
                                         callback=lambda e: fh.write(json.dumps(e, sort_keys=True) + "\n"))
    result.save(out / "temporal.ckpt")
    temporal.write_predictions(out / "predictions.jsonl", clips, result.predict(clips))
    return EXIT_OK


def _read_predictions(path, records):
    """Per-image predictions from JSON lines ``{image_id, detections: [...]}``."""
    by_id = {}
    for ln in Path(path).read_text(encoding="utf-8").splitlines():
        if not ln.strip():
            continue
        rec = json.loads(ln)
        preds = []
        for d in rec.get("detections", []):
            kp = d.get("keypoints")
            kps = None
            if kp is not None:
                kps = KeypointSet(tuple(kp["lateral_canthus"]), tuple(kp["medial_canthus"]),
                                  None if kp.get("pupil") is None else tuple(kp["pupil"]))
            box = BBox.from_corners(*d["box"], score=float(d["score"]), state=d.get("state", "unknown"))
            preds.append(metrics.Prediction(float(d["score"]), box, kps, d.get("closed_prob")))
        by_id[rec["image_id"]] = preds
    return [by_id.get(r.image_id, []) for r in records]


def cmd_evaluate(args, cfg):
    _require(cfg, "data")
    if not cfg["checkpoint"] and not cfg["predictions"]:
        raise ConfigInvalid("evaluate needs --checkpoint or --predictions")
    out = _prepare_out(args, cfg)
    data = load_image_dataset(cfg["data"])
    records = [r for _, r in data]
    det = None
    if cfg["predictions"]:
        preds = _read_predictions(cfg["predictions"], records)
    else:
        det = EyeDetector.load(cfg["checkpoint"])
        preds = []
        images = np.stack([img for img, _ in data]) if data else np.zeros((0, 128, 128))
        for i in range(0, len(images), 16):
            preds.extend([[metrics.prediction_from_detection(d) for d in o.detections]
                          for o in det.infer_batch(images[i : i + 16])])
    mcfg = metrics.MatchConfig(single_eye_rule=bool(cfg["single_eye_rule"]), normalization=cfg["normalization"])
    report = metrics.evaluate_detections(preds, records, mcfg)
    if cfg["temporal"]:
        _require(cfg, "tracks")
        template = det.backbone if det is not None else None
        result = temporal.TemporalResult.load(cfg["temporal"], template)
        clips = clips_from_tracks(cfg["tracks"], cfg["data"], with_crops=result.backbone is not None)
        probs = result.predict(clips)
        report["load"] = {"accuracy": temporal.accuracy(probs, [c.label for c in clips]), "clips": len(clips)}
    if cfg["bench"] and det is not None:
        bench = metrics.throughput_bench(det.infer, [img for img, _ in data])
        report["fps"] = bench
    metrics.write_report(report, out / "metrics.json", out / "metrics.csv")
    metrics.plot_pr_curves(report["_curves"], out / "pr_curves.png")
    metrics.plot_error_histogram(report["_errors"], out / "error_hist.png")
    log.info("mAP %.4f, box AP50 %.4f", report["mAP"], report["box_ap50"])
    return EXIT_OK


def cmd_validate_annotations(args, cfg):
    _require(cfg, "pass1", "pass2")
    out = _prepare_out(args, cfg)
    p1, p2 = read_annotations(cfg["pass1"]), read_annotations(cfg["pass2"])
    joined, unpaired = datakit.join_passes(p1, p2)
    report = datakit.two_pass_agreement(p1, p2)
    cleaned, removal = datakit.apply_final_filters(joined)
    removal = [{"image_id": i, "filter": "missing_pass"} for i in unpaired] + removal
    (out / "agreement.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_annotations(out / "cleaned.jsonl", cleaned)
    (out / "removal_log.jsonl").write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in removal),
                                           encoding="utf-8")
    return EXIT_OK


def cmd_bench(args, cfg):
    _require(cfg, "data", "checkpoint")
    out = _prepare_out(args, cfg)
    det = EyeDetector.load(cfg["checkpoint"])
    images = [img for img, _ in load_image_dataset(cfg["data"])]
    if cfg["limit"]:
        images = images[: int(cfg["limit"])]
    res = metrics.throughput_bench(det.infer, images, warmup=int(cfg["warmup"]))
    (out / "bench.json").write_text(json.dumps(res, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("%.1f frames/s", res["fps"])
    return EXIT_OK


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "train-detector": cmd_train_detector,
    "track": cmd_track,
    "train-temporal": cmd_train_temporal,
    "evaluate": cmd_evaluate,
    "validate-annotations": cmd_validate_annotations,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eyeload", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int)
        sp.add_argument("--config", help="JSON file with settings")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--workers", type=int)
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    s = common(sub.add_parser("synth-gen", help="render a synthetic image dataset and load clips"))
    s.add_argument("--count", type=int)
    s.add_argument("--sequences", type=int)
    s.add_argument("--frames", type=int)
    s.add_argument("--closed-fraction", dest="closed_fraction", type=float)
    s.add_argument("--partner-eye", dest="partner_eye", action="store_true", default=None)
    s.add_argument("--manifest", help="regenerate from an existing manifest")

    s = common(sub.add_parser("train-detector", help="train the eye detector"))
    s.add_argument("--data")
    s.add_argument("--variant", choices=["direct_regressor", "mask_only_trained", "mlr_mask_prediction", "mlr_full"])
    s.add_argument("--iterations", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--flip-prob", dest="flip_prob", type=float)

    s = common(sub.add_parser("track", help="detect and track eyes through every clip"))
    s.add_argument("--data")
    s.add_argument("--checkpoint")
    s.add_argument("--theta", type=float)
    s.add_argument("--max-gap", dest="max_gap", type=int)
    s.add_argument("--policy", choices=["optimal", "greedy"], help="association policy")

    s = common(sub.add_parser("train-temporal", help="train the load classifier on tracks"))
    s.add_argument("--data")
    s.add_argument("--tracks")
    s.add_argument("--checkpoint", help="detector checkpoint providing the backbone")
    s.add_argument("--input-kind", dest="input_kind", choices=["localized", "pupil_x"])
    s.add_argument("--fine-tune", dest="fine_tune", action="store_true", default=None)
    s.add_argument("--iterations", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--backbone-lr", dest="backbone_lr", type=float)
    s.add_argument("--sequence-len", dest="sequence_len", type=int)

    s = common(sub.add_parser("evaluate", help="metrics report and plots"))
    s.add_argument("--data")
    s.add_argument("--checkpoint")
    s.add_argument("--predictions", help="JSON-lines predictions instead of a checkpoint")
    s.add_argument("--temporal", help="temporal checkpoint for load accuracy")
    s.add_argument("--tracks")
    s.add_argument("--no-single-eye-rule", dest="single_eye_rule", action="store_false", default=None)
    s.add_argument("--normalization", choices=["box_width", "canthus_span"])
    s.add_argument("--bench", action="store_true", default=None, help="add frames-per-second to the report")

    s = common(sub.add_parser("validate-annotations", help="two-pass agreement and final filters"))
    s.add_argument("--pass1")
    s.add_argument("--pass2")

    s = common(sub.add_parser("bench", help="single-image inference throughput"))
    s.add_argument("--data")
    s.add_argument("--checkpoint")
    s.add_argument("--warmup", type=int)
    s.add_argument("--limit", type=int)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](args, cfg)
    except ConfigInvalid as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EyeloadError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
