import json

import pytest

from eyeload import cli
from eyeload.datakit import AnnotationRecord, read_annotations, write_annotations
from eyeload.detector import EyeDetector
from eyeload.metrics import validate_report


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run("synth-gen", "--out", out, "--count", 12, "--seed", 3) == 0
    return out


def test_parser_errors_exit_2(tmp_path):
    assert run("synth-gen") == 2  # --out is required
    assert run("no-such-command", "--out", tmp_path) == 2
    assert run("evaluate", "--out", tmp_path) == 2  # no --data


def test_bad_config_exits_2(tmp_path):
    bad = tmp_path / "c.json"
    bad.write_text('{"count": 3, "colour": "red"}')
    assert run("synth-gen", "--out", tmp_path / "o", "--config", bad) == 2
    bad.write_text("[1, 2]")
    assert run("synth-gen", "--out", tmp_path / "o", "--config", bad) == 2
    assert run("synth-gen", "--out", tmp_path / "o", "--config", tmp_path / "missing.json") == 2
    assert run("synth-gen", "--out", tmp_path / "o", "--count", -1) == 2
    assert run("synth-gen", "--out", tmp_path / "o", "--workers", 0) == 2


def test_data_errors_exit_3(tmp_path):
    assert run("evaluate", "--out", tmp_path / "o", "--data", tmp_path / "nowhere", "--predictions", "p") == 3
    p1, p2 = tmp_path / "p1.jsonl", tmp_path / "p2.jsonl"
    write_annotations(p1, [AnnotationRecord("a", "closed", (0.0, 0.0, 9.0, 9.0), (1.0, 4.0), (8.0, 4.0), None)])
    write_annotations(p2, [AnnotationRecord("b", "closed", (0.0, 0.0, 9.0, 9.0), (1.0, 4.0), (8.0, 4.0), None)])
    assert run("validate-annotations", "--out", tmp_path / "v", "--pass1", p1, "--pass2", p2) == 3


def test_config_precedence(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"synth-gen": {"count": 2, "frames": 5, "closed-fraction": 0.0},
                                "evaluate": {"bench": True}}))
    out = tmp_path / "o"
    assert run("synth-gen", "--out", out, "--config", conf, "--count", 1) == 0
    snap = json.loads((out / "resolved_config.json").read_text())
    assert snap["count"] == 1  # flag beats file
    assert snap["frames"] == 5 and snap["closed_fraction"] == 0.0  # file beats default
    assert snap["sequences"] == 0 and snap["seed"] == 0  # defaults
    assert len(read_annotations(out / "annotations.jsonl")) == 1


def test_empty_dataset_with_manifest(tmp_path):
    assert run("synth-gen", "--out", tmp_path, "--count", 0) == 0
    assert read_annotations(tmp_path / "annotations.jsonl") == []
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["parameters"]["count"] == 0 and "annotations.jsonl" in man["files"]


def test_synth_gen_is_reproducible(tmp_path, small_data):
    assert run("synth-gen", "--out", tmp_path / "again", "--count", 12, "--seed", 3) == 0
    assert (tmp_path / "again" / "manifest.json").read_bytes() == (small_data / "manifest.json").read_bytes()
    assert run("synth-gen", "--out", tmp_path / "regen", "--manifest", small_data / "manifest.json") == 0
    assert (tmp_path / "regen" / "manifest.json").read_bytes() == (small_data / "manifest.json").read_bytes()
    records = read_annotations(small_data / "annotations.jsonl")
    assert len(records) == 12
    assert all((small_data / "images" / f"{r.image_id}.png").exists() for r in records)


def test_sequence_workers_do_not_change_output(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("synth-gen", "--out", a, "--count", 0, "--sequences", 2, "--frames", 4) == 0
    assert run("synth-gen", "--out", b, "--count", 0, "--sequences", 2, "--frames", 4, "--workers", 2) == 0
    assert json.loads((a / "manifest.json").read_text())["files"] == json.loads((b / "manifest.json").read_text())["files"]
    index = [json.loads(ln) for ln in (a / "sequences.jsonl").read_text().splitlines()]
    assert [e["load"] for e in index] == ["low", "high"] and [e["label"] for e in index] == [0, 1]


def oracle_predictions(records, path):
    with path.open("w") as fh:
        for r in records:
            kp = {"lateral_canthus": r.lateral_canthus, "medial_canthus": r.medial_canthus, "pupil": r.pupil}
            det = {"box": list(r.bounding_box), "score": 0.99, "state": r.state, "keypoints": kp,
                   "closed_prob": float(r.state == "closed")}
            fh.write(json.dumps({"image_id": r.image_id, "detections": [det]}) + "\n")


def test_oracle_predictions_score_perfectly(tmp_path, small_data):
    preds = tmp_path / "preds.jsonl"
    oracle_predictions(read_annotations(small_data / "annotations.jsonl"), preds)
    outs = [tmp_path / "e1", tmp_path / "e2"]
    for out in outs:
        assert run("evaluate", "--out", out, "--data", small_data, "--predictions", preds) == 0
    report = json.loads((outs[0] / "metrics.json").read_text())
    validate_report(report)
    assert report["mAP"] == 1.0 and report["box_ap50"] == 1.0
    assert sorted(report["keypoint_ap"]) == [f"{k / 100:.2f}" for k in range(1, 11)]
    assert report["mean_weighted_error"] == 0.0 and report["blink"]["accuracy"] == 1.0
    for name in ("metrics.json", "metrics.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    assert (outs[0] / "pr_curves.png").exists() and (outs[0] / "error_hist.png").exists()


def test_validate_annotations(tmp_path):
    base = dict(state="closed", lateral_canthus=None, medial_canthus=None, pupil=None)
    p1 = [AnnotationRecord("a", bounding_box=(10.0, 10.0, 20.0, 20.0), **base),
          AnnotationRecord("b", bounding_box=(20.0, 40.0, 100.0, 70.0), **base),
          AnnotationRecord("solo", bounding_box=(20.0, 40.0, 100.0, 70.0), **base)]
    s = 10 * (1 - 0.2) / (1 + 0.2)  # 10x10 boxes shifted by s overlap with IoU 0.2
    p2 = [AnnotationRecord("a", bounding_box=(10.0 + s, 10.0, 20.0 + s, 20.0), **base), p1[1]]
    write_annotations(tmp_path / "p1.jsonl", p1)
    write_annotations(tmp_path / "p2.jsonl", p2)
    out = tmp_path / "v"
    assert run("validate-annotations", "--out", out, "--pass1", tmp_path / "p1.jsonl", "--pass2", tmp_path / "p2.jsonl") == 0
    removal = [json.loads(ln) for ln in (out / "removal_log.jsonl").read_text().splitlines()]
    assert removal == [{"filter": "missing_pass", "image_id": "solo"}, {"filter": "bounding_box", "image_id": "a"}]
    assert [r.image_id for r in read_annotations(out / "cleaned.jsonl")] == ["b"]
    agreement = json.loads((out / "agreement.json").read_text())
    assert agreement["pairs"] == 2 and agreement["unpaired"] == 1 and agreement["state_agreement"] == 1.0
    write_annotations(tmp_path / "same.jsonl", p1[1:])
    assert run("validate-annotations", "--out", tmp_path / "w", "--pass1", tmp_path / "same.jsonl",
               "--pass2", tmp_path / "same.jsonl") == 0
    assert (tmp_path / "w" / "removal_log.jsonl").read_text() == ""


def test_train_detector_smoke_and_determinism(tmp_path, small_data):
    logs = []
    for name in ("t1", "t2"):
        out = tmp_path / name
        assert run("train-detector", "--out", out, "--data", small_data, "--iterations", 3, "--batch-size", 2) == 0
        rows = [json.loads(ln) for ln in (out / "train_log.jsonl").read_text().splitlines()]
        assert [r["iteration"] for r in rows] == [1, 2, 3]
        logs.append([{k: v for k, v in r.items() if k != "wall_time"} for r in rows])
        EyeDetector.load(out / "detector.ckpt")
    assert logs[0] == logs[1]
    assert (tmp_path / "t1" / "detector.ckpt").read_bytes() == (tmp_path / "t2" / "detector.ckpt").read_bytes()
    assert run("train-detector", "--out", tmp_path / "t3", "--data", small_data, "--variant", "wrong") == 2
    assert run("evaluate", "--out", tmp_path / "e", "--data", small_data, "--checkpoint", tmp_path / "t1" / "train_log.jsonl") == 3
