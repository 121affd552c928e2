import math
from types import SimpleNamespace

import numpy as np
import pytest

from eyeload import detector as D
from eyeload import temporal as T
from eyeload.errors import ConfigInvalid, IncompatibleCheckpoint, SequenceTooShort
from eyeload.geometry import BBox, KeypointSet
from eyeload.neuralcore import Conv1d, Sequential, conv_bn_relu
from eyeload.neuralcore.gradcheck import check_layer


def small_cfg(**kw):
    base = dict(block_channels=(4, 6), input_dim=3, sequence_len=16, iterations=60, batch_size=8, lr=1e-2)
    base.update(kw)
    return T.TemporalConfig(**base)


def test_config_validation():
    assert T.TemporalConfig().min_length == 16
    with pytest.raises(ConfigInvalid):
        T.TemporalConfig(sequence_len=8)
    with pytest.raises(ConfigInvalid):
        T.TemporalConfig(input_kind="pupil_x")  # input_dim must be 1
    with pytest.raises(ConfigInvalid):
        T.TemporalConfig(input_kind="gaze")
    with pytest.raises(ConfigInvalid):
        T.TemporalConfig.from_dict({"nope": 1})
    cfg = T.TemporalConfig(input_kind="pupil_x", input_dim=1)
    assert T.TemporalConfig.from_dict(cfg.to_dict()) == cfg


def test_zero_features_give_even_odds():
    net = T.TemporalNet(T.TemporalConfig())
    probs = 1 / (1 + np.exp(-net.forward(np.zeros((2, 64, 128)))))
    np.testing.assert_array_equal(probs, 0.5)
    assert net.classify(np.zeros((40, 128))) == 0.5


@pytest.mark.parametrize("t", [16, 17, 31, 64, 100])
def test_encoded_length(t):
    net = T.TemporalNet(T.TemporalConfig())
    assert net.encode(np.zeros((1, t, 128))).shape == (1, math.ceil(t / 16), 256)


def test_too_short_sequences():
    net = T.TemporalNet(T.TemporalConfig())
    with pytest.raises(SequenceTooShort):
        net.forward(np.zeros((1, 15, 128)))
    with pytest.raises(SequenceTooShort):
        net.classify(np.zeros((10, 128)))


def test_block_structure():
    net = T.TemporalNet(T.TemporalConfig())
    convs = [l for _, l in net.blocks.named_layers() if isinstance(l, Conv1d)]
    assert len(convs) == 12
    assert [c.stride[1] for c in convs] == [1, 1, 2] * 4


def test_temporal_net_gradient():
    cfg = small_cfg()
    net = T.TemporalNet(cfg)
    net.classifier.layers[-1].params["weight"][...] = np.random.default_rng(0).normal(size=(6, 1))
    seq = Sequential(*net.blocks.layers, *net.classifier.layers)
    errors = check_layer(seq, np.random.default_rng(1).normal(size=(3, 16, 3)))
    assert max(errors.values()) < 1e-4, errors


def test_resample_matrix():
    np.testing.assert_array_equal(T.resample_matrix(5, 5), np.eye(5))
    w = T.resample_matrix(7, 20)
    np.testing.assert_allclose(w.sum(axis=1), 1.0)
    f = np.arange(7.0)
    out = w @ f
    assert out[0] == 0.0 and out[-1] == 6.0 and np.all(np.diff(out) > 0)
    np.testing.assert_array_equal(T.resample_matrix(1, 4), np.ones((4, 1)))
    with pytest.raises(SequenceTooShort):
        T.resample_matrix(0, 4)


def test_crop_feature_equals_full_frame_feature():
    det = D.EyeDetector(D.DetectorConfig(seed=2))
    frame = np.random.default_rng(3).random((128, 128))
    full = det.features(frame[None])[0]
    for cx, cy in ((50.0, 60.0), (71.0, 40.5), (64.0, 64.0)):
        box = BBox(cx, cy, 40.0, 20.0)
        crop = T.eye_crop(frame, box)
        assert crop.shape == (64, 64)
        got = T.crop_features(det.backbone, crop[None].astype(float))[0]
        # crops keep the float32 rounding of stored frames
        want = det.features(frame.astype(np.float32)[None])[0][int(cy // 8), int(cx // 8)]
        np.testing.assert_allclose(got, want, atol=1e-10)
        assert np.abs(want - full[int(cy // 8), int(cx // 8)]).max() < 1e-4


def test_crop_pads_outside_the_frame():
    frame = np.zeros((128, 128))
    crop = T.eye_crop(frame, BBox(10.0, 10.0, 16.0, 8.0))
    assert T.crop_origin(BBox(10.0, 10.0, 16.0, 8.0)) == (-16, -16)
    assert np.all(crop[:16] == 0.5) and np.all(crop[16:, 16:] == 0.0)


def _det(px, cx=50.0, w=40.0, visible=True):
    box = BBox(cx, 30.0, w, 20.0, state="open" if visible else "closed")
    kp = KeypointSet((cx - 15, 30.0), (cx + 15, 30.0), (px, 30.0) if visible else None)
    return SimpleNamespace(box=box, keypoints=kp)


def test_pupil_series_forward_fills():
    dets = [_det(0.0, visible=False), _det(54.0), _det(0.0, visible=False), _det(46.0)]
    np.testing.assert_allclose(T.pupil_series(dets), [0.1, 0.1, 0.1, -0.1])


def synthetic_clips(n, seed, dim=3, frames=24):
    """High-load clips have lower feature variance over time."""
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(n):
        label = i % 2
        sd = 0.4 if label else 1.5
        x = np.cumsum(rng.normal(0, sd, size=(frames, dim)), axis=0) * 0.3
        boxes = [BBox(50.0, 50.0, 40.0, 20.0)] * frames
        clips.append(T.TrackClip(f"c{i}", label, list(range(frames)), boxes, x, x[:, 0].copy()))
    return clips


def test_training_separates_synthetic_clips():
    train = synthetic_clips(40, 0)
    test = synthetic_clips(40, 1)
    res = T.train_temporal(train, small_cfg(iterations=120))
    acc = T.accuracy(res.predict(test), [c.label for c in test])
    assert acc >= 0.8
    assert res.log[-1]["loss"] < res.log[0]["loss"]


def test_training_needs_both_classes():
    clips = [c for c in synthetic_clips(6, 0) if c.label == 1]
    with pytest.raises(ConfigInvalid):
        T.train_temporal(clips, small_cfg())
    with pytest.raises(ConfigInvalid):
        T.train_temporal([], small_cfg())


def test_short_tracks_rejected():
    clips = synthetic_clips(4, 0, frames=3)
    with pytest.raises(SequenceTooShort):
        T.clip_inputs(clips, small_cfg())


def _tiny_backbone(seed=0):
    rng = np.random.default_rng(seed)
    return Sequential(*conv_bn_relu(1, 3, 3, 2, rng=rng), *conv_bn_relu(3, 3, 3, 2, rng=rng),
                      *conv_bn_relu(3, 3, 3, 2, rng=rng))


def crop_clips(n, seed, frames=16):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = i % 2
        crops = rng.random((frames, 64, 64)).astype(np.float32) * (0.3 if label else 1.0)
        c = T.TrackClip(f"k{i}", label, list(range(frames)), [BBox(32.0, 32.0, 20.0, 10.0)] * frames,
                        np.zeros((frames, 3)), np.zeros(frames), crops)
        out.append(c)
    return out


def test_frozen_backbone_is_unchanged():
    bb = _tiny_backbone()
    before = T.BackboneModel(bb).digest()
    res = T.train_temporal(crop_clips(4, 0), small_cfg(iterations=3, batch_size=2), backbone=bb)
    assert T.BackboneModel(bb).digest() == before
    assert T.BackboneModel(res.backbone).digest() == before


def test_fine_tuning_updates_a_private_copy():
    bb = _tiny_backbone()
    before = T.BackboneModel(bb).digest()
    res = T.train_temporal(crop_clips(4, 0), small_cfg(iterations=3, batch_size=2, fine_tune_backbone=True,
                                                       backbone_lr=1e-2), backbone=bb)
    assert T.BackboneModel(bb).digest() == before
    assert T.BackboneModel(res.backbone).digest() != before
    with pytest.raises(ConfigInvalid):
        T.train_temporal(synthetic_clips(4, 0), small_cfg(fine_tune_backbone=True))


def test_fine_tune_gradient_reaches_backbone():
    # directional derivative of the batch loss w.r.t. backbone weights through crops and resampling
    bb = _tiny_backbone(1)
    clips = crop_clips(2, 3)
    cfg = small_cfg()
    net = T.TemporalNet(cfg)
    net.classifier.layers[-1].params["weight"][...] = np.random.default_rng(4).normal(size=(6, 1))
    model = T.BackboneModel(bb)
    mats = [T.resample_matrix(len(c), cfg.sequence_len) for c in clips]
    y = np.array([c.label for c in clips], float)

    def loss_and_grad(want_grad):
        crops = np.concatenate([c.crops for c in clips]).astype(float)[..., None] - 0.5
        fmap = bb.forward(crops, train=False)
        parts = np.split(fmap[:, 3, 3], [len(clips[0])])
        x = np.stack([m @ p for m, p in zip(mats, parts)])
        logit = net.forward(x, train=False)
        loss = float(np.sum(np.maximum(logit, 0) - logit * y + np.log1p(np.exp(-np.abs(logit)))))
        if not want_grad:
            return loss, None
        model.zero_grad()
        dx = net.backward(1 / (1 + np.exp(-logit)) - y)
        dmap = np.zeros_like(fmap)
        dmap[:, 3, 3] = np.concatenate([m.T @ d for m, d in zip(mats, dx)])
        bb.backward(dmap)
        return loss, [g.copy() for g in model.gradients()]

    _, grads = loss_and_grad(True)
    params = model.parameters()
    rng = np.random.default_rng(5)
    direction = [rng.standard_normal(p.shape) for p in params]
    analytic = sum(float((g * d).sum()) for g, d in zip(grads, direction))
    eps = 1e-5
    for p, d in zip(params, direction):
        p += eps * d
    up = loss_and_grad(False)[0]
    for p, d in zip(params, direction):
        p -= 2 * eps * d
    down = loss_and_grad(False)[0]
    numeric = (up - down) / (2 * eps)
    assert abs(numeric - analytic) <= 1e-4 * max(abs(numeric), abs(analytic), 1e-8)


def test_save_and_load(tmp_path):
    bb = _tiny_backbone()
    clips = crop_clips(4, 0)
    res = T.train_temporal(clips, small_cfg(iterations=2, batch_size=2), backbone=bb)
    path = tmp_path / "t.ckpt"
    res.save(path)
    with pytest.raises(IncompatibleCheckpoint):
        T.TemporalResult.load(path)
    again = T.TemporalResult.load(path, backbone_template=_tiny_backbone(9))
    np.testing.assert_array_equal(again.predict(clips), res.predict(clips))
    T.write_predictions(tmp_path / "p.jsonl", clips, res.predict(clips))
    assert len((tmp_path / "p.jsonl").read_text().splitlines()) == 4
