import numpy as np
import pytest

from eyeload.errors import EmptyRoI, IncompatibleCheckpoint, NoForwardState, ShapeMismatch
from eyeload.neuralcore import (
    SGD,
    Adam,
    BatchNorm,
    Conv1d,
    Conv2d,
    GlobalAvgPool,
    Linear,
    Model,
    ReLU,
    RoIAlign,
    Sequential,
    conv_bn_relu,
    roi_align,
    sgd_step,
)
from eyeload.neuralcore import checkpoint
from eyeload.neuralcore.gradcheck import check_layer, numerical_grad, rel_error

TOL = 1e-4


def rand(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def test_relu_forward_and_backward():
    r = ReLU()
    np.testing.assert_array_equal(r(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(r.backward(np.array([5.0, 5.0, 5.0])), [0.0, 0.0, 5.0])


def test_conv1d_identity_kernel():
    conv = Conv1d(3, 3, kernel=1)
    conv.params["weight"][...] = np.eye(3)[None, None]
    x = rand(2, 7, 3)
    np.testing.assert_array_equal(conv(x), x)


def test_conv2d_all_ones_kernel():
    conv = Conv2d(1, 1, kernel=3, padding=0, bias=False)
    conv.params["weight"][...] = 1.0
    out = conv(np.ones((1, 5, 5, 1)))
    assert out.shape == (1, 3, 3, 1)
    np.testing.assert_array_equal(out, 9.0)


def test_conv2d_matches_direct_loop():
    conv = Conv2d(2, 3, kernel=3, stride=2, rng=np.random.default_rng(4))
    conv.params["bias"][...] = (0.1, -0.2, 0.3)
    x = rand(1, 7, 6, 2, seed=5)
    out = conv(x)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    w = conv.params["weight"]
    for i in range(out.shape[1]):
        for j in range(out.shape[2]):
            patch = xp[0, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
            want = np.einsum("hwc,hwcf->f", patch, w) + conv.params["bias"]
            np.testing.assert_allclose(out[0, i, j], want, rtol=1e-12)


def test_fc_input_grad_is_weight_transpose():
    fc = Linear(4, 3, rng=np.random.default_rng(1))
    fc(rand(1, 4))
    g = rand(1, 3, seed=2)
    np.testing.assert_allclose(fc.backward(g), g @ fc.params["weight"].T)


@pytest.mark.parametrize(
    "make, shape, train",
    [
        (lambda: Conv2d(3, 4, 3, rng=np.random.default_rng(0)), (2, 5, 6, 3), True),
        (lambda: Conv2d(2, 3, 3, stride=2, rng=np.random.default_rng(0)), (2, 7, 6, 2), True),
        (lambda: Conv2d(2, 2, (1, 3), padding=(0, 1), rng=np.random.default_rng(0)), (1, 3, 5, 2), True),
        (lambda: Conv1d(3, 4, 3, rng=np.random.default_rng(0)), (2, 9, 3), True),
        (lambda: Conv1d(3, 2, 3, stride=2, rng=np.random.default_rng(0)), (2, 9, 3), True),
        (lambda: BatchNorm(3), (4, 3, 3, 3), True),
        (lambda: BatchNorm(3), (4, 3, 3, 3), False),
        (lambda: BatchNorm(5), (3, 8, 5), True),
        (lambda: ReLU(), (3, 4, 5), True),
        (lambda: Linear(5, 3, rng=np.random.default_rng(0)), (4, 5), True),
        (lambda: GlobalAvgPool(), (2, 3, 4, 5), True),
        (lambda: GlobalAvgPool(), (2, 6, 5), True),
        (lambda: Sequential(*conv_bn_relu(2, 3, rng=np.random.default_rng(0))), (3, 4, 4, 2), True),
        (
            lambda: Sequential(
                *conv_bn_relu(3, 4, stride=2, rng=np.random.default_rng(0), dims=1),
                GlobalAvgPool(),
                Linear(4, 1, rng=np.random.default_rng(1)),
            ),
            (3, 8, 3),
            True,
        ),
    ],
)
def test_gradcheck(make, shape, train):
    layer = make()
    if isinstance(layer, BatchNorm):
        # non-trivial affine and running stats so eval mode is not the identity
        layer.params["gamma"][...] = 1.0 + 0.3 * rand(layer.channels, seed=7)
        layer.params["beta"][...] = rand(layer.channels, seed=8)
        layer.running_mean = rand(layer.channels, seed=9)
        layer.running_var = 0.5 + np.abs(rand(layer.channels, seed=10))
    x = rand(*shape, seed=3)
    if isinstance(layer, ReLU):
        x[np.abs(x) < 1e-2] = 0.5  # keep probes away from the kink
    errors = check_layer(layer, x, train=train)
    assert max(errors.values()) < TOL, errors


def test_roi_align_gradcheck():
    feats = rand(2, 6, 9, 3, seed=11)
    boxes = np.array([[3.0, 5.0, 50.0, 30.0], [-4.0, 2.0, 20.0, 47.0], [10.5, 0.0, 71.0, 47.5]])
    roi = RoIAlign(out=(3, 4), scale=1 / 8, sampling=2)
    index = np.array([0, 1, 1])
    r = rand(3, 3, 4, 3, seed=12)
    roi.forward(feats, boxes, index)
    analytic = roi.backward(r)
    num = numerical_grad(lambda: float((roi.forward(feats, boxes, index) * r).sum()), feats)
    assert rel_error(analytic, num) < TOL


def test_roi_align_center_sample():
    f = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
    assert roi_align(f, (0, 0, 2, 2), out=(1, 1), sampling=1)[0, 0, 0] == pytest.approx(2.5, abs=1e-15)


def test_roi_align_constant_map_gives_constant_output():
    f = np.full((6, 8, 2), 3.25)
    out = roi_align(f, (8, 8, 40, 32), out=(4, 8), scale=1 / 8)
    np.testing.assert_allclose(out, 3.25, rtol=1e-14)


def test_roi_align_empty_box():
    f = np.zeros((4, 4, 1))
    with pytest.raises(EmptyRoI):
        roi_align(f, (50, 50, 60, 60), scale=1 / 8)
    with pytest.raises(EmptyRoI):
        roi_align(f, (5, 5, 5, 9), scale=1 / 8)


def test_backward_without_forward():
    with pytest.raises(NoForwardState):
        Linear(2, 2).backward(np.zeros((1, 2)))
    with pytest.raises(NoForwardState):
        RoIAlign().backward(np.zeros((1, 8, 16, 1)))


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        Conv2d(3, 2)(np.zeros((1, 4, 4, 2)))
    with pytest.raises(ShapeMismatch):
        Conv1d(3, 2)(np.zeros((1, 4, 4, 3)))
    with pytest.raises(ShapeMismatch):
        Linear(3, 2)(np.zeros((1, 4)))
    with pytest.raises(ShapeMismatch):
        BatchNorm(3)(np.zeros((2, 4)))


def test_batchnorm_eval_is_affine_and_leaves_stats():
    bn = BatchNorm(2)
    bn.running_mean = np.array([1.0, -1.0])
    bn.running_var = np.array([4.0, 0.25])
    x = rand(5, 2)
    before = (bn.running_mean.copy(), bn.running_var.copy())
    a = bn(x, train=False)
    b = bn(x, train=False)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(bn.running_mean, before[0])
    np.testing.assert_allclose(a, (x - before[0]) / np.sqrt(before[1] + bn.eps))


def test_batchnorm_train_updates_running_stats():
    bn = BatchNorm(1, momentum=0.1)
    x = np.array([[1.0], [3.0]])
    bn(x)
    assert bn.running_mean[0] == pytest.approx(0.2)
    assert bn.running_var[0] == pytest.approx(0.9 + 0.1 * 2.0)  # unbiased var of {1,3} is 2


def test_sgd_examples():
    p = [np.array([1.0, -2.0])]
    sgd_step(p, [np.zeros(2)], lr=0.5)
    np.testing.assert_array_equal(p[0], [1.0, -2.0])
    g = np.array([0.25, -3.0])
    sgd_step(p, [g], lr=1.0)
    np.testing.assert_array_equal(p[0], [0.75, 1.0])
    with pytest.raises(ValueError):
        sgd_step(p, [g], lr=0.0)


def test_sgd_momentum_two_steps_unrolled():
    p0 = np.array([0.5, 1.5])
    g1, g2 = np.array([1.0, -2.0]), np.array([0.5, 0.25])
    lr, mu = 0.1, 0.9
    opt = SGD([p0.copy()], lr=lr, momentum=mu)
    opt.step([g1])
    opt.step([g2])
    v1 = g1
    v2 = mu * v1 + g2
    np.testing.assert_allclose(opt.params[0], p0 - lr * v1 - lr * v2, rtol=1e-15)


def test_adam_first_step_moves_by_lr():
    p = np.array([1.0, 1.0])
    Adam([p], lr=0.01).step([np.array([3.0, -0.001])])
    np.testing.assert_allclose(p, [0.99, 1.01], rtol=1e-6)


class Tiny(Model):
    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        self.body = Sequential(*conv_bn_relu(1, 2, rng=rng), GlobalAvgPool(), Linear(2, 1, rng=rng))

    def components(self):
        return {"body": self.body}


def _run(seed):
    m = Tiny(seed)
    x = rand(2, 5, 5, 1, seed=1)
    out = m.body(x)
    m.body.backward(np.ones_like(out))
    return out, m.gradients()


def test_forward_backward_deterministic():
    a_out, a_g = _run(3)
    b_out, b_g = _run(3)
    assert a_out.tobytes() == b_out.tobytes()
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a_g, b_g))


def test_checkpoint_round_trip_and_byte_stability(tmp_path):
    m = Tiny(2)
    m.body(rand(3, 5, 5, 1))  # touch running stats
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, m.state_dict(), {"format": "tiny", "note": "x"})
    blob = path.read_bytes()
    assert checkpoint.dumps(m.state_dict(), {"note": "x", "format": "tiny"}) == blob
    header, arrays = checkpoint.load(path)
    assert header == {"format": "tiny", "note": "x"}
    other = Tiny(9)
    other.load_state_dict(arrays)
    assert other.digest() == m.digest()


def test_checkpoint_rejects_corruption(tmp_path):
    blob = checkpoint.dumps({"a": np.ones(3)}, {})
    with pytest.raises(IncompatibleCheckpoint):
        checkpoint.loads(b"NOTACKPT" + blob[8:])
    with pytest.raises(IncompatibleCheckpoint):
        checkpoint.loads(blob + b"\0")


def test_digest_prefix_filters():
    m = Tiny(0)
    d_all = m.digest()
    m.body.layers[-1].params["bias"] += 1.0
    assert m.digest() != d_all
    assert m.digest("body.0") == Tiny(0).digest("body.0")
