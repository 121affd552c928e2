import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eyeload.errors import OffsetOutOfRange
from eyeload.geometry import (
    BBox,
    CellPrediction,
    GridSpec,
    decode_cell,
    decode_grid,
    encode_target,
    iou,
    iou_corners,
    iou_matrix,
    nms,
    nms_indices,
)

G16 = GridSpec(16, 8, 8)


def cell(tx=0.0, ty=0.0, tw=0.0, th=0.0, ix=3, iy=2, prior=(24.0, 12.0), tp=0.0):
    return CellPrediction(tp, tx, ty, tw, th, ix, iy, *prior)


def test_decode_zero_offsets_lands_on_cell_center():
    b = decode_cell(cell(), G16)
    assert (b.cx, b.cy, b.w, b.h) == (56.0, 40.0, 24.0, 12.0)


def test_decode_tx_one():
    b = decode_cell(cell(tx=1.0), G16)
    # tanh(1) to 20 digits: (0.76159415595576488812 + 3.5) * 16 = 68.18550649529223...
    assert b.cx == pytest.approx(68.185506495292238210, rel=1e-14)


def test_decode_log_scale():
    assert decode_cell(cell(tw=math.log(2)), G16).w == pytest.approx(48.0)


def test_decode_score_is_sigmoid_of_tp():
    assert decode_cell(cell(tp=0.0), G16).score == 0.5
    assert decode_cell(cell(tp=-1000.0), G16).score == 0.0


def test_decode_rejects_cell_outside_grid():
    with pytest.raises(ValueError):
        decode_cell(cell(ix=8), G16)


@given(st.floats(-50, 50), st.integers(0, 7))
def test_decode_range_property(tx, ix):
    b = decode_cell(cell(tx=tx, ix=ix), G16)
    u = b.cx / G16.stride - ix
    assert -0.5 <= u <= 1.5
    if abs(tx) < 15:  # tanh saturates to +-1 in floating point beyond this
        assert -0.5 < u < 1.5


def test_decode_grid_matches_decode_cell():
    rng = np.random.default_rng(0)
    g = GridSpec(8, 5, 4)
    raw = rng.normal(size=(4, 5, 5))
    out = decode_grid(raw, g, (20.0, 10.0))
    for iy in range(4):
        for ix in range(5):
            b = decode_cell(CellPrediction(*raw[iy, ix], ix, iy, 20.0, 10.0), g)
            np.testing.assert_allclose(out[iy, ix], [b.cx, b.cy, b.w, b.h], rtol=1e-14)


def test_encode_at_cell_center_and_prior_size():
    t = encode_target(BBox(56.0, 40.0, 24.0, 12.0), G16, (24.0, 12.0))
    assert (t.cell_ix, t.cell_iy) == (3, 2)
    assert t.tx == 0.0 and t.ty == 0.0 and t.tw == 0.0 and t.th == 0.0


@settings(max_examples=300)
@given(st.floats(0.01, 127.99), st.floats(0.01, 127.99), st.floats(2, 90), st.floats(2, 90))
def test_encode_decode_round_trip(cx, cy, w, h):
    b = BBox(cx, cy, w, h)
    t = encode_target(b, G16, (30.0, 15.0))
    d = decode_cell(t, G16)
    for got, want in ((d.cx, cx), (d.cy, cy), (d.w, w), (d.h, h)):
        assert abs(got - want) <= 1e-9 * max(1.0, abs(want))


def test_encode_forced_cell_out_of_reach():
    b = BBox(56.0, 40.0, 24.0, 12.0)
    near = encode_target(BBox(50.0, 40.0, 24.0, 12.0), G16, (24.0, 12.0), cell=(2, 2))
    assert decode_cell(near, G16).cx == pytest.approx(50.0)
    with pytest.raises(OffsetOutOfRange):  # exactly 1.5 cells is the open bound
        encode_target(b, G16, (24.0, 12.0), cell=(2, 2))


def test_iou_examples():
    a = BBox.from_corners(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, BBox.from_corners(5, 5, 6, 6)) == 0.0
    assert iou_corners((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7)


boxes = st.builds(
    lambda x, y, w, h: BBox.from_corners(x, y, x + w, y + h),
    st.floats(0, 100), st.floats(0, 100), st.floats(0.5, 50), st.floats(0.5, 50),
)


@given(boxes, boxes)
def test_iou_symmetric_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0


def test_iou_matrix_agrees_with_scalar():
    rng = np.random.default_rng(1)
    xy = rng.uniform(0, 50, size=(6, 2))
    wh = rng.uniform(1, 30, size=(6, 2))
    c = np.hstack([xy, xy + wh])
    m = iou_matrix(c[:3], c[3:])
    for i in range(3):
        for j in range(3):
            assert m[i, j] == pytest.approx(iou_corners(c[i], c[3 + j]), abs=1e-12)


def test_nms_examples():
    a = BBox.from_corners(0, 0, 10, 10, score=0.9)
    assert nms([a]) == [a]
    assert nms([a, a.with_score(0.8)]) == [a]
    # B shifted so IoU(A, B) = 0.6: overlap 10*x / (200 - 10*x) = 0.6 -> x = 7.5
    b = BBox.from_corners(2.5, 0, 12.5, 10, score=0.8)
    assert iou(a, b) == pytest.approx(0.6)
    c = BBox.from_corners(50, 50, 60, 60, score=0.7)
    assert nms([b, c, a], 0.5) == [a, c]


def test_nms_tie_keeps_input_order():
    a = BBox.from_corners(0, 0, 10, 10, score=0.5)
    b = BBox.from_corners(1, 0, 11, 10, score=0.5)
    assert nms([a, b]) == [a]
    assert nms_indices([b, a]) == [0]


@given(st.lists(st.tuples(boxes, st.floats(0, 1)), max_size=12))
def test_nms_properties(items):
    dets = [b.with_score(s) for b, s in items]
    out = nms(dets, 0.5)
    assert [d.score for d in out] == sorted((d.score for d in out), reverse=True)
    for i in range(len(out)):
        for j in range(i + 1, len(out)):
            assert iou(out[i], out[j]) <= 0.5
    assert nms(out, 0.5) == out


def test_bbox_validation():
    with pytest.raises(ValueError):
        BBox(0, 0, 0, 1)
    with pytest.raises(ValueError):
        BBox(0, 0, 1, 1, score=1.5)
    with pytest.raises(ValueError):
        BBox(0, 0, 1, 1, state="squint")
