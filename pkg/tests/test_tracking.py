import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eyeload.errors import OutOfExtent
from eyeload.geometry import BBox, iou
from eyeload.tracking import (
    IoUTracker,
    TrackerConfig,
    associate,
    greedy_pairs,
    localize_feature,
    longest_track,
    optimal_pairs,
    read_tracks,
    track_sequence,
    write_tracks,
)


def box(x, y, w=20.0, h=10.0, score=0.9):
    return BBox.from_corners(x, y, x + w, y + h, score=score)


def test_same_box_twice_gives_one_track():
    tracks = track_sequence([[box(10, 10)], [box(10, 10)]])
    assert len(tracks) == 1 and tracks[0].frames == [0, 1]


def test_disjoint_boxes_start_new_track():
    t = IoUTracker(TrackerConfig(0.3, max_gap=0))
    t.update(0, [box(10, 10)])
    a = t.update(1, [box(80, 80)])
    assert a.matches == [] and a.new_tracks == [1] and a.terminated == [0]


def best_assignment(ious, theta):
    """Exhaustive search over one-to-one assignments maximizing total qualifying IoU."""
    n, m = ious.shape
    best, best_pairs = -1.0, None
    for perm in itertools.permutations(range(m), min(n, m)):
        pairs = [(t, d) for t, d in zip(range(n), perm) if ious[t, d] > theta]
        total = sum(ious[t, d] for t, d in pairs)
        if total > best:
            best, best_pairs = total, sorted(pairs)
    return best_pairs


def test_two_by_two_cross_iou_example():
    ious = np.array([[0.8, 0.4], [0.35, 0.9]])
    pairs = greedy_pairs(ious, 0.3)
    assert sorted(pairs) == [(0, 0), (1, 1)]
    assert sorted(pairs) == best_assignment(ious, 0.3)


def test_greedy_threshold_is_strict():
    assert greedy_pairs(np.array([[0.3]]), 0.3) == []
    assert optimal_pairs(np.array([[0.3]]), 0.3) == []


def test_optimal_beats_greedy_when_greedy_blocks_a_pair():
    ious = np.array([[0.543, 0.32], [0.32, 0.079]])
    assert greedy_pairs(ious, 0.3) == [(0, 0)]
    assert optimal_pairs(ious, 0.3) == best_assignment(ious, 0.3) == [(0, 1), (1, 0)]


@settings(max_examples=200)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=4), st.floats(0.05, 0.9))
def test_optimal_matches_exhaustive_oracle(vals, theta):
    ious = np.array(vals).reshape(2, 2)
    got = optimal_pairs(ious, theta)
    want = best_assignment(ious, theta)
    assert sum(ious[p] for p in got) == pytest.approx(sum(ious[p] for p in want), abs=1e-12)
    assert all(ious[p] > theta for p in got)


def test_associate_with_real_boxes():
    tracker = IoUTracker()
    tracker.update(0, [box(10, 10), box(60, 10)])
    pairs, unmatched = associate(tracker.active, [box(61, 10), box(11, 11), box(100, 100)], 0.3)
    assert sorted(pairs) == [(0, 1), (1, 0)] and unmatched == [2]


def test_max_gap_keeps_track_through_misses():
    frames = [[box(10, 10)], [], [], [box(11, 10)], [], [], [], [box(12, 10)]]
    tracks = track_sequence(frames, TrackerConfig(0.3, max_gap=2))
    assert [t.frames for t in tracks] == [[0, 3], [7]]


def test_frames_must_increase():
    t = IoUTracker()
    t.update(3, [])
    with pytest.raises(ValueError):
        t.update(3, [])


def test_config_validation():
    with pytest.raises(ValueError):
        TrackerConfig(theta=1.0)
    with pytest.raises(ValueError):
        TrackerConfig(max_gap=-1)
    with pytest.raises(ValueError):
        TrackerConfig(policy="hungry")


@settings(max_examples=60)
@given(st.lists(st.lists(st.tuples(st.floats(0, 100), st.floats(0, 100)), max_size=4), max_size=12),
       st.floats(0.05, 0.9), st.integers(0, 3))
@pytest.mark.parametrize("policy", ["optimal", "greedy"])
def test_track_invariants(policy, frames, theta, gap):
    per_frame = [[box(x, y) for x, y in f] for f in frames]
    tracks = track_sequence(per_frame, TrackerConfig(theta, gap, policy))
    seen = set()
    for t in tracks:
        fr = t.frames
        assert all(a < b for a, b in zip(fr, fr[1:]))
        for prev, cur in zip(t.entries, t.entries[1:]):
            assert iou(prev.box, cur.box) > theta
        for e in t.entries:
            key = (e.frame, id(e.box))
            assert key not in seen
            seen.add(key)
    assert len(seen) == sum(len(f) for f in per_frame)
    again = track_sequence(per_frame, TrackerConfig(theta, gap, policy))
    assert [t.frames for t in again] == [t.frames for t in tracks]


def test_drifting_eye_collapses_to_one_track():
    rng = np.random.default_rng(0)
    xs = 30 + np.cumsum(rng.normal(0, 0.8, 64))
    tracks = track_sequence([[box(x, 40)] for x in xs], TrackerConfig(0.01, max_gap=10**6))
    assert len(tracks) == 1 and len(longest_track(tracks)) == 64


def test_localize_feature_examples():
    fmap = np.arange(8 * 8 * 3, dtype=float).reshape(8, 8, 3)
    b = BBox(100.0, 100.0, 10.0, 10.0)
    np.testing.assert_array_equal(localize_feature(fmap, b, 16), fmap[6, 6])
    np.testing.assert_array_equal(localize_feature(fmap, BBox(96.0, 96.0, 4.0, 4.0), 16), fmap[6, 6])
    const = np.ones((8, 8, 3)) * (1.0, 2.0, 3.0)
    for cx in (1.0, 64.0, 127.0):
        np.testing.assert_array_equal(localize_feature(const, BBox(cx, 50.0, 4.0, 4.0), 16), [1.0, 2.0, 3.0])
    with pytest.raises(OutOfExtent):
        localize_feature(fmap, BBox(140.0, 10.0, 4.0, 4.0), 16)


def test_write_and_read_tracks(tmp_path):
    feats = [[np.array([0.5, 1.0])], [np.array([0.25, 2.0])]]
    tracks = track_sequence([[box(10, 10)], [box(11, 10)]], per_frame_features=feats)
    p = tmp_path / "tracks.jsonl"
    write_tracks(p, tracks, clip_id="c0", include_features=True)
    rows = read_tracks(p)
    assert [r["frame"] for r in rows] == [0, 1]
    assert rows[1]["feature"] == [0.25, 2.0] and rows[0]["clip_id"] == "c0"
    assert rows[0]["box"] == [10.0, 10.0, 30.0, 20.0]
    write_tracks(p, tracks, clip_id="c1", mode="a")
    assert len(read_tracks(p)) == 4
    assert "feature" not in json.loads(p.read_text().splitlines()[-1])
