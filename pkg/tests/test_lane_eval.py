import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lanepe.lane_eval import (
    MISSING,
    LabelParseError,
    LaneLabel,
    aggregate,
    clip_accuracy,
    evaluate,
    parse_labels,
    read_labels,
    write_labels,
)
from oracles import brute_force_clip

H48 = list(range(160, 720, 10))[:48]


def line(lanes, h_samples, raw="clips/0/20.jpg"):
    return json.dumps({"lanes": lanes, "h_samples": h_samples, "raw_file": raw})


def test_parse_happy_path():
    lanes = [[100 + i for i in range(48)], [MISSING] * 10 + [300] * 38]
    [lab] = parse_labels([line(lanes, H48)])
    assert len(lab.lanes) == 2 and lab.h_samples == H48
    assert lab.num_points == 48 + 38


def test_parse_short_lane_names_index_and_line():
    text = [line([[1, 2, 3]], [10, 20, 30]), line([[1, 2, 3], [4, 5]], [10, 20, 30])]
    with pytest.raises(LabelParseError, match=r"line 2: lane 1 has 2 points"):
        parse_labels(text)


def test_parse_rejects_non_integer_and_bad_json():
    with pytest.raises(LabelParseError, match="non-integer"):
        parse_labels([line([[1.5, 2]], [10, 20])])
    with pytest.raises(LabelParseError, match="line 1"):
        parse_labels(["{not json"])
    with pytest.raises(LabelParseError, match="missing keys"):
        parse_labels([json.dumps({"lanes": []})])
    with pytest.raises(LabelParseError, match="invalid x"):
        parse_labels([line([[-5, 2]], [10, 20])])


def test_parse_empty_lanes():
    [lab] = parse_labels([line([], [10, 20])])
    assert lab.lanes == [] and lab.num_points == 0
    assert clip_accuracy(lab, lab) == (0, 0)


def test_file_round_trip(tmp_path):
    labs = [LaneLabel("a.png", [1, 2], [[3, MISSING]]), LaneLabel("b.png", [5], [])]
    write_labels(tmp_path / "l.json", labs)
    assert read_labels(tmp_path / "l.json") == labs


def test_identity_and_empty_prediction():
    gt = LaneLabel("x", [1, 2, 3], [[10, 11, MISSING], [20, 21, 22]])
    assert clip_accuracy(gt, gt, 20) == (5, 5)
    empty = LaneLabel("x", [1, 2, 3], [[MISSING] * 3, [MISSING] * 3])
    assert clip_accuracy(empty, gt, 20) == (0, 5)


def test_offsets_at_threshold_boundary():
    t = 20
    gt = LaneLabel("x", [1, 2, 3], [[100, 110, 120], [300, 310, 320]])
    pred = LaneLabel("x", [1, 2, 3], [[100, 110 + t, 120 + t + 1], [300, 310 - t, 320 + t + 1]])
    assert clip_accuracy(pred, gt, t) == (4, 6)
    assert brute_force_clip(pred.lanes, gt.lanes, t) == (4, 6)


def test_mismatched_h_samples_rejected():
    with pytest.raises(ValueError, match="h_samples"):
        clip_accuracy(LaneLabel("x", [1, 2], [[1, 1]]), LaneLabel("x", [1, 3], [[1, 1]]))


def test_assignment_prefers_global_optimum():
    # greedy would match gt0->pred0 (2 hits) and strand gt1 with nothing
    gt = LaneLabel("x", [0, 1, 2], [[0, 0, 0], [50, 50, 0]])
    pred = LaneLabel("x", [0, 1, 2], [[0, 50, 50], [0, 0, 99]])
    assert clip_accuracy(pred, gt, 1) == brute_force_clip(pred.lanes, gt.lanes, 1)


def lanes_strategy(n_rows):
    point = st.one_of(st.just(MISSING), st.integers(0, 30))
    return st.lists(st.lists(point, min_size=n_rows, max_size=n_rows), min_size=0, max_size=4)


@st.composite
def clip_pairs(draw):
    n = draw(st.integers(1, 5))
    rows = list(range(n))
    return LaneLabel("p", rows, draw(lanes_strategy(n))), LaneLabel("g", rows, draw(lanes_strategy(n)))


@settings(max_examples=200)
@given(clip_pairs(), st.integers(0, 8))
def test_matches_brute_force(pair, threshold):
    pred, gt = pair
    assert clip_accuracy(pred, gt, threshold) == brute_force_clip(pred.lanes, gt.lanes, threshold)


@given(clip_pairs(), st.integers(0, 8), st.randoms())
def test_lane_order_symmetry(pair, threshold, rnd):
    pred, gt = pair
    p2 = LaneLabel("p", pred.h_samples, rnd.sample(pred.lanes, len(pred.lanes)))
    g2 = LaneLabel("g", gt.h_samples, rnd.sample(gt.lanes, len(gt.lanes)))
    assert clip_accuracy(p2, g2, threshold) == clip_accuracy(pred, gt, threshold)


@given(clip_pairs(), st.integers(0, 8), st.integers(0, 8))
def test_threshold_monotone(pair, t1, t2):
    pred, gt = pair
    lo, hi = sorted((t1, t2))
    c_lo, s = clip_accuracy(pred, gt, lo)
    c_hi, _ = clip_accuracy(pred, gt, hi)
    assert c_lo <= c_hi <= s


def test_aggregate_is_ratio_of_sums():
    rep = aggregate([(3, 4), (1, 4)])
    assert rep.accuracy == 0.5
    skewed = aggregate([(1, 1), (0, 3)])
    assert skewed.accuracy == 0.25
    assert skewed.accuracy != np.mean([1.0, 0.0])
    assert aggregate([(5, 5)]).accuracy == 1.0


def test_aggregate_empty_flags():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rep = aggregate([])
    assert rep.accuracy == 1.0 and rep.empty and caught
    with pytest.raises(ValueError):
        aggregate([(3, 2)])


def test_report_json_shape():
    gts = [LaneLabel("a", [1], [[5]]), LaneLabel("b", [1], [[5], [9]])]
    rep = evaluate(gts, gts, 0)
    d = rep.to_dict()
    assert d["accuracy"] == 1.0 and [c["raw_file"] for c in d["clips"]] == ["a", "b"]
    json.dumps(d)
    assert "3/3" in rep.summary()
