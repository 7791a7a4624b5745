import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvfnet.boxes import Box3D, rotated_iou_bev
from cvfnet.errors import ConfigurationError, UndefinedMetricError
from cvfnet.evaluation import (EvalConfig, SceneMatch, average_precision, evaluate, gt_is_evaluated,
                               match_scene, recall_points, write_report)


def car(x, y=0.0, score=None, yaw=0.0, **kw):
    return Box3D(x, y, -1.0, 1.6, 3.9, 1.5, yaw, class_id=0, score=score, **kw)


def scene_match(tp_flags, scores, n_gt):
    return SceneMatch(np.array(scores, float), np.array(tp_flags, bool), np.zeros(n_gt, bool), n_gt)


# -- matching --------------------------------------------------------------------

def test_exact_det_is_tp():
    m = match_scene([car(5, score=0.9)], [car(5)], 0, 0.7)
    assert m.tp.tolist() == [True] and m.n_gt == 1


def test_two_dets_on_one_gt():
    m = match_scene([car(5, score=0.9), car(5.1, score=0.8)], [car(5)], 0, 0.5)
    assert m.tp.tolist() == [True, False]


def test_other_class_ignored():
    ped = Box3D(5, 0, -1, 0.6, 0.8, 1.7, 0, class_id=1, score=0.9)
    m = match_scene([ped], [car(5)], 0, 0.5)
    assert m.scores.size == 0 and m.n_gt == 1


def greedy_oracle(dets, gts, thr):
    """Score order; each det takes the unmatched gt of highest IoU, plain loops."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    used, out = set(), {}
    for i in order:
        best, bj = -1.0, -1
        for j, g in enumerate(gts):
            if j in used:
                continue
            v = rotated_iou_bev(dets[i].as_array(), g.as_array())
            if v > best:
                best, bj = v, j
        if bj >= 0 and best >= thr:
            used.add(bj)
            out[i] = True
        else:
            out[i] = False
    return [out[i] for i in order]


@pytest.mark.parametrize("seed", range(8))
def test_adversarial_five_by_five(seed):
    # clustered boxes so several dets compete for the same gts
    r = np.random.default_rng(seed)
    gts = [car(r.uniform(0, 4), r.uniform(0, 2), yaw=r.uniform(-0.5, 0.5)) for _ in range(5)]
    dets = [car(r.uniform(0, 4), r.uniform(0, 2), score=float(s), yaw=r.uniform(-0.5, 0.5))
            for s in r.permutation(5) / 5 + 0.1]
    for thr in (0.1, 0.3, 0.5):
        m = match_scene(dets, gts, 0, thr)
        assert m.tp.tolist() == greedy_oracle(dets, gts, thr)


def test_difficulty_filter_drops_matches_to_excluded_gts():
    tall = car(5, bbox2d=(0, 0, 50, 60))
    short = car(20, bbox2d=(0, 0, 50, 30))
    dets = [car(5, score=0.9), car(20, score=0.8)]
    m = match_scene(dets, [tall, short], 0, 0.7, difficulty="easy")
    assert m.n_gt == 1 and m.tp.tolist() == [True]
    assert gt_is_evaluated(short, "moderate") and not gt_is_evaluated(short, "easy")
    assert not gt_is_evaluated(car(5, occluded=2, bbox2d=(0, 0, 1, 60)), "moderate")
    assert not gt_is_evaluated(car(5, truncated=0.6, bbox2d=(0, 0, 1, 60)), "hard")


# -- AP ----------------------------------------------------------------------------

def test_recall_points():
    np.testing.assert_allclose(recall_points(11), np.arange(11) / 10)
    np.testing.assert_allclose(recall_points(40), np.arange(1, 41) / 40)


def test_perfect_detector_ap_one():
    ms = [scene_match([True, True], [0.9, 0.8], 2), scene_match([True], [0.7], 1)]
    assert average_precision(ms, recall_positions=40) == 1.0
    assert average_precision(ms, recall_positions=11) == 1.0


def test_half_recall_eleven_point():
    # recall points 0.0..0.5 reach precision 1: 6 of 11
    ap = average_precision([scene_match([True], [0.9], 2)], recall_positions=11)
    assert ap == pytest.approx(6 / 11, abs=1e-12)
    assert ap == pytest.approx(0.54545, abs=1e-5)


def test_half_recall_forty_point():
    ap = average_precision([scene_match([True], [0.9], 2)], recall_positions=40)
    assert ap == pytest.approx(20 / 40, abs=1e-12)


def test_zero_detections_ap_zero():
    assert average_precision([scene_match([], [], 3)]) == 0.0


def test_no_gt_is_undefined():
    with pytest.raises(UndefinedMetricError):
        average_precision([scene_match([False], [0.5], 0)])


def test_hand_computed_interpolation():
    # ranked tp, fp, tp over 2 gts: (r, p) = (0.5, 1), (0.5, 0.5), (1, 2/3)
    ap = average_precision([scene_match([True, False, True], [0.9, 0.8, 0.7], 2)], recall_positions=11)
    assert ap == pytest.approx((6 * 1.0 + 5 * 2 / 3) / 11, abs=1e-12)


def random_matches(seed, n_scenes=4):
    r = np.random.default_rng(seed)
    out = []
    for _ in range(n_scenes):
        k = int(r.integers(0, 6))
        tp = r.uniform(size=k) < 0.6
        out.append(scene_match(tp, r.uniform(0.01, 1, size=k), int(tp.sum() + r.integers(0, 3))))
    if sum(m.n_gt for m in out) == 0:
        out.append(scene_match([], [], 1))
    return out


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([11, 40]))
def test_ap_invariant_to_monotone_rescaling(seed, n):
    ms = random_matches(seed)
    ref = average_precision(ms, recall_positions=n)
    warped = [SceneMatch(np.exp(3 * m.scores) + 2, m.tp, m.gt_matched, m.n_gt) for m in ms]
    assert average_precision(warped, recall_positions=n) == pytest.approx(ref, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([11, 40]))
def test_lowest_score_fp_never_increases_ap(seed, n):
    ms = random_matches(seed)
    ref = average_precision(ms, recall_positions=n)
    ms.append(scene_match([False], [0.0], 0))
    assert average_precision(ms, recall_positions=n) <= ref + 1e-12


# -- evaluate / report -------------------------------------------------------------

def test_evaluate_perfect_predictions():
    gt = {"a": [car(5), car(15, 5)], "b": [car(30, -3, yaw=1.0)]}
    pred = {k: [Box3D(**{**b.__dict__, "score": 0.9}) for b in v] for k, v in gt.items()}
    for kind in ("bev", "3d"):
        res = evaluate(pred, gt, EvalConfig(iou_kind=kind))
        assert res == {f"AP_Car_{kind}_R40": 1.0}


def test_evaluate_missing_scene_counts_as_no_detections():
    gt = {"a": [car(5)], "b": [car(5)]}
    pred = {"a": [car(5, score=0.9)]}
    res = evaluate(pred, gt, EvalConfig(recall_positions=11))
    assert res["AP_Car_3d_R11"] == pytest.approx(6 / 11)


def test_evaluate_class_without_gt_is_nan():
    res = evaluate({"a": []}, {"a": []}, EvalConfig(), class_ids=[0])
    assert math.isnan(res["AP_Car_3d_R40"])


def test_write_report(tmp_path):
    txt, js = write_report({"AP_Car_bev_R40": 0.5}, tmp_path / "r")
    assert txt.read_text() == "AP_Car_bev_R40: 0.5000\n"
    assert json.loads(js.read_text()) == {"AP_Car_bev_R40": 0.5}


@pytest.mark.parametrize("kw", [dict(iou_thresholds=(0.0, 0.5, 0.5)), dict(recall_positions=20),
                                dict(iou_kind="2d"), dict(difficulty="medium")])
def test_eval_config_validation(kw):
    with pytest.raises(ConfigurationError):
        EvalConfig(**kw)
