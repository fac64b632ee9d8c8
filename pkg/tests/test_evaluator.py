"""Matching, AP, and difficulty-bucket checks against hand-worked values."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mffd import evaluator as ev


def gt(cls, box, trunc=0.0, occ=0):
    return ev.GtBox(cls, box, trunc, occ)


# -- IoU -------------------------------------------------------------------------


def test_iou_worked_examples():
    assert ev.iou((0, 0, 10, 10), (0, 0, 10, 10)) == pytest.approx(1.0)
    assert ev.iou((0, 0, 10, 10), (5, 0, 15, 10)) == pytest.approx(1 / 3)
    assert ev.iou((0, 0, 10, 10), (10, 0, 20, 10)) == 0.0
    assert ev.iou((0, 0, 0, 10), (0, 0, 10, 10)) == 0.0  # degenerate box


@given(seed=st.integers(0, 2**16))
@settings(max_examples=50, deadline=None)
def test_iou_agrees_with_oracle_and_is_symmetric(seed):
    r = np.random.Generator(np.random.PCG64(seed))
    x1, y1, u1, v1 = r.uniform(0, 50, 4)
    a = (x1, y1, x1 + u1, y1 + v1)
    x2, y2, u2, v2 = r.uniform(0, 50, 4)
    b = (x2, y2, x2 + u2, y2 + v2)
    assert ev.iou(a, b) == pytest.approx(oracles.box_iou(a, b), abs=1e-12)
    assert ev.iou(a, b) == pytest.approx(ev.iou(b, a), abs=1e-12)
    assert 0.0 <= ev.iou(a, b) <= 1.0


# -- 11-point AP --------------------------------------------------------------------


def test_ap_hand_fixture():
    # 3 ground truths; ranked detections: TP, FP, TP, TP
    # prefix recall:    1/3  1/3  2/3  1
    # prefix precision:  1   1/2  2/3  3/4
    # recall targets 0.0-0.3 take precision 1, targets 0.4-1.0 take 3/4:
    # AP = (4 * 1 + 7 * 0.75) / 11 = 37/44
    scores = [0.9, 0.8, 0.7, 0.6]
    flags = [True, False, True, True]
    ap, recall, precision = ev.average_precision(scores, flags, num_gt=3)
    assert ap == pytest.approx(37 / 44)
    np.testing.assert_allclose(recall, [1 / 3, 1 / 3, 2 / 3, 1.0])
    np.testing.assert_allclose(precision, [1.0, 0.5, 2 / 3, 0.75])


def test_ap_perfect_detector_scores_one():
    ap, _, _ = ev.average_precision([0.9, 0.8], [True, True], num_gt=2)
    assert ap == pytest.approx(1.0)


@given(seed=st.integers(0, 2**16))
@settings(max_examples=80, deadline=None)
def test_ap_monotone_under_new_detections(seed):
    # an extra FP can only hurt; an extra TP on a spare gt can only help
    r = np.random.Generator(np.random.PCG64(seed))
    n = int(r.integers(1, 12))
    scores = r.uniform(0.0, 1.0, n).tolist()
    flags = [bool(f) for f in r.random(n) < 0.5]
    num_gt = sum(flags) + int(r.integers(1, 4))
    base, _, _ = ev.average_precision(scores, flags, num_gt)
    s = float(r.uniform(0.0, 1.0))
    with_fp, _, _ = ev.average_precision(scores + [s], flags + [False], num_gt)
    assert with_fp <= base + 1e-12
    with_tp, _, _ = ev.average_precision(scores + [s], flags + [True], num_gt)
    assert with_tp >= base - 1e-12


def test_ap_no_detections_is_zero():
    ap, recall, precision = ev.average_precision([], [], num_gt=4)
    assert ap == 0.0 and recall.size == 0 and precision.size == 0


def test_ap_ignores_input_order():
    scores = [0.6, 0.9, 0.7, 0.8]
    flags = [True, True, True, False]
    ap1, _, _ = ev.average_precision(scores, flags, num_gt=3)
    ap2, _, _ = ev.average_precision([0.9, 0.8, 0.7, 0.6], [True, False, True, True], num_gt=3)
    assert ap1 == pytest.approx(ap2)


@given(seed=st.integers(0, 2**16), n=st.integers(1, 12), num_gt=st.integers(1, 8))
@settings(max_examples=60, deadline=None)
def test_ap_agrees_with_scalar_oracle(seed, n, num_gt):
    r = np.random.Generator(np.random.PCG64(seed))
    scores = r.uniform(0, 1, n).tolist()
    flags = (r.uniform(0, 1, n) < 0.5).tolist()
    if sum(flags) > num_gt:
        num_gt = sum(flags)  # recall cannot exceed 1
    ap, _, _ = ev.average_precision(scores, flags, num_gt)
    assert ap == pytest.approx(oracles.ap_eleven_point(scores, flags, num_gt), abs=1e-12)


# -- matching ----------------------------------------------------------------------


def test_match_prefers_higher_scores_and_higher_iou():
    gts = [gt(0, (0, 0, 10, 10)), gt(0, (20, 0, 30, 10))]
    dets = [
        (0, 0.9, (1, 0, 11, 10)),  # claims the first gt
        (0, 0.8, (0, 0, 10, 10)),  # same gt, already taken: FP
        (0, 0.7, (19, 0, 29, 10)),  # claims the second gt
    ]
    tp, taken = ev.match_detections(dets, gts, iou_thresh=0.5)
    assert tp == [True, False, True]
    assert taken == [True, True]


def test_match_threshold_is_inclusive():
    gts = [gt(0, (0, 0, 10, 10))]
    dets = [(0, 0.9, (0, 0, 10, 20))]  # IoU exactly 0.5
    tp, _ = ev.match_detections(dets, gts, iou_thresh=0.5)
    assert tp == [True]


@given(seed=st.integers(0, 2**16))
@settings(max_examples=60, deadline=None)
def test_match_agrees_with_bruteforce(seed):
    r = np.random.Generator(np.random.PCG64(seed))
    n_det, n_gt = int(r.integers(0, 8)), int(r.integers(0, 6))
    boxes = []
    for _ in range(n_det):
        x, y = r.uniform(0, 60, 2)
        w, h = r.uniform(4, 30, 2)
        boxes.append((float(x), float(y), float(x + w), float(y + h)))
    gt_boxes = []
    for _ in range(n_gt):
        x, y = r.uniform(0, 60, 2)
        w, h = r.uniform(4, 30, 2)
        gt_boxes.append((float(x), float(y), float(x + w), float(y + h)))
    scores = r.uniform(0, 1, n_det).tolist()
    dets = [(0, s, b) for s, b in zip(scores, boxes)]
    tp, _ = ev.match_detections(dets, [gt(0, b) for b in gt_boxes], iou_thresh=0.5)
    assert tp == oracles.match_bruteforce(boxes, scores, gt_boxes, 0.5)


# -- difficulty buckets ---------------------------------------------------------------


def test_difficulty_nesting_easy_subset_of_moderate_subset_of_hard():
    # every box that counts as easy must count as moderate, and so on
    r = np.random.Generator(np.random.PCG64(123))
    for _ in range(300):
        g = gt(
            "Car",
            (0.0, 0.0, 10.0, float(r.uniform(5, 60))),
            trunc=float(r.uniform(0, 1)),
            occ=int(r.integers(0, 4)),
        )
        buckets = ev.difficulty_of(g)
        if "easy" in buckets:
            assert "moderate" in buckets
        if "moderate" in buckets:
            assert "hard" in buckets


def test_difficulty_thresholds():
    # 40 px tall, fully visible: easy; heavy occlusion demotes it
    assert ev.difficulty_of(gt("Car", (0, 0, 20, 40))) == {"easy", "moderate", "hard"}
    assert ev.difficulty_of(gt("Car", (0, 0, 20, 40), occ=1)) == {"moderate", "hard"}
    assert ev.difficulty_of(gt("Car", (0, 0, 20, 40), occ=2)) == {"hard"}
    assert ev.difficulty_of(gt("Car", (0, 0, 20, 30))) == {"moderate", "hard"}
    assert ev.difficulty_of(gt("Car", (0, 0, 20, 24))) == set()


# -- whole-set evaluation ----------------------------------------------------------------


def test_evaluate_hand_worked_three_images():
    gts = {
        "a": [gt(0, (0, 0, 20, 20)), gt(1, (40, 40, 60, 60))],
        "b": [gt(0, (10, 10, 30, 30))],
        "c": [],
    }
    dets = {
        "a": [(0, 0.9, (1, 1, 21, 21)), (1, 0.8, (40, 40, 60, 60))],
        "b": [(0, 0.7, (11, 11, 31, 31)), (0, 0.3, (100, 100, 120, 120))],
        "c": [(1, 0.6, (0, 0, 10, 10))],
    }
    result = ev.evaluate(dets, gts, ev.voc_config(classes=(0, 1)))
    by_cls = {r.class_id: r for r in result.per_class}
    assert by_cls[0].num_gt == 2
    assert by_cls[0].ap == pytest.approx(1.0)  # both found; the far FP ranks last
    # class 1: one gt found perfectly, one FP on the empty image at lower score
    assert by_cls[1].ap == pytest.approx(1.0)
    assert result.mean_ap == pytest.approx(1.0)


def test_evaluate_perfect_detector_scores_full_map():
    r = np.random.Generator(np.random.PCG64(7))
    gts, dets = {}, {}
    for img in range(4):
        rows = []
        for _ in range(3):
            x, y = r.uniform(0, 400, 2)
            w, h = r.uniform(20, 80, 2)
            rows.append(gt(int(r.integers(0, 3)), (x, y, x + w, y + h)))
        gts[img] = rows
        dets[img] = [(g.class_id, float(r.uniform(0.5, 1.0)), g.bbox) for g in rows]
    result = ev.evaluate(dets, gts, ev.voc_config(classes=(0, 1, 2)))
    assert result.mean_ap == pytest.approx(1.0)


def test_evaluate_excludes_classes_without_ground_truth():
    gts = {0: [gt(0, (0, 0, 20, 20))]}
    dets = {0: [(0, 0.9, (0, 0, 20, 20)), (2, 0.8, (50, 50, 70, 70))]}
    result = ev.evaluate(dets, gts, ev.voc_config(classes=(0, 2)))
    by_cls = {r.class_id: r for r in result.per_class}
    assert not by_cls[2].valid
    assert result.mean_ap == pytest.approx(1.0)  # mean over class 0 only


def test_evaluate_dont_care_regions_absorb_detections():
    gts = {0: [gt(0, (0, 0, 20, 20)), gt(ev.DONT_CARE, (100, 100, 140, 140))]}
    hit_dc = (0, 0.8, (101, 101, 139, 139))
    dets = {0: [(0, 0.9, (0, 0, 20, 20)), hit_dc]}
    with_dc = ev.evaluate(dets, gts, ev.voc_config(classes=(0,)))
    assert with_dc.per_class[0].ap == pytest.approx(1.0)
    # the same detection against no DontCare region is a plain FP
    gts_plain = {0: [gt(0, (0, 0, 20, 20))]}
    without = ev.evaluate(dets, gts_plain, ev.voc_config(classes=(0,)))
    assert without.per_class[0].ap == pytest.approx(1.0)  # FP ranks below the TP
    # but it does lower precision at the second rank
    assert without.per_class[0].precision[-1] == pytest.approx(0.5)
    assert with_dc.per_class[0].precision[-1] == pytest.approx(1.0)


def test_evaluate_derives_classes_from_ground_truth():
    gts = {0: [gt("Car", (0, 0, 20, 20)), gt(ev.DONT_CARE, (50, 50, 60, 60))]}
    dets = {0: [("Car", 0.9, (0, 0, 20, 20))]}
    result = ev.evaluate(dets, gts, ev.EvalConfig(difficulty="all"))
    assert [r.class_id for r in result.per_class] == ["Car"]


def test_kitti_config_moderate_filters_small_boxes():
    # a 30 px box counts for moderate KITTI evaluation only as ignored gt
    gts = {0: [gt("Car", (0, 0, 20, 40)), gt("Car", (50, 0, 70, 24))]}
    dets = {0: [("Car", 0.9, (0, 0, 20, 40)), ("Car", 0.8, (50, 0, 70, 24))]}
    cfg = ev.kitti_config("moderate")
    result = ev.evaluate(dets, gts, cfg)
    car = [r for r in result.per_class if r.class_id == "Car"][0]
    assert car.num_gt == 1  # the 24 px box is outside every bucket
    assert car.ap == pytest.approx(1.0)  # its detection is ignored, not an FP


def test_kitti_config_uses_class_specific_thresholds():
    cfg = ev.kitti_config()
    assert cfg.threshold_for("Car") == pytest.approx(0.7)
    assert cfg.threshold_for("Pedestrian") == pytest.approx(0.5)
    assert cfg.threshold_for("Cyclist") == pytest.approx(0.5)


# -- report formatting ----------------------------------------------------------------


def test_format_ap_table_layout():
    gts = {0: [gt("Car", (0, 0, 20, 40))]}
    dets = {0: [("Car", 0.9, (0, 0, 20, 40))]}
    result = ev.evaluate(dets, gts, ev.EvalConfig(classes=("Car", "Cyclist"), difficulty="all"))
    text = ev.format_ap_table(result)
    lines = text.splitlines()
    assert lines[0] == "difficulty: all"
    assert lines[1].split() == ["class", "AP%", "gts"]
    assert "Car" in lines[2] and "100.0000" in lines[2]
    assert "Cyclist" in lines[3] and "(no gt)" in lines[3]
    assert lines[4].startswith("mAP")
    assert text.endswith("\n")


def test_pr_csv_layout():
    gts = {0: [gt(0, (0, 0, 20, 20))]}
    dets = {0: [(0, 0.9, (0, 0, 20, 20)), (0, 0.5, (100, 100, 120, 120))]}
    result = ev.evaluate(dets, gts, ev.voc_config(classes=(0,)))
    csv = ev.pr_csv(result.per_class[0])
    lines = csv.splitlines()
    assert lines[0] == "recall,precision"
    assert lines[1] == "1.000000,1.000000"
    assert lines[2] == "1.000000,0.500000"
