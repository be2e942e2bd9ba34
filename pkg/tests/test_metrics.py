import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import average_precision_score

from morphseg.metrics import (
    CSV_COLUMNS,
    ConfusionCounts,
    ap_thresholds,
    average_precision,
    confusion,
    evaluate,
    miou,
    miou_thresholds,
    scores,
)
from oracles import ap_loop, confusion_loop, jaccard_at

counts = st.builds(ConfusionCounts, *(st.integers(0, 10_000),) * 4)


def test_confusion_identity_and_complement():
    gt = (np.random.default_rng(0).random((4, 4, 4)) > 0.5).astype(float)
    c = confusion(gt, gt)
    assert c.fp == c.fn == 0
    c = confusion(1 - gt, gt)
    assert c.tp == c.tn == 0
    assert c.total == 64


def test_confusion_shape_mismatch():
    with pytest.raises(ValueError):
        confusion(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


def test_confusion_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(200):
        p, g = rng.random((4, 4, 4)) > 0.5, rng.random((4, 4, 4)) > 0.3
        c = confusion(p, g)
        assert (c.tp, c.fp, c.tn, c.fn) == confusion_loop(p, g)


def test_scores_single_tp():
    s = scores(ConfusionCounts(1, 0, 0, 0))
    assert s.f1 == s.ji == s.dice == s.sensitivity == 1
    assert s.degenerate == ["specificity"] and s.specificity == 0


def test_scores_hand_values():
    s = scores(ConfusionCounts(tp=2, fp=1, tn=0, fn=1))
    assert s.ji == 0.5
    assert s.dice == pytest.approx(4 / 6)


def test_scores_all_degenerate():
    s = scores(ConfusionCounts(0, 0, 0, 0))
    assert s.f1 == s.ji == s.dice == s.sensitivity == s.specificity == 0
    assert set(s.degenerate) == {"precision", "sensitivity", "specificity", "f1", "ji", "dice"}


def test_f1_equals_dice_sweep():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        tp, fp, tn, fn = (int(v) for v in rng.integers(0, 1000, size=4))
        s = scores(ConfusionCounts(tp, fp, tn, fn))
        assert s.f1 == pytest.approx(s.dice, rel=1e-12, abs=0)


@settings(max_examples=200)
@given(counts)
def test_scores_in_unit_interval_and_symmetric(c):
    s = scores(c)
    for v in (s.f1, s.sensitivity, s.specificity, s.ji, s.dice):
        assert 0 <= v <= 1
    swapped = scores(ConfusionCounts(c.tp, c.fn, c.tn, c.fp))
    assert swapped.ji == s.ji and swapped.dice == s.dice


# --- threshold sweeps ------------------------------------------------------


def test_ap_binary_scores():
    gt = (np.random.default_rng(3).random((4, 4, 4)) > 0.6).astype(float)
    assert average_precision(gt, gt) == 1.0
    assert miou(gt, gt) == 1.0


def test_ap_requires_foreground():
    with pytest.raises(ValueError, match="no foreground"):
        average_precision(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        miou(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)))


def test_ap_chance_level():
    rng = np.random.default_rng(4)
    s = rng.random(100_000)
    gt = rng.random(100_000) < 0.5
    assert abs(average_precision(s, gt) - gt.mean()) <= 0.02


def test_ap_eight_voxel_hand_case():
    s = np.array([0.95, 0.85, 0.7, 0.6, 0.45, 0.3, 0.2, 0.05])
    gt = np.array([1, 0, 1, 1, 0, 0, 1, 0])
    got = average_precision(s, gt)
    assert got == pytest.approx(ap_loop(s, gt, ap_thresholds()), abs=1e-12)
    # every pair of scores is separated by a grid threshold, so the grid AP is the exact AP
    assert got == pytest.approx(average_precision_score(gt, s), abs=1e-12)
    assert got == pytest.approx((1 + 2 / 3 + 3 / 4 + 4 / 7) / 4, abs=1e-12)


def test_ap_and_miou_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(30):
        s = rng.random((4, 4, 4))
        gt = rng.random((4, 4, 4)) > 0.5
        if not gt.any():
            continue
        assert average_precision(s, gt) == pytest.approx(ap_loop(s, gt, ap_thresholds()), abs=1e-12)
        want = np.mean([jaccard_at(s, gt, t) for t in miou_thresholds()])
        assert miou(s, gt) == pytest.approx(want, abs=1e-12)


def test_miou_constant_half():
    gt = np.zeros((4, 4, 4))
    gt[:2] = 1
    # 49 thresholds below 0.5 see everything predicted, the rest see nothing
    assert miou(np.full(gt.shape, 0.5), gt) == pytest.approx(49 / 99 * 0.5)


def test_rank_preserving_permutation_invariance():
    rng = np.random.default_rng(6)
    s = rng.random(500)
    gt = rng.random(500) > 0.4
    # reassign the same multiset of values in the same rank order to a shuffled layout
    perm = rng.permutation(500)
    s2, gt2 = s[perm], gt[perm]
    assert average_precision(s2, gt2) == average_precision(s, gt)
    assert miou(s2, gt2) == miou(s, gt)


def test_evaluate_report(tmp_path):
    rng = np.random.default_rng(7)
    gt = (rng.random((4, 6, 6)) > 0.7).astype(np.float32)
    s = np.clip(gt * 0.7 + rng.random(gt.shape) * 0.4, 0, 1)
    rep = evaluate(s, gt)
    assert rep.f1 == pytest.approx(rep.dice, rel=1e-12)
    assert all(0 <= v <= 1 for v in rep.row())
    data = json.loads(rep.to_json(tmp_path / "r.json"))
    assert data["ap_thresholds"] == 256 and data["miou_thresholds"] == 99
    rep.to_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert tuple(rows[0]) == CSV_COLUMNS == ("AP", "F1", "Sensitivity", "Specificity", "JI", "DICE", "mIoU")
    assert float(rows[1][5]) == pytest.approx(rep.dice, abs=1e-6)
