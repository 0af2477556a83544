import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import set_iou_dice
from surgseg.metrics import (
    ConfusionMatrix,
    EmptyEvaluationError,
    accumulate,
    build_report,
    dice_per_class,
    iou_per_class,
    mean_dice,
    miou,
    write_report,
)


def test_accumulate_perfect_class1():
    cm = accumulate(ConfusionMatrix(3), np.ones((2, 2)), np.ones((2, 2)))
    expected = np.zeros((3, 3))
    expected[1, 1] = 4
    assert np.array_equal(cm.counts, expected)


def test_accumulate_all_ignored():
    cm = accumulate(ConfusionMatrix(2), np.zeros((3, 3)), np.full((3, 3), 255))
    assert cm.total == 0


def test_accumulate_tally():
    cm = accumulate(ConfusionMatrix(2), [[0, 1], [1, 1]], [[0, 0], [1, 1]])
    assert cm.counts.tolist() == [[1, 1], [0, 2]]


def test_accumulate_out_of_range():
    with pytest.raises(ValueError):
        accumulate(ConfusionMatrix(2), [[2]], [[0]])
    with pytest.raises(ValueError):
        accumulate(ConfusionMatrix(2), [[0]], [[3]])


def test_iou_from_tally():
    cm = ConfusionMatrix(2, [[1, 1], [0, 2]])
    assert iou_per_class(cm).tolist() == [0.5, 2 / 3]
    assert miou(cm) == pytest.approx(7 / 12)


def test_dice_from_tally():
    cm = ConfusionMatrix(2, [[1, 1], [0, 2]])
    d = dice_per_class(cm)
    assert d[1] == pytest.approx(0.8)
    iou = iou_per_class(cm)
    assert d[1] == pytest.approx(2 * iou[1] / (1 + iou[1]))


def test_perfect_and_undefined():
    gt = np.array([[0, 1], [1, 0]])
    cm = accumulate(ConfusionMatrix(4), gt, gt)
    iou = iou_per_class(cm)
    assert iou[0] == iou[1] == 1.0
    assert np.isnan(iou[2]) and np.isnan(iou[3])
    assert miou(cm) == mean_dice(cm) == 1.0


def test_empty_evaluation():
    with pytest.raises(EmptyEvaluationError):
        miou(ConfusionMatrix(3))


def test_exclude_background():
    cm = ConfusionMatrix(2, [[1, 1], [0, 2]])
    assert miou(cm, include_background=False) == pytest.approx(2 / 3)


@pytest.mark.parametrize("seed", range(50))
def test_matches_set_oracle(seed):
    rng = np.random.default_rng(seed)
    K = int(rng.integers(2, 5))
    H, W = rng.integers(1, 12, 2)
    gt = rng.integers(0, K, (H, W))
    gt[rng.random((H, W)) < 0.1] = 255
    pred = rng.integers(0, K, (H, W))
    cm = accumulate(ConfusionMatrix(K), pred, gt)
    iou, dice = iou_per_class(cm), dice_per_class(cm)
    for k in range(K):
        ri, rd = set_iou_dice(pred, gt, k)
        if ri is None:
            assert np.isnan(iou[k]) and np.isnan(dice[k])
        else:
            assert iou[k] == ri and dice[k] == rd


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dice_iou_identity(seed):
    rng = np.random.default_rng(seed)
    cm = ConfusionMatrix(4, rng.integers(0, 50, (4, 4)))
    iou, dice = iou_per_class(cm), dice_per_class(cm)
    ok = ~np.isnan(iou)
    assert np.all(np.abs(dice[ok] - 2 * iou[ok] / (1 + iou[ok])) < 1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_merge_then_score_equals_joint(seed):
    rng = np.random.default_rng(seed)
    a_pred, a_gt = rng.integers(0, 3, (2, 5, 6))
    b_pred, b_gt = rng.integers(0, 3, (2, 4, 6))
    sep = accumulate(ConfusionMatrix(3), a_pred, a_gt) + accumulate(ConfusionMatrix(3), b_pred, b_gt)
    joint = accumulate(ConfusionMatrix(3), np.concatenate([a_pred, b_pred]), np.concatenate([a_gt, b_gt]))
    assert np.array_equal(sep.counts, joint.counts)
    assert miou(sep) == miou(joint)


def test_merge_monoid():
    rng = np.random.default_rng(0)
    a, b, c = (ConfusionMatrix(3, rng.integers(0, 9, (3, 3))) for _ in range(3))
    zero = ConfusionMatrix(3)
    assert np.array_equal(((a + b) + c).counts, (a + (b + c)).counts)
    assert np.array_equal((a + b).counts, (b + a).counts)
    assert np.array_equal((a + zero).counts, a.counts)


def test_report_json_csv(tmp_path):
    cm = ConfusionMatrix(3, [[1, 1, 0], [0, 2, 0], [0, 0, 0]])
    rep = build_report(cm, ["bg", "liver", "needle"], config={"mode": "test"})
    assert rep["per_class"][2]["defined"] is False and rep["per_class"][2]["iou"] is None
    assert rep["miou"] == pytest.approx(7 / 12)
    j, c = write_report(rep, tmp_path / "report")
    assert json.loads(j.read_text())["config"] == {"mode": "test"}
    lines = c.read_text().splitlines()
    assert lines[0] == "id,class,IoU,Dice"
    assert lines[2].startswith("1,liver,0.6667,0.8000")
    assert lines[-1].startswith(",mean,0.5833")
