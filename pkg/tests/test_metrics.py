import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from oracles import confusion_counts, dice_pixels, f1_pairs, miou_from_counts
from wsseg.errors import DataError, RangeError, ShapeError, UndefinedMetricError
from wsseg.metrics import (ConfusionMatrix, EvalReport, accumulate, dice, evaluate_split, miou,
                           multilabel_f1, render_table)


def label_pair(k, side=8, ignore=True):
    values = st.integers(0, k - 1)
    gt_values = st.one_of(values, st.just(255)) if ignore else values
    return st.tuples(hnp.arrays(np.int64, (side, side), elements=values),
                     hnp.arrays(np.int64, (side, side), elements=gt_values))


def test_perfect_prediction_offdiagonal_zero():
    g = np.array([[0, 1, 1, 0]] * 4)
    cm = accumulate(ConfusionMatrix.empty(2), g, g)
    assert cm.counts[0, 1] == cm.counts[1, 0] == 0


def test_all_ignore_unchanged():
    cm = ConfusionMatrix.empty(3)
    out = accumulate(cm, np.zeros((4, 4), int), np.full((4, 4), 255))
    assert out == cm


def test_accumulate_does_not_modify_input():
    cm = ConfusionMatrix.empty(2)
    accumulate(cm, np.ones((2, 2), int), np.ones((2, 2), int))
    assert cm.counts.sum() == 0


def test_label_range():
    with pytest.raises(RangeError):
        accumulate(ConfusionMatrix.empty(2), np.full((2, 2), 2), np.zeros((2, 2), int))
    with pytest.raises(ShapeError):
        accumulate(ConfusionMatrix.empty(2), np.zeros((2, 3), int), np.zeros((2, 2), int))


@given(label_pair(4))
def test_counts_match_oracle(pair):
    pred, gt = pair
    cm = accumulate(ConfusionMatrix.empty(4), pred, gt)
    assert cm.counts.tolist() == confusion_counts(pred, gt, 4)


def test_miou_half_overlap():
    # gt all class 1; pred class 1 on two pixels, background on two
    gt = np.ones((2, 2), int)
    pred = np.array([[1, 1], [0, 0]])
    cm = accumulate(ConfusionMatrix.empty(2), pred, gt)
    iou = cm.iou_per_class()
    assert iou[1] == 0.5 and iou[0] == 0.0
    assert miou(cm) == 0.25


def test_miou_perfect_and_disjoint():
    g = np.array([[0, 1], [1, 0]])
    assert miou(accumulate(ConfusionMatrix.empty(2), g, g)) == 1.0
    cm = accumulate(ConfusionMatrix.empty(2), 1 - g, g)
    assert cm.iou_per_class()[1] == 0.0


def test_miou_undefined():
    with pytest.raises(UndefinedMetricError):
        miou(ConfusionMatrix.empty(3))


def test_absent_class_excluded():
    g = np.zeros((3, 3), int)
    cm = accumulate(ConfusionMatrix.empty(3), g, g)
    assert np.isnan(cm.iou_per_class()[2])
    assert miou(cm) == 1.0


@given(label_pair(4), label_pair(4))
def test_additivity(a, b):
    whole = accumulate(ConfusionMatrix.empty(4), np.concatenate([a[0], b[0]]), np.concatenate([a[1], b[1]]))
    parts = accumulate(ConfusionMatrix.empty(4), *a) + accumulate(ConfusionMatrix.empty(4), *b)
    assert whole == parts


@given(label_pair(3, ignore=False), st.permutations(range(3)))
def test_miou_permutation_equivariant(pair, perm):
    pred, gt = pair
    perm = np.array(perm)
    a = miou(accumulate(ConfusionMatrix.empty(3), pred, gt))
    b = miou(accumulate(ConfusionMatrix.empty(3), perm[pred], perm[gt]))
    assert a == pytest.approx(b, abs=1e-12)


@given(label_pair(4))
def test_self_miou_is_one(pair):
    _, gt = pair
    known = gt != 255
    if not known.any():
        return
    pred = np.where(known, gt, 0)
    assert miou(accumulate(ConfusionMatrix.empty(4), pred, gt)) == 1.0


def test_dice_cases():
    z = np.zeros((4, 4), np.uint8)
    assert dice(z, z) == 1.0
    m = z.copy()
    m[:2] = 1
    assert dice(m, m) == 1.0
    pred, gt = z.copy(), z.copy()
    pred.flat[:2] = 1
    gt.flat[:4] = 1
    assert dice(pred, gt) == pytest.approx(2 * 2 / (2 + 4), abs=1e-12)
    with pytest.raises(ShapeError):
        dice(z, np.zeros((3, 4)))


@given(hnp.arrays(np.uint8, (6, 6), elements=st.integers(0, 1)),
       hnp.arrays(np.uint8, (6, 6), elements=st.integers(0, 1)))
def test_dice_symmetric_and_bounded(a, b):
    d = dice(a, b)
    assert d == dice(b, a) == pytest.approx(dice_pixels(a, b), abs=1e-12)
    assert 0.0 <= d <= 1.0


def test_f1_cases():
    y = np.array([[1, 0], [0, 1]])
    assert multilabel_f1(y.astype(float), y) == 1.0
    assert multilabel_f1(np.zeros((2, 2)), y) == 0.0
    # 8 TP, 2 FP, 2 FN
    labels = np.array([1] * 10 + [0] * 2)[:, None]
    probs = np.array([1] * 8 + [0] * 2 + [1] * 2, float)[:, None]
    assert multilabel_f1(probs, labels) == pytest.approx(0.8, abs=1e-12)
    with pytest.raises(ShapeError):
        multilabel_f1(np.zeros((2, 3)), y)


@given(hnp.arrays(np.float64, (7, 3), elements=st.floats(0, 1)),
       hnp.arrays(np.int64, (7, 3), elements=st.integers(0, 1)), st.floats(0.05, 0.95))
def test_f1_matches_oracle(p, y, t):
    assert multilabel_f1(p, y, t) == pytest.approx(f1_pairs(p, y, t), abs=1e-12)


def test_all_healthy_split():
    gts = {f"i{n}": np.zeros((4, 4), int) for n in range(3)}
    preds = {k: np.zeros((4, 4), int) for k in gts}
    rep = evaluate_split(preds, gts, "all")
    assert rep.dice_mean == 1.0
    with pytest.raises(UndefinedMetricError):
        evaluate_split(preds, gts, "positive_only")


def test_id_mismatch():
    with pytest.raises(DataError):
        evaluate_split({"a": np.zeros((2, 2), int)}, {"b": np.zeros((2, 2), int)})


def test_mixed_split_matches_bruteforce():
    rng = np.random.default_rng(3)
    gts, preds = {}, {}
    for n in range(10):
        g = np.zeros((8, 8), int)
        if n % 3:
            y, x = rng.integers(0, 5, 2)
            g[y:y + 3, x:x + 3] = 1
        g[rng.random((8, 8)) < 0.05] = 255
        gts[f"i{n}"] = g
        preds[f"i{n}"] = (rng.random((8, 8)) < 0.2).astype(int)
    for mode in ("all", "positive_only"):
        rep = evaluate_split(preds, gts, mode)
        ids = [i for i in sorted(gts) if mode == "all" or ((gts[i] == 1).any())]
        counts = confusion_counts(np.concatenate([preds[i] for i in ids]), np.concatenate([gts[i] for i in ids]), 2)
        want, _ = miou_from_counts(counts)
        dices = [dice_pixels(np.where(gts[i] == 255, 0, preds[i]), np.where(gts[i] == 255, 0, gts[i])) for i in ids]
        assert rep.miou == pytest.approx(want, abs=1e-12)
        assert rep.dice_mean == pytest.approx(np.mean(dices), abs=1e-12)
        assert rep.n_images == len(ids)
        for v in (rep.miou, rep.miou_all, rep.dice_mean):
            assert 0.0 <= v <= 1.0


def test_report_json_and_table():
    g = np.array([[0, 1], [1, 1]])
    rep = evaluate_split({"a": g}, {"a": g}, "all")
    again = EvalReport.from_dict(json.loads(rep.to_json()))
    assert again == rep
    table = render_table({"step3": {"val": {"pos": rep, "all": rep}, "test": {"pos": None, "all": rep}}})
    lines = table.splitlines()
    assert "mIoU test pos." in lines[0] and "mIoU val all" in lines[0]
    assert len({len(line) for line in lines}) == 1
