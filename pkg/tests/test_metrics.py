import json

import numpy as np
import pytest

from geco.errors import EmptyDataset
from geco.metrics import COCO_THRESHOLDS, average_precision, count_errors, evaluate

from oracles import brute_ap


def test_count_errors_examples():
    assert count_errors([3, 5], [4, 4]) == (1.0, 1.0)
    assert count_errors([2, 7], [2, 7]) == (0.0, 0.0)
    assert count_errors([0], [10]) == (10.0, 10.0)
    with pytest.raises(EmptyDataset):
        count_errors([], [])


def test_count_errors_accepts_detection_lists():
    assert count_errors([[1, 2, 3]], [[0, 0]]) == (1.0, 1.0)


GT = [0.0, 0.0, 10.0, 10.0]


def test_ap_examples():
    # IoU([0,0,10,10], [0,0,10,6]) = 0.6
    assert average_precision([[([0, 0, 10, 6], 0.9)]], [[GT]], [0.5]) == pytest.approx(1.0)
    # IoU = 0.4
    assert average_precision([[([0, 0, 10, 4], 0.9)]], [[GT]], [0.5]) == 0.0
    preds = [[([0, 0, 10, 6], 0.9), ([0, 0, 10, 7], 0.8)]]
    assert average_precision(preds, [[GT]], [0.5]) == pytest.approx(1.0)
    with pytest.raises(EmptyDataset):
        average_precision([], [], [0.5])


def random_scene(rng):
    n_img = int(rng.integers(1, 4))
    preds, gts = [], []
    budget = 6
    for _ in range(n_img):
        ng = int(rng.integers(0, min(3, budget) + 1))
        budget -= ng
        xy = rng.uniform(0, 20, size=(ng, 2))
        g = np.concatenate([xy, xy + rng.uniform(3, 8, size=(ng, 2))], 1)
        np_ = int(rng.integers(0, 5))
        dets = []
        for _ in range(np_):
            if ng and rng.random() < 0.7:
                base = g[rng.integers(ng)]
                box = base + rng.normal(scale=1.5, size=4)
                box[2:] = np.maximum(box[2:], box[:2] + 0.5)
            else:
                xy = rng.uniform(0, 20, size=2)
                box = np.concatenate([xy, xy + rng.uniform(3, 8, size=2)])
            dets.append((box, float(rng.integers(0, 5) / 4)))
        preds.append(dets)
        gts.append(g)
    return preds, gts


def test_ap_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        preds, gts = random_scene(rng)
        for thr in (0.5, 0.75):
            assert average_precision(preds, gts, [thr]) == pytest.approx(brute_ap(preds, gts, thr), abs=1e-9)


def test_ap_invariant_to_monotone_score_transform():
    rng = np.random.default_rng(1)
    for _ in range(100):
        preds, gts = random_scene(rng)
        moved = [[(b, np.exp(3 * s) - 7) for b, s in dets] for dets in preds]
        assert average_precision(moved, gts, COCO_THRESHOLDS) == pytest.approx(
            average_precision(preds, gts, COCO_THRESHOLDS), abs=1e-12)


def test_evaluate_reports():
    boxes = [np.array([[0, 0, 4, 4], [10, 10, 15, 15.0]]), np.array([[2, 2, 9, 9.0]])]
    perfect = [[(b, 1.0) for b in g] for g in boxes]
    rep = evaluate(perfect, boxes)
    assert (rep.mae, rep.rmse, rep.ap, rep.ap50) == (0.0, 0.0, 1.0, 1.0)
    empty = evaluate([[], []], boxes)
    assert empty.ap == 0.0 and empty.mae == pytest.approx(1.5)
    assert set(json.loads(rep.to_json())) >= {"mae", "rmse", "ap", "ap50"}


def test_evaluate_random_invariants():
    rng = np.random.default_rng(2)
    for _ in range(100):
        preds, gts = random_scene(rng)
        rep = evaluate(preds, gts)
        assert rep.mae <= rep.rmse + 1e-12
        assert rep.ap <= rep.ap50 + 1e-12
        assert rep.mae == pytest.approx(np.mean([p["abs_err"] for p in rep.per_image]))
