import math

import numpy as np
import pytest

from geco.maxima import extract_detections, filter_above_median, local_maxima_3x3

from oracles import brute_local_maxima


def test_single_peak():
    m = np.zeros((5, 5))
    m[2, 2] = 1.0
    assert local_maxima_3x3(m) == [((2, 2), 1.0)]


def test_constant_map_one_maximum():
    assert local_maxima_3x3(np.full((3, 3), 0.5)) == [((0, 0), 0.5)]


def test_two_peaks_ordered():
    m = np.zeros((5, 5))
    m[0, 0], m[4, 4] = 0.9, 0.8
    assert [loc for loc, _ in local_maxima_3x3(m)] == [(0, 0), (4, 4)]


def test_accepts_channel_axis():
    m = np.zeros((4, 4, 1))
    m[1, 2, 0] = 2.0
    assert local_maxima_3x3(m) == [((1, 2), 2.0)]


def test_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        h, w = rng.integers(1, 33, size=2)
        # quantised values create plateaus and ties
        m = rng.integers(0, 4, size=(h, w)) / 4.0
        assert local_maxima_3x3(m) == brute_local_maxima(m)


def test_filter_above_median_examples():
    mk = lambda scores: [((i, 0), s) for i, s in enumerate(scores)]
    assert [s for _, s in filter_above_median(mk([0.1, 0.5, 0.9]))] == [0.9]
    assert filter_above_median(mk([0.7, 0.7, 0.7])) == []
    assert filter_above_median(mk([0.3])) == []
    assert filter_above_median([]) == []
    # even count: median is the mean of the two middle values
    assert [s for _, s in filter_above_median(mk([0.1, 0.2, 0.4, 0.8]))] == [0.4, 0.8]


def test_filter_above_median_bound():
    rng = np.random.default_rng(1)
    for _ in range(300):
        n = int(rng.integers(0, 40))
        scores = rng.integers(0, 6, size=n) / 5.0
        kept = filter_above_median([((i, 0), float(s)) for i, s in enumerate(scores)])
        assert len(kept) <= math.ceil(n / 2)
        if n:
            assert all(s > np.median(scores) for _, s in kept)


def test_extract_detections_examples():
    bb = np.full((8, 8, 4), 0.1)
    assert extract_detections(np.zeros((8, 8)), bb, 0.5) == []
    m = np.zeros((8, 8))
    m[2, 2] = 0.9
    dets = extract_detections(m, bb, 0.5)
    assert len(dets) == 1 and dets[0].score == 0.9
    m[6, 6] = 0.3
    dets = extract_detections(m, bb, 0.5)
    assert len(dets) == 1
    np.testing.assert_allclose(dets[0].box, [4.5 - 1.6, 4.5 - 1.6, 4.5 + 1.6, 4.5 + 1.6])


def test_extract_above_one_is_empty():
    rng = np.random.default_rng(2)
    for _ in range(50):
        m = rng.random((10, 10))
        assert extract_detections(m, rng.random((10, 10, 4)), 1 + 1e-9) == []


def test_extract_drops_degenerate():
    m = np.zeros((4, 4))
    m[0, 0] = 1.0
    assert extract_detections(m, np.zeros((4, 4, 4)), 0.5) == []


@pytest.mark.parametrize("tau", [0.0, 0.5])
def test_extract_scores_at_least_tau(tau):
    rng = np.random.default_rng(3)
    m = rng.random((16, 16))
    for det in extract_detections(m, np.full((16, 16, 4), 0.05), tau):
        assert det.score >= tau
