import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from mmfa.errors import UndefinedMetricError
from mmfa.metrics import (MetricReport, aupro, auroc, auroc_trapezoid, integrate_to_limit,
                          p_auroc, pro_curve, report_csv, summarize)


def pairwise_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def sweep_pro_oracle(maps, gts):
    """PRO/FPR at every distinct threshold, evaluated one threshold at a time."""
    maps = np.stack(maps)
    gts = np.stack(gts).astype(bool)
    comps = []
    for i in range(len(gts)):
        lab, n = ndimage.label(gts[i], structure=np.ones((3, 3)))
        comps += [(i, lab == j) for j in range(1, n + 1)]
    pts = [(0.0, 0.0)]
    for t in np.unique(maps)[::-1]:
        pred = maps >= t
        fpr = (pred & ~gts).sum() / (~gts).sum()
        pro = np.mean([pred[i][c].sum() / c.sum() for i, c in comps])
        pts.append((fpr, pro))
    return np.array(pts)


def oracle_aupro(maps, gts, limit):
    curve = sweep_pro_oracle(maps, gts)
    area = 0.0
    for (x0, y0), (x1, y1) in zip(curve[:-1], curve[1:]):
        if x0 >= limit:
            break
        if x1 > limit:
            y1 = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
            x1 = limit
        area += (x1 - x0) * (y0 + y1) / 2
    return area / limit


def test_auroc_worked_example():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auroc_perfect_and_single_class():
    assert auroc([0.1, 0.2, 0.9, 0.95], [0, 0, 1, 1]) == 1.0
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [1, 1])


def test_auroc_ties_count_half():
    assert auroc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5


@given(st.lists(st.integers(0, 6), min_size=2, max_size=30), st.data())
@settings(max_examples=150, deadline=None)
def test_auroc_matches_pairwise(raw, data):
    labels = data.draw(st.lists(st.booleans(), min_size=len(raw), max_size=len(raw)))
    if all(labels) or not any(labels):
        return
    s = np.array(raw, dtype=float) / 7
    assert abs(auroc(s, labels) - pairwise_auroc(s, labels)) <= 1e-12
    assert abs(auroc_trapezoid(s, labels) - pairwise_auroc(s, labels)) <= 1e-12


@given(st.lists(st.integers(-50, 50), min_size=4, max_size=25, unique=True))
@settings(max_examples=80, deadline=None)
def test_auroc_monotone_invariance_and_flip(s):
    s = np.array(s) / 10.0
    labels = np.arange(len(s)) % 2 == 0
    a = auroc(s, labels)
    assert auroc(np.exp(s), labels) == pytest.approx(a, abs=1e-12)
    assert a + auroc(-s, labels) == pytest.approx(1.0, abs=1e-12)


def test_p_auroc_cases():
    rng = np.random.default_rng(3)
    gt = np.zeros((4, 4), bool)
    gt[1:3, 1:3] = True
    assert p_auroc([gt.astype(float)], [gt]) == 1.0
    assert p_auroc([np.ones((4, 4))], [gt]) == 0.5
    maps = [rng.random((4, 4)) for _ in range(2)]
    gts = [gt, np.zeros((4, 4), bool)]
    flat_s = np.concatenate([m.ravel() for m in maps])
    flat_y = np.concatenate([g.ravel() for g in gts])
    assert p_auroc(maps, gts) == pytest.approx(pairwise_auroc(flat_s, flat_y), abs=1e-12)


def test_p_auroc_restricts_to_foreground():
    gt = np.zeros((4, 4), bool)
    gt[0, 0] = True
    fg = np.zeros((4, 4), bool)
    fg[:2, :2] = True
    m = np.zeros((4, 4))
    m[0, 0] = 1.0
    m[3, 3] = 5.0  # background pixel with a huge score is ignored
    assert p_auroc([m], [gt], [fg]) == 1.0
    assert p_auroc([m], [gt]) < 1.0


def test_aupro_perfect_is_exactly_one():
    gt = np.zeros((6, 6), bool)
    gt[1:3, 1:3] = True
    gt[4:6, 3:6] = True
    for limit in (0.05, 0.3, 1.0):
        assert aupro([gt.astype(float)], [gt], limit) == 1.0


def test_aupro_inverted_is_zero():
    gt = np.zeros((6, 6), bool)
    gt[2:4, 2:4] = True
    assert aupro([1.0 - gt], [gt], 0.3) == pytest.approx(0.0, abs=1e-12)


def test_aupro_two_component_fixture_matches_sweep():
    rng = np.random.default_rng(11)
    gt = np.zeros((6, 6), bool)
    gt[0:2, 0:2] = True
    gt[3:6, 4:6] = True
    m = rng.random((6, 6)) + 0.6 * gt
    assert aupro([m], [gt], 0.3) == pytest.approx(oracle_aupro([m], [gt], 0.3), abs=1e-12)


def test_aupro_eight_connectivity():
    gt = np.zeros((5, 5), bool)
    gt[1, 1] = gt[2, 2] = True  # diagonal neighbours form one component
    m = np.zeros((5, 5))
    m[1, 1] = 1.0
    fpr, pro = pro_curve([m], [gt])
    assert pro[1] == 0.5  # half of the single component, not one of two components


def test_aupro_undefined_without_anomalies():
    with pytest.raises(UndefinedMetricError):
        aupro([np.zeros((3, 3))], [np.zeros((3, 3), bool)])


@given(st.integers(0, 10_000), st.floats(0.01, 1.0))
@settings(max_examples=40, deadline=None)
def test_aupro_integral_monotone_in_limit(seed, limit):
    rng = np.random.default_rng(seed)
    gt = rng.random((6, 6)) < 0.25
    gt[0, 0] = True
    gt[5, 5] = False
    m = np.round(rng.random((6, 6)), 1)
    fpr, pro = pro_curve([m], [gt])
    a = integrate_to_limit(fpr, pro, limit)
    b = integrate_to_limit(fpr, pro, min(1.0, limit + 0.05))
    assert b >= a - 1e-15


def test_report_csv_layout():
    per = {"dome": {"i_auroc": 0.9, "p_auroc": 0.8, "aupro": 0.7},
           "tile": {"i_auroc": 0.7, "p_auroc": 0.6, "aupro": 0.5}}
    rep = summarize(per, 0.3)
    assert isinstance(rep, MetricReport)
    lines = report_csv(rep).splitlines()
    assert lines[0] == "metric,dome,tile,mean"
    assert lines[1] == "I-AUROC,0.900000,0.700000,0.800000"
    assert lines[3].startswith("AUPRO@0.3,")
