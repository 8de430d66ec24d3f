import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from docglare.evaluate import (DEFAULT_THRESHOLD, THRESHOLDS, EvalReport, bench, prf,
                               prf_from_counts, sweep, threshold_heatmap)

grids = arrays(np.float64, (5, 6), elements=st.floats(0, 1))
labels = arrays(np.uint8, (5, 6), elements=st.integers(0, 1))


def test_threshold_rules():
    assert DEFAULT_THRESHOLD == 0.9
    assert threshold_heatmap(np.array([0.95, 0.5]), 0.9).tolist() == [1, 0]
    assert not threshold_heatmap(np.ones((3, 3)), 1.0).any()
    assert threshold_heatmap(np.array([0.9]), 0.9).tolist() == [0]
    with pytest.raises(ValueError):
        threshold_heatmap(np.zeros(2), 1.5)
    assert len(THRESHOLDS) == 21 and THRESHOLDS[1] == 0.05 and THRESHOLDS[-1] == 1.0


def test_prf_counts():
    t = np.array([1, 0, 1, 1])
    assert prf(t, t) == (1.0, 1.0, 1.0)
    assert prf_from_counts(3, 1, 1) == (0.75, 0.75, 0.75)
    assert prf_from_counts(0, 0, 0) == (1.0, 1.0, 1.0)
    assert prf_from_counts(0, 0, 2) == (0.0, 0.0, 0.0)
    assert prf_from_counts(0, 3, 0) == (0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        prf(np.zeros(3), np.zeros(4))


@given(labels, labels)
@settings(max_examples=100)
def test_prf_swap_symmetry_and_bounds(a, b):
    p, r, f = prf(a, b)
    assert 0 <= min(p, r, f) and max(p, r, f) <= 1
    if a.any() and b.any():
        # the empty-set conventions are asymmetric, so only compare nonempty pairs
        p2, r2, f2 = prf(b, a)
        assert (p, r) == (r2, p2) and f == f2
    if p + r > 0:
        assert abs(f - 2 * p * r / (p + r)) < 1e-12


@given(grids, labels)
@settings(max_examples=100)
def test_sweep_rows_recomputed_and_recall_monotone(h, t):
    rep = sweep(h, t)
    for row in rep.rows:
        assert (row.precision, row.recall, row.f_measure) == prf(h > row.threshold, t)
    recalls = [r.recall for r in rep.rows]
    assert all(b <= a for a, b in zip(recalls, recalls[1:]))


def test_perfect_predictor_sweep():
    t = np.zeros((4, 4), np.uint8)
    t[1:3, 1:3] = 1
    h = np.where(t == 1, 0.83, 0.12)
    rep = sweep(h, t)
    for row in rep.rows:
        if 0.12 <= row.threshold < 0.83:
            assert row.f_measure == 1.0
    assert rep.best.threshold == 0.15 and rep.best_f == 1.0


def test_sweep_micro_average_over_images():
    h = [np.array([[0.9, 0.1]]), np.array([[0.8], [0.7]])]
    t = [np.array([[1, 0]]), np.array([[0], [1]])]
    row = sweep(h, t).at(0.75)
    assert (row.precision, row.recall) == (0.5, 0.5)


def test_report_serialization(tmp_path):
    rng = np.random.default_rng(0)
    rep = sweep(rng.random((6, 6)), rng.integers(0, 2, (6, 6)))
    rep.parameter_count = 123
    rep.timings = {"feature_ms": 1.5, "forward_ms": 2.0, "total_ms": 3.5}
    rep.environment = "test"
    back = EvalReport.from_json(rep.to_json())
    assert back == rep
    assert rep.to_csv().splitlines()[0] == "threshold,precision,recall,f_measure"
    assert len(rep.to_csv().splitlines()) == 22
    assert "best F" in rep.to_table()


def test_bench_runs_and_determinism():
    img = np.arange(100.0)
    res = bench(lambda x: x * 2, lambda f: f.sum(), img, repeats=3)
    assert len(res.runs) == 3
    for r in res.runs:
        assert r["total_ms"] >= r["feature_ms"] + r["forward_ms"] - 1e-9
    assert res.total_ms >= res.feature_ms + res.forward_ms - 1e-9
    assert res.output == img.sum() * 2
    with pytest.raises(ValueError):
        bench(lambda x: x, lambda f: f, img, repeats=2)
    counter = iter(range(10))
    with pytest.raises(RuntimeError):
        bench(lambda x: x, lambda f: next(counter), img, repeats=3)
