"""Tests for recombination, metrics, confidence intervals, and fitted curves."""

import numpy as np
import pytest

from clogcd.decomposition import GranularityLevel
from clogcd.errors import ClogcdError
from clogcd.evaluation import (
    ConfidenceInterval,
    ConfusionMatrix,
    EvaluationRecord,
    METRICS_CSV_HEADER,
    confidence_interval,
    confusion,
    curve_points,
    metrics,
    polyfit_curve,
    recombine,
    recombine_batch,
    record_csv_row,
)

from oracles import normal_equation_polyfit, tally_confusion, tally_metrics


def _level(parent_map, level=2):
    return GranularityLevel(level=level, sublabel_count=len(parent_map),
                            assignments={}, parent_map=list(parent_map))


# ---------------------------------------------------------------------------
# recombine
# ---------------------------------------------------------------------------

def test_recombine_identity_at_level_one():
    lvl = _level([0, 1, 2], level=1)
    p = np.array([0.2, 0.5, 0.3])
    assert np.allclose(recombine(p, lvl), p)


def test_recombine_pairwise_sum():
    lvl = _level([0, 0, 1, 1])
    out = recombine(np.array([0.1, 0.2, 0.3, 0.4]), lvl)
    assert np.allclose(out, [0.3, 0.7])


def test_recombine_conserves_mass():
    rng = np.random.default_rng(0)
    lvl = _level([0, 0, 0, 1, 1, 2])
    for _ in range(50):
        p = rng.dirichlet(np.ones(6))
        out = recombine(p, lvl)
        assert abs(out.sum() - p.sum()) < 1e-9


def test_recombine_is_linear():
    rng = np.random.default_rng(1)
    lvl = _level([0, 1, 1, 2, 2, 2])
    for _ in range(20):
        p = rng.dirichlet(np.ones(6))
        q = rng.dirichlet(np.ones(6))
        a = rng.random()
        mixed = recombine(a * p + (1 - a) * q, lvl)
        assert np.allclose(mixed, a * recombine(p, lvl) + (1 - a) * recombine(q, lvl),
                           atol=1e-12)


def test_recombine_argmax_matches_brute_force():
    rng = np.random.default_rng(2)
    parent_map = [0, 0, 1, 1, 1, 2]
    lvl = _level(parent_map)
    for _ in range(100):
        p = rng.dirichlet(np.ones(6))
        sums = [sum(p[s] for s in range(6) if parent_map[s] == c) for c in range(3)]
        assert int(np.argmax(recombine(p, lvl))) == int(np.argmax(sums))


def test_recombine_length_mismatch():
    with pytest.raises(ClogcdError):
        recombine(np.ones(3) / 3, _level([0, 0, 1, 1]))


def test_recombine_batch_matches_single():
    rng = np.random.default_rng(3)
    lvl = _level([0, 0, 1, 2])
    probas = rng.dirichlet(np.ones(4), size=10)
    batch = recombine_batch(probas, lvl)
    assert batch.shape == (10, 3)
    for i in range(10):
        assert np.allclose(batch[i], recombine(probas[i], lvl), atol=1e-12)


# ---------------------------------------------------------------------------
# confusion
# ---------------------------------------------------------------------------

def test_confusion_perfect_is_diagonal():
    cm = confusion([0, 1, 2, 2], [0, 1, 2, 2], 3)
    assert np.array_equal(cm.counts, np.diag([1, 1, 2]))
    assert cm.total == 4


def test_confusion_all_predicted_zero_single_column():
    cm = confusion([0, 0, 0, 0], [0, 1, 2, 1], 3)
    assert np.array_equal(cm.counts[:, 0], [1, 2, 1])
    assert cm.counts[:, 1:].sum() == 0


def test_confusion_matches_tally_oracle():
    rng = np.random.default_rng(4)
    preds = rng.integers(0, 4, size=50)
    truth = rng.integers(0, 4, size=50)
    cm = confusion(preds, truth, 4)
    assert np.array_equal(cm.counts, tally_confusion(preds, truth, 4))


def test_confusion_row_sums_are_class_support():
    rng = np.random.default_rng(5)
    truth = rng.integers(0, 3, size=60)
    preds = rng.integers(0, 3, size=60)
    cm = confusion(preds, truth, 3)
    assert np.array_equal(cm.row_sums(), np.bincount(truth, minlength=3))


def test_confusion_rejects_out_of_range_and_mismatch():
    with pytest.raises(ClogcdError):
        confusion([0, 3], [0, 1], 3)
    with pytest.raises(ClogcdError):
        confusion([0, 1], [0], 3)


def test_confusion_matrix_validation():
    with pytest.raises(ClogcdError):
        ConfusionMatrix(np.array([[1, 2, 3]]))
    with pytest.raises(ClogcdError):
        ConfusionMatrix(np.array([[1, -1], [0, 2]]))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def test_metrics_perfect():
    rep = metrics(ConfusionMatrix(np.array([[5, 0], [0, 5]])))
    assert rep.accuracy == rep.precision == rep.recall == rep.f1 == 1.0


def test_metrics_worked_example():
    rep = metrics(ConfusionMatrix(np.array([[3, 1], [2, 4]])))
    assert rep.accuracy == pytest.approx(0.7)
    assert rep.precision == pytest.approx(0.7)
    assert rep.recall == pytest.approx((0.75 + 4 / 6) / 2)
    macro_p, macro_r = 0.7, (0.75 + 4 / 6) / 2
    assert rep.f1 == pytest.approx(2 * macro_p * macro_r / (macro_p + macro_r), rel=1e-12)
    assert abs(rep.f1 - 0.7046) < 1e-3


def test_metrics_empty_predicted_column_is_finite():
    rep = metrics(ConfusionMatrix(np.array([[4, 0, 0], [1, 0, 0], [2, 0, 0]])))
    for v in (rep.accuracy, rep.precision, rep.recall, rep.f1):
        assert np.isfinite(v) and 0.0 <= v <= 1.0


def test_metrics_empty_matrix_raises():
    with pytest.raises(ClogcdError):
        metrics(ConfusionMatrix(np.zeros((2, 2), dtype=int)))


def test_metrics_match_tally_oracle_on_random_cases():
    rng = np.random.default_rng(6)
    for _ in range(100):
        c = int(rng.integers(2, 6))
        n = int(rng.integers(5, 60))
        preds = rng.integers(0, c, size=n)
        truth = rng.integers(0, c, size=n)
        rep = metrics(confusion(preds, truth, c))
        acc, pr, re, f1 = tally_metrics(preds, truth, c)
        assert rep.accuracy == pytest.approx(acc, abs=1e-12)
        assert rep.precision == pytest.approx(pr, abs=1e-12)
        assert rep.recall == pytest.approx(re, abs=1e-12)
        assert rep.f1 == pytest.approx(f1, abs=1e-12)


def test_metrics_invariant_under_class_permutation():
    rng = np.random.default_rng(7)
    counts = rng.integers(0, 20, size=(4, 4))
    perm = rng.permutation(4)
    a = metrics(ConfusionMatrix(counts))
    b = metrics(ConfusionMatrix(counts[np.ix_(perm, perm)]))
    assert a.accuracy == pytest.approx(b.accuracy, abs=1e-12)
    assert a.precision == pytest.approx(b.precision, abs=1e-12)
    assert a.recall == pytest.approx(b.recall, abs=1e-12)
    assert a.f1 == pytest.approx(b.f1, abs=1e-12)


# ---------------------------------------------------------------------------
# confidence intervals
# ---------------------------------------------------------------------------

def test_ci_constant_sequence_is_degenerate():
    ci = confidence_interval([0.9] * 10, seed=0)
    assert ci.lower == pytest.approx(0.9, abs=1e-12)
    assert ci.upper == pytest.approx(0.9, abs=1e-12)


def test_ci_symmetric_values_center_on_mean():
    ci = confidence_interval([0.8, 1.0] * 10, seed=1)
    assert (ci.lower + ci.upper) / 2 == pytest.approx(0.9, abs=0.005)
    assert ci.lower <= 0.9 <= ci.upper


def test_ci_contains_sample_mean():
    rng = np.random.default_rng(8)
    for trial in range(10):
        vals = rng.normal(size=12)
        ci = confidence_interval(vals, seed=trial)
        assert ci.lower <= vals.mean() <= ci.upper


def test_ci_deterministic_per_seed():
    vals = [0.1, 0.5, 0.4, 0.9, 0.3]
    a = confidence_interval(vals, seed=3)
    b = confidence_interval(vals, seed=3)
    assert (a.lower, a.upper) == (b.lower, b.upper)


def test_ci_requires_two_values():
    with pytest.raises(ClogcdError):
        confidence_interval([0.5], seed=0)


def test_ci_ordering_enforced():
    with pytest.raises(ClogcdError):
        ConfidenceInterval(lower=0.9, upper=0.1)


# ---------------------------------------------------------------------------
# fitted curves
# ---------------------------------------------------------------------------

def test_polyfit_exact_cubic():
    x = np.arange(1.0, 8.0)
    coeffs = polyfit_curve(x ** 3, degree=3, x=x)
    assert np.allclose(coeffs, [0.0, 0.0, 0.0, 1.0], atol=1e-9)


def test_polyfit_constant_series():
    coeffs = polyfit_curve([0.42] * 6, degree=3)
    assert coeffs[0] == pytest.approx(0.42, abs=1e-9)
    assert np.allclose(coeffs[1:], 0.0, atol=1e-9)


def test_polyfit_matches_normal_equations_oracle():
    rng = np.random.default_rng(9)
    x = np.arange(1.0, 21.0)
    y = rng.normal(size=20)
    ours = polyfit_curve(y, degree=3, x=x)
    oracle = normal_equation_polyfit(x, y, 3)
    fitted_ours = curve_points(ours, x)
    v = np.vander(x, 4, increasing=True)
    fitted_oracle = v @ oracle
    assert np.allclose(fitted_ours, fitted_oracle, atol=1e-8)


def test_polyfit_residual_not_worse_than_lower_degree():
    rng = np.random.default_rng(10)
    x = np.arange(1.0, 13.0)
    y = rng.normal(size=12)
    res = {}
    for d in range(4):
        fit = curve_points(polyfit_curve(y, degree=d, x=x), x)
        res[d] = float(((fit - y) ** 2).sum())
    for d in range(3):
        assert res[3] <= res[d] + 1e-12


def test_polyfit_insufficient_points():
    with pytest.raises(ClogcdError):
        polyfit_curve([1.0, 2.0, 3.0], degree=3)


# ---------------------------------------------------------------------------
# CSV row plumbing
# ---------------------------------------------------------------------------

def test_record_csv_row_matches_header():
    rec = EvaluationRecord(pass_index=2, direction="asc", end_level=1, split="test",
                           report=metrics(ConfusionMatrix(np.array([[3, 1], [2, 4]]))),
                           matrix=ConfusionMatrix(np.array([[3, 1], [2, 4]])))
    row = record_csv_row("abc123", "clog-cd-d1", rec)
    assert len(row.split(",")) == len(METRICS_CSV_HEADER.split(","))
    assert row.startswith("abc123,clog-cd-d1,2,asc,1,test,0.700000")