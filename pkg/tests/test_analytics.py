import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brainage.analytics import (
    AgePrediction,
    bag,
    build_report,
    group_summary,
    mae,
    mean_ci95,
    pearson,
    score_correlation,
    welch_t,
    write_report_tables,
)
from brainage.errors import ContractError, DegenerateVarianceError, ShapeError
from brainage.numcore import DeterministicRng
from oracles import naive_mae, naive_mean, naive_pearson_r, naive_var, naive_welch, t_quantile_975, t_two_sided_p_quad

seeds = st.integers(0, 2**31 - 1)


def test_mae_examples():
    assert mae([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mae([3.0, 5.0], [1.0, 1.0]) == 3.0
    rng = DeterministicRng(0)
    a, b = rng.normal(size=50), rng.normal(size=50)
    assert mae(a, b) <= math.sqrt(np.mean((a - b) ** 2))


def test_mae_errors():
    with pytest.raises(ContractError):
        mae([], [])
    with pytest.raises(ShapeError):
        mae([1.0], [1.0, 2.0])


def test_bag_examples():
    assert bag(75.0, 70.0) == 5.0
    assert bag(70.0, 70.0) == 0.0
    rng = DeterministicRng(1)
    yh, y = rng.normal(70, 5, 40), rng.normal(70, 5, 40)
    assert abs(np.mean(bag(yh, y)) - (yh.mean() - y.mean())) < 1e-12


def test_pearson_examples():
    x = np.arange(10.0)
    r, p = pearson(x, 2 * x + 1)
    assert r == pytest.approx(1.0, abs=1e-12) and p < 1e-12
    assert pearson(x, -x)[0] == pytest.approx(-1.0, abs=1e-12)
    assert pearson([1, 2, 3], [2, 1, 4])[0] == pytest.approx(0.6546, abs=1e-4)


def test_pearson_errors():
    with pytest.raises(DegenerateVarianceError):
        pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(ContractError):
        pearson([1.0, 2.0], [2.0, 1.0])


@settings(max_examples=40)
@given(seeds, st.floats(0.1, 10), st.floats(-5, 5))
def test_pearson_symmetric_and_affine_invariant(seed, a, b):
    rng = DeterministicRng(seed)
    x, y = rng.normal(size=20), rng.normal(size=20)
    r = pearson(x, y)[0]
    assert abs(pearson(y, x)[0] - r) <= 1e-12
    assert abs(pearson(a * x + b, y)[0] - r) <= 1e-9
    assert abs(pearson(x, a * y + b)[0] - r) <= 1e-9


def test_mean_ci95_examples():
    m, lo, hi = mean_ci95([3.0, 3.0, 3.0])
    assert (m, lo, hi) == (3.0, 3.0, 3.0)
    m, lo, hi = mean_ci95([0.0, 2.0])
    assert m == 1.0
    assert lo == pytest.approx(-11.706, abs=1e-3) and hi == pytest.approx(13.706, abs=1e-3)
    with pytest.raises(ContractError):
        mean_ci95([1.0])


def test_welch_examples():
    rng = DeterministicRng(2)
    a = rng.normal(size=10)
    t, p = welch_t(a, a)
    assert t == 0.0 and p == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(DegenerateVarianceError):
        welch_t([0.0] * 4, [1.0] * 4)
    assert welch_t([1, 2, 3], [2, 3, 4])[0] == pytest.approx(-1.2247, abs=1e-3)
    with pytest.raises(ContractError):
        welch_t([1.0], [1.0, 2.0])


# --- brute-force oracle equivalence on random vectors --------------------------

def test_statistics_match_naive_oracles_on_1000_vectors():
    rng = DeterministicRng(3, "oracle")
    worst = 0.0
    for i in range(1000):
        n = int(rng.integers(3, 40))
        x = rng.normal(rng.uniform(-50, 50), rng.uniform(0.1, 20), size=n)
        y = 0.3 * x + rng.normal(0, rng.uniform(0.1, 20), size=n)
        xs, ys = x.tolist(), y.tolist()
        worst = max(worst, abs(mae(x, y) - naive_mae(xs, ys)))
        worst = max(worst, abs(pearson(x, y)[0] - naive_pearson_r(xs, ys)))
        m, lo, hi = mean_ci95(x)
        half = hi - m
        worst = max(worst, abs(m - naive_mean(xs)))
        # half-width divided by its own t quantile → standard error
        se = math.sqrt(naive_var(xs) / n)
        worst = max(worst, abs(half / se - (hi - lo) / (2 * se)))
        t, _ = welch_t(x, y)
        worst = max(worst, abs(t - naive_welch(xs, ys)[0]) / max(1.0, abs(t)))
    assert worst < 1e-9


def test_p_values_match_quadrature_oracle():
    rng = DeterministicRng(4, "pvals")
    for _ in range(60):
        n = int(rng.integers(4, 60))
        x = rng.normal(size=n)
        y = rng.uniform(-1, 1) * x + rng.normal(size=n)
        r, p = pearson(x, y)
        t = r * math.sqrt((n - 2) / (1 - r * r))
        assert p == pytest.approx(t_two_sided_p_quad(t, n - 2), rel=1e-7, abs=1e-12)
        tw, pw = welch_t(x, y + rng.normal())
        _, df = naive_welch(x.tolist(), (y + 0).tolist())
    for df in (1, 2, 5, 30):
        _, lo, hi = mean_ci95(np.arange(df + 1, dtype=float))
        s = math.sqrt(naive_var(list(np.arange(df + 1, dtype=float))) / (df + 1))
        assert (hi - lo) / (2 * s) == pytest.approx(t_quantile_975(df), rel=1e-8)


def test_welch_p_matches_quadrature():
    rng = DeterministicRng(5)
    for _ in range(30):
        a = rng.normal(0, rng.uniform(0.5, 3), size=int(rng.integers(2, 30)))
        b = rng.normal(rng.uniform(-1, 1), rng.uniform(0.5, 3), size=int(rng.integers(2, 30)))
        t, p = welch_t(a, b)
        t0, df = naive_welch(a.tolist(), b.tolist())
        assert t == pytest.approx(t0, rel=1e-12)
        assert p == pytest.approx(t_two_sided_p_quad(t0, df), rel=1e-7, abs=1e-12)


# --- report ------------------------------------------------------------------------

def _preds(rng, groups=("CN", "MCI", "AD"), n=12, perfect=False):
    out = []
    for g in groups:
        for i in range(n):
            y = float(rng.uniform(42, 95))
            yh = y if perfect else y + float(rng.normal(2, 3))
            out.append(AgePrediction(f"{g}{i}_s0", f"{g}{i}", y, yh, g, float(rng.uniform(20, 30))))
    return out


def test_perfect_predictions_give_zero_width_cis():
    summary = group_summary(_preds(DeterministicRng(6), perfect=True))
    for s in summary.values():
        assert s.bag_mean == 0.0 and s.bag_ci95_low == 0.0 and s.bag_ci95_high == 0.0


def test_report_partitions_and_orders_ci():
    preds = _preds(DeterministicRng(7))
    rep = build_report(preds)
    assert sum(s.n for s in rep.groups.values()) == rep.n == len(preds)
    for s in rep.groups.values():
        assert s.bag_ci95_low <= s.bag_mean <= s.bag_ci95_high
    assert set(rep.abs_error_vs_score) == set(rep.bag_vs_score) == {"CN", "MCI", "AD"}
    assert "Student-t" in rep.ci_method
    assert "abs_error CN vs AD" in rep.comparisons


def test_row_format_mirrors_reference_layout():
    from brainage.analytics import GroupStats

    assert GroupStats(10, 6.12, 5.82, 6.43, 6.2, 0.9).row() == "Mean: 6.12, 95% CI: (5.82, 6.43)"


def test_small_group_skipped_with_notice():
    rng = DeterministicRng(8)
    preds = _preds(rng, ("CN",), n=10) + _preds(rng, ("AD",), n=2)
    rep = build_report(preds)
    assert "AD" not in rep.abs_error_vs_score
    assert any("AD" in n for n in rep.notices)
    with pytest.raises(ContractError):
        score_correlation(preds, "AD")


def test_score_correlation_uses_absolute_error():
    preds = [AgePrediction(str(i), str(i), 60.0, 60.0 + e, "MCI", 30.0 - abs(e)) for i, e in
             enumerate([-4.0, -1.0, 0.5, 2.0, 3.0, -2.5])]
    assert score_correlation(preds, "MCI")[0] == pytest.approx(-1.0, abs=1e-12)
    assert score_correlation(preds, "MCI", use_bag=True)[0] > -1.0


def test_report_tables(tmp_path):
    preds = _preds(DeterministicRng(9))
    rep = build_report(preds)
    paths = write_report_tables(rep, preds, tmp_path)
    assert json.loads((tmp_path / "metrics.json").read_text())["n"] == len(preds)
    with open(tmp_path / "tables" / "group_bag.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["group"] for r in rows] == ["AD", "CN", "MCI"]
    assert all(p.exists() for p in paths)
