"""Evaluation statistics: MAE, brain age gap, Pearson correlation, Student-t
confidence intervals, Welch's t-test and the per-group report."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import special, stats

from .errors import ContractError, DegenerateVarianceError, ShapeError

CI_METHOD = "Student-t interval on the mean: mean ± t(0.975, N-1) · s / sqrt(N)"


@dataclass
class AgePrediction:
    scan_id: str
    subject_id: str
    y: float
    y_hat: float
    group: str
    cog_score: float

    @property
    def bag(self) -> float:
        return self.y_hat - self.y


def _pair(y_hat, y) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    b = np.asarray(y, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"prediction length {a.size} != label length {b.size}")
    return a, b


def mae(y_hat, y) -> float:
    """(1/N) Σ |ŷ_i − y_i|."""
    a, b = _pair(y_hat, y)
    if a.size == 0:
        raise ContractError("MAE of an empty set is undefined")
    return float(np.mean(np.abs(a - b)))


def bag(y_hat, y):
    """Brain age gap ŷ − y (signed); scalar in, scalar out."""
    if np.isscalar(y_hat) and np.isscalar(y):
        return float(y_hat) - float(y)
    a, b = _pair(y_hat, y)
    return a - b


def t_two_sided_p(t: float, df: float) -> float:
    """Two-sided Student-t tail probability via the regularized incomplete beta."""
    if math.isinf(t):
        return 0.0
    return float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))


def pearson(x, y) -> tuple[float, float]:
    """Sample Pearson r and its two-sided p-value (t test with N−2 df)."""
    a, b = _pair(x, y)
    n = a.size
    if n < 3:
        raise ContractError(f"Pearson correlation needs N >= 3, got {n}")
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = float(np.dot(da, da)), float(np.dot(db, db))
    if saa == 0.0 or sbb == 0.0:
        raise DegenerateVarianceError("correlation is undefined for a constant input")
    r = float(np.dot(da, db) / math.sqrt(saa * sbb))
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return r, t_two_sided_p(t, n - 2)


def mean_ci95(samples) -> tuple[float, float, float]:
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    n = x.size
    if n < 2:
        raise ContractError(f"confidence interval needs N >= 2, got {n}")
    m = float(x.mean())
    s = float(np.sqrt(np.sum((x - m) ** 2) / (n - 1)))
    half = float(stats.t.ppf(0.975, n - 1)) * s / math.sqrt(n)
    return m, m - half, m + half


def welch_t(a, b) -> tuple[float, float]:
    """Welch's unequal-variance t statistic (mean(a) − mean(b)) and two-sided p."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size < 2 or b.size < 2:
        raise ContractError(f"Welch's t-test needs N >= 2 in both samples, got {a.size} and {b.size}")
    va = float(np.sum((a - a.mean()) ** 2) / (a.size - 1)) / a.size
    vb = float(np.sum((b - b.mean()) ** 2) / (b.size - 1)) / b.size
    if va + vb == 0.0:
        raise DegenerateVarianceError("both samples have zero variance; t is undefined")
    t = float((a.mean() - b.mean()) / math.sqrt(va + vb))
    df = (va + vb) ** 2 / (va * va / (a.size - 1) + vb * vb / (b.size - 1))
    return t, t_two_sided_p(t, df)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class GroupStats:
    n: int
    bag_mean: float
    bag_ci95_low: float | None
    bag_ci95_high: float | None
    mae: float
    r: float | None

    def row(self) -> str:
        if self.bag_ci95_low is None:
            return f"Mean: {self.bag_mean:.2f}, 95% CI: n/a"
        return f"Mean: {self.bag_mean:.2f}, 95% CI: ({self.bag_ci95_low:.2f}, {self.bag_ci95_high:.2f})"


@dataclass
class Correlation:
    r: float
    p: float
    n: int


@dataclass
class MetricsReport:
    n: int
    mae: float
    pearson_r: float | None
    pearson_p: float | None
    groups: dict[str, GroupStats]
    abs_error_vs_score: dict[str, Correlation]
    bag_vs_score: dict[str, Correlation]
    comparisons: dict[str, dict] = field(default_factory=dict)
    notices: list[str] = field(default_factory=list)
    ci_method: str = CI_METHOD

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def _group_rows(preds: Sequence[AgePrediction]) -> dict[str, list[AgePrediction]]:
    groups: dict[str, list[AgePrediction]] = {}
    for p in preds:
        groups.setdefault(p.group, []).append(p)
    return groups


def group_summary(preds: Sequence[AgePrediction], notices: list[str] | None = None) -> dict[str, GroupStats]:
    out = {}
    for g, rows in _group_rows(preds).items():
        yh = np.array([p.y_hat for p in rows])
        y = np.array([p.y for p in rows])
        b = yh - y
        if len(rows) >= 2:
            m, lo, hi = mean_ci95(b)
        else:
            m, lo, hi = float(b.mean()), None, None
        r = None
        if len(rows) >= 3:
            try:
                r = pearson(yh, y)[0]
            except DegenerateVarianceError:
                pass
        elif notices is not None:
            notices.append(f"group {g}: n={len(rows)} < 3, correlation skipped")
        out[g] = GroupStats(len(rows), m, lo, hi, float(np.mean(np.abs(b))), r)
    return out


def score_correlation(preds: Sequence[AgePrediction], group: str, use_bag: bool = False) -> tuple[float, float]:
    """Pearson (r, p) of |ŷ − y| (or signed BAG) against the cognitive score within ``group``."""
    rows = [p for p in preds if p.group == group]
    if len(rows) < 3:
        raise ContractError(f"group {group}: n={len(rows)} < 3, correlation undefined")
    err = np.array([p.bag if use_bag else abs(p.bag) for p in rows])
    score = np.array([p.cog_score for p in rows])
    return pearson(err, score)


def _score_table(preds, use_bag, notices) -> dict[str, Correlation]:
    table = {}
    for g, rows in _group_rows(preds).items():
        try:
            r, p = score_correlation(preds, g, use_bag)
        except (ContractError, DegenerateVarianceError) as exc:
            notices.append(f"{'BAG' if use_bag else '|error|'} vs score, {exc}")
            continue
        table[g] = Correlation(r, p, len(rows))
    return table


def build_report(preds: Sequence[AgePrediction]) -> MetricsReport:
    if not preds:
        raise ContractError("cannot build a report from zero predictions")
    notices: list[str] = []
    yh = np.array([p.y_hat for p in preds])
    y = np.array([p.y for p in preds])
    try:
        r, pv = pearson(yh, y)
    except (ContractError, DegenerateVarianceError):
        r, pv = None, None
    groups = group_summary(preds, notices)
    report = MetricsReport(
        n=len(preds), mae=mae(yh, y), pearson_r=r, pearson_p=pv, groups=groups,
        abs_error_vs_score=_score_table(preds, False, notices),
        bag_vs_score=_score_table(preds, True, notices),
        notices=notices,
    )
    cn = [abs(p.bag) for p in preds if p.group == "CN"]
    for g in groups:
        if g == "CN":
            continue
        other = [abs(p.bag) for p in preds if p.group == g]
        try:
            t, p = welch_t(cn, other)
        except (ContractError, DegenerateVarianceError):
            continue
        report.comparisons[f"abs_error CN vs {g}"] = {"t": t, "p": p, "test": "Welch"}
    report.notices.append("gradient maps and correlations use scan-level rows")
    return report


def write_report_tables(report: MetricsReport, preds: Sequence[AgePrediction], out_dir) -> list[Path]:
    """metrics.json plus flat CSV tables; returns the written paths."""
    out_dir = Path(out_dir)
    tables = out_dir / "tables"
    tables.mkdir(parents=True, exist_ok=True)
    written = []
    p = out_dir / "metrics.json"
    p.write_text(report.to_json())
    written.append(p)

    p = tables / "group_bag.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "n", "bag_mean", "bag_ci95_low", "bag_ci95_high", "mae", "r"])
        for g, s in sorted(report.groups.items()):
            w.writerow([g, s.n, repr(s.bag_mean), repr(s.bag_ci95_low), repr(s.bag_ci95_high), repr(s.mae), repr(s.r)])
    written.append(p)

    p = tables / "score_correlation.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "quantity", "n", "r", "p"])
        for name, table in (("abs_error", report.abs_error_vs_score), ("bag", report.bag_vs_score)):
            for g, c in sorted(table.items()):
                w.writerow([g, name, c.n, repr(c.r), repr(c.p)])
    written.append(p)

    p = tables / "predictions.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scan_id", "subject_id", "group", "y", "y_hat", "bag", "cog_score"])
        for a in preds:
            w.writerow([a.scan_id, a.subject_id, a.group, repr(a.y), repr(a.y_hat), repr(a.bag), repr(a.cog_score)])
    written.append(p)
    return written


def predictions_from(records: Iterable, y_hat: Sequence[float]) -> list[AgePrediction]:
    return [AgePrediction(r.scan_id, r.subject_id, float(r.age), float(yh), r.group, float(r.cog_score))
            for r, yh in zip(records, y_hat)]
