"""Variant comparison: Welch's t-test, Bonferroni adjustment and box statistics."""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .search import select_top_fraction

log = logging.getLogger(__name__)


def _betacf(a, b, x, max_iter=500, tol=1e-15):
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_regularized(a, b, x):
    """Regularized incomplete beta ``I_x(a, b)``."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t, dof):
    if math.isinf(t):
        return 0.0
    return betainc_regularized(dof / 2.0, 0.5, dof / (dof + t * t))


@dataclass(frozen=True)
class WelchResult:
    t: float
    dof: float
    p: float


def welch_t_test(a, b):
    """Two-sided Welch test of equal means without assuming equal variances."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two values")
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    se2 = va + vb
    if se2 == 0.0:
        if ma == mb:
            return WelchResult(0.0, math.nan, 1.0)
        return WelchResult(math.copysign(math.inf, ma - mb), math.nan, 0.0)
    t = float((ma - mb) / math.sqrt(se2))
    dof = float(se2 ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1)))
    return WelchResult(t, dof, t_two_sided_p(t, dof))


def bonferroni_adjust(p_values, m):
    p_values = list(p_values)
    if m < len(p_values):
        raise ValueError("m must be at least the number of tests")
    return [min(1.0, p * m) for p in p_values]


def box_stats(values):
    """Mean, median, quartiles (linear interpolation between closest ranks) and range."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    q1, med, q3 = np.percentile(v, [25, 50, 75], method="linear")
    return {"n": int(v.size), "mean": float(v.mean()), "median": float(med), "q1": float(q1),
            "q3": float(q3), "min": float(v[0]), "max": float(v[-1])}


@dataclass
class VariantRow:
    variant: str
    n_trials: int
    n_top: int
    box: dict
    mean_params: float = None
    t: float = None
    dof: float = None
    p_value: float = None
    p_adjusted: float = None
    significant: bool = False


@dataclass
class ComparisonTable:
    baseline: str
    top_fraction: float
    n_tests: int
    alpha: float
    rows: list = field(default_factory=list)
    absent: list = field(default_factory=list)

    def row(self, variant):
        return next(r for r in self.rows if r.variant == variant)

    def to_dict(self):
        return {"baseline": self.baseline, "top_fraction": self.top_fraction,
                "n_tests": self.n_tests, "alpha": self.alpha, "absent": list(self.absent),
                "rows": [asdict(r) for r in self.rows]}

    def to_csv_rows(self):
        header = ["variant", "n_trials", "n_top", "mean", "median", "q1", "q3", "min", "max",
                  "mean_params", "t", "dof", "p_value", "p_adjusted", "significant"]
        out = [header]
        for r in self.rows:
            out.append([r.variant, r.n_trials, r.n_top] +
                       [r.box[k] for k in ("mean", "median", "q1", "q3", "min", "max")] +
                       [r.mean_params, r.t, r.dof, r.p_value, r.p_adjusted, r.significant])
        return out


def compare_variants(logs, baseline="V", top_fraction=0.10, n_tests=None, alpha=0.05,
                     param_count=None, expected=None):
    """Compare each variant's top trials against the baseline's on test performance.

    ``logs`` maps variant name to its trial records; the top fraction is chosen
    by validation metric. ``n_tests`` defaults to the number of non-baseline
    variants present. ``param_count(record)`` optionally supplies network sizes.
    """
    if baseline not in logs or not logs[baseline]:
        raise ValueError(f"baseline {baseline!r} has no trials")
    present = [v for v, recs in logs.items() if recs]
    others = [v for v in present if v != baseline]
    m = n_tests if n_tests is not None else max(1, len(others))
    table = ComparisonTable(baseline, top_fraction, m, alpha)
    table.absent = sorted(set(expected or ()) - set(present))
    top = {v: select_top_fraction(logs[v], top_fraction) for v in present}
    base = [r.test_metric for r in top[baseline]]
    for v in [baseline] + others:
        metrics = [r.test_metric for r in top[v]]
        row = VariantRow(v, len(logs[v]), len(top[v]), box_stats(metrics))
        if param_count is not None:
            row.mean_params = float(np.mean([param_count(r) for r in top[v]]))
        if v != baseline and min(len(metrics), len(base)) < 2:
            log.warning("%s: fewer than two top trials; no test", v)
        elif v != baseline:
            res = welch_t_test(metrics, base)
            row.t, row.dof, row.p_value = res.t, res.dof, res.p
            row.p_adjusted = bonferroni_adjust([res.p], m)[0]
            row.significant = row.p_adjusted < alpha
        table.rows.append(row)
    return table
