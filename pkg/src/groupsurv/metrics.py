"""Survival evaluation: Harrell's C, Kaplan-Meier, log-rank, stratification."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .errors import ArgumentError, UndefinedMetricError


def _arrays(risk, time, event):
    r = np.asarray(risk, dtype=float).ravel()
    t = np.asarray(time, dtype=float).ravel()
    e = np.asarray(event).astype(bool).ravel()
    if not (r.shape == t.shape == e.shape):
        raise ArgumentError("risk, time and event must have the same length")
    if r.size == 0:
        raise ArgumentError("empty cohort")
    return r, t, e


def concordance_counts(risk, time, event, block: int = 2048):
    """Return ``(concordant_weight, comparable)`` under Harrell's pair rule."""
    r, t, e = _arrays(risk, time, event)
    idx = np.nonzero(e)[0]
    concordant = 0.0
    comparable = 0
    for start in range(0, idx.size, block):
        i = idx[start:start + block]
        comp = t[i, None] < t[None, :]
        diff = r[i, None] - r[None, :]
        comparable += int(comp.sum())
        concordant += float((comp & (diff > 0)).sum()) + 0.5 * float((comp & (diff == 0)).sum())
    return concordant, comparable


def c_index(risk, time, event) -> float:
    """Harrell's concordance index; higher risk should mean earlier events.

    A pair (i, j) is comparable when ``T_i < T_j`` and patient i had the event.
    Ties in risk count one half. Pairs with equal times are not comparable.
    """
    concordant, comparable = concordance_counts(risk, time, event)
    if comparable == 0:
        raise UndefinedMetricError("no comparable pairs")
    return concordant / comparable


@dataclass
class KMCurve:
    times: np.ndarray  # starts at 0
    survival: np.ndarray  # S(times[k]), right-continuous steps
    at_risk: np.ndarray
    events: np.ndarray

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        pos = np.searchsorted(self.times, t, side="right") - 1
        return self.survival[np.clip(pos, 0, None)]

    def to_records(self) -> list:
        return [{"t": float(a), "S": float(b)} for a, b in zip(self.times, self.survival)]

    @classmethod
    def from_records(cls, records) -> "KMCurve":
        t = np.array([r["t"] for r in records], dtype=float)
        s = np.array([r["S"] for r in records], dtype=float)
        return cls(t, s, np.zeros_like(t, dtype=int), np.zeros_like(t, dtype=int))


def km_curve(time, event) -> KMCurve:
    """Product-limit estimate; observations censored at ``t`` count as at risk at ``t``."""
    t = np.asarray(time, dtype=float).ravel()
    e = np.asarray(event).astype(bool).ravel()
    if t.size == 0:
        raise ArgumentError("km_curve needs at least one observation")
    uniq = np.unique(t[e])
    n_at = np.array([(t >= u).sum() for u in uniq], dtype=int)
    d = np.array([((t == u) & e).sum() for u in uniq], dtype=int)
    surv = np.cumprod(1.0 - d / n_at) if uniq.size else np.empty(0)
    return KMCurve(np.concatenate([[0.0], uniq]), np.concatenate([[1.0], surv]),
                   np.concatenate([[t.size], n_at]), np.concatenate([[0], d]))


def chi2_sf(x: float, df: int = 1) -> float:
    """Upper tail of the chi-square distribution via the regularized gamma function."""
    if x <= 0:
        return 1.0
    return float(special.gammaincc(df / 2.0, x / 2.0))


@dataclass
class LogRankResult:
    chi2: float
    p: float
    observed_a: float
    expected_a: float
    variance: float


def log_rank(group_a, group_b) -> LogRankResult:
    """Two-sample log-rank test; each group is ``(times, events)``."""
    ta, ea = (np.asarray(x) for x in group_a)
    tb, eb = (np.asarray(x) for x in group_b)
    if ta.size == 0 or tb.size == 0:
        raise ArgumentError("both groups must be non-empty")
    ea, eb = ea.astype(bool), eb.astype(bool)
    t = np.concatenate([ta, tb]).astype(float)
    e = np.concatenate([ea, eb])
    in_a = np.concatenate([np.ones(ta.size, bool), np.zeros(tb.size, bool)])
    if not e.any():
        raise UndefinedMetricError("log-rank test needs at least one event")
    uniq = np.unique(t[e])
    at_risk = t[None, :] >= uniq[:, None]
    died = (t[None, :] == uniq[:, None]) & e[None, :]
    n = at_risk.sum(1).astype(float)
    n_a = (at_risk & in_a).sum(1).astype(float)
    d = died.sum(1).astype(float)
    d_a = (died & in_a).sum(1).astype(float)
    expected = d * n_a / n
    with np.errstate(invalid="ignore", divide="ignore"):
        var = np.where(n > 1, d * (n_a / n) * (1 - n_a / n) * (n - d) / (n - 1), 0.0)
    o, ex, v = d_a.sum(), expected.sum(), var.sum()
    if v <= 0:
        if abs(o - ex) == 0:
            return LogRankResult(0.0, 1.0, o, ex, v)
        raise UndefinedMetricError("log-rank variance is zero")
    chi2 = float((o - ex) ** 2 / v)
    p = max(chi2_sf(chi2), np.finfo(float).tiny)
    return LogRankResult(chi2, p, float(o), float(ex), float(v))


@dataclass
class Stratification:
    high: np.ndarray  # indices with R > median
    low: np.ndarray  # indices with R <= median
    median: float
    degenerate: bool


def stratify_median(risk) -> Stratification:
    r = np.asarray(risk, dtype=float).ravel()
    if r.size < 2:
        raise ArgumentError("stratification needs at least two patients")
    med = float(np.median(r))
    high = np.nonzero(r > med)[0]
    low = np.nonzero(r <= med)[0]
    degenerate = high.size == 0 or low.size == 0
    if degenerate:
        warnings.warn("median split is degenerate: one risk group is empty", RuntimeWarning, stacklevel=2)
    return Stratification(high, low, med, degenerate)


def _box(values: np.ndarray) -> dict:
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = values[(values >= lo_fence) & (values <= hi_fence)]
    return {
        "n": int(values.size), "min": float(values.min()), "q1": float(q1), "median": float(med),
        "q3": float(q3), "max": float(values.max()),
        "whisker_low": float(inside.min()), "whisker_high": float(inside.max()),
        "outliers": sorted(float(v) for v in values[(values < lo_fence) | (values > hi_fence)]),
    }


def stage_summary(risk, stages) -> dict:
    """Boxplot statistics of R per stage plus Kendall's tau-b between stage and R."""
    r = np.asarray(risk, dtype=float).ravel()
    s = np.asarray(stages).ravel()
    keep = np.array([x is not None for x in s])
    r, s = r[keep], s[keep].astype(float)
    levels = np.unique(s)
    if levels.size < 2:
        raise UndefinedMetricError("trend needs at least two distinct stages")
    boxes = {int(lv) if float(lv).is_integer() else float(lv): _box(r[s == lv]) for lv in levels}
    if np.all(r == r[0]):
        tau, p = 0.0, 1.0
    else:
        res = stats.kendalltau(s, r)
        tau, p = float(res.statistic), float(res.pvalue)
    return {"stages": boxes, "kendall_tau": tau, "p_value": p}
