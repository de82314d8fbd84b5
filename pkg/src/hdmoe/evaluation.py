"""Metrics and statistical analyses: concordance index, Kaplan-Meier curves,
two-group log-rank test, Welch's t-test, routed-expert allocation histograms,
shared-expert de-redundancy score, and repeated-evaluation stability.

Chi-square and Student-t tail probabilities come from hand-rolled regularized
incomplete gamma/beta routines (series + continued fractions), so there is no
external statistics dependency; they are validated against textbook values in
the test suite. Event indicator convention: delta = 1 - censored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import model as model_mod
from .data import SampleRecord
from .errors import MetricError
from .model import HDMoEParams, ModelConfig
from .moe import RouterTrace

_MAX_ITER = 400
_FP_EPS = 3e-15


# ---------------------------------------------------------------------------
# special functions


def _gamma_series(a: float, x: float) -> float:
    ap = a
    total = 1.0 / a
    delta = total
    for _ in range(_MAX_ITER):
        ap += 1.0
        delta *= x / ap
        total += delta
        if abs(delta) < abs(total) * _FP_EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cf(a: float, x: float) -> float:
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _FP_EPS:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def reg_gamma_p(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x)."""
    if a <= 0 or x < 0:
        raise ValueError("reg_gamma_p needs a > 0 and x >= 0")
    if x == 0.0:
        return 0.0
    if x < a + 1.0:
        return _gamma_series(a, x)
    return 1.0 - _gamma_cf(a, x)


def reg_gamma_q(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x)."""
    if a <= 0 or x < 0:
        raise ValueError("reg_gamma_q needs a > 0 and x >= 0")
    if x == 0.0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_series(a, x)
    return _gamma_cf(a, x)


def _beta_cf(a: float, b: float, x: float) -> float:
    tiny = 1e-300
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _FP_EPS:
            break
    return h


def reg_incomplete_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b) via Lentz continued fraction."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must be in [0, 1]")
    if x in (0.0, 1.0):
        return x
    front = math.exp(
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log(1.0 - x)
    )
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def chi2_sf(x: float, df: int = 1) -> float:
    """Upper tail of the chi-square distribution."""
    return reg_gamma_q(df / 2.0, x / 2.0)


def student_t_two_sided_p(t: float, df: float) -> float:
    return reg_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))


# ---------------------------------------------------------------------------
# concordance index


@dataclass(frozen=True)
class RiskTable:
    """Per-sample risk, observed time, and event indicator (1 = event)."""

    risks: np.ndarray
    times: np.ndarray
    events: np.ndarray

    @classmethod
    def from_predictions(cls, rows) -> "RiskTable":
        return cls(
            risks=np.array([r.risk for r in rows], dtype=np.float64),
            times=np.array([r.time_months for r in rows], dtype=np.float64),
            events=np.array([1 - r.censored for r in rows], dtype=np.int64),
        )


def c_index(table: RiskTable) -> float:
    """Harrell concordance: pairs with t_i < t_j are comparable iff sample i
    had an event; risk ties count 0.5."""
    times = np.asarray(table.times, dtype=np.float64)
    events = np.asarray(table.events, dtype=np.int64)
    risks = np.asarray(table.risks, dtype=np.float64)
    conc, comp = kernels.concordance_counts(times, events, risks)
    if comp == 0:
        raise MetricError("c-index undefined: no comparable pairs")
    return float(conc) / float(comp)


# ---------------------------------------------------------------------------
# Kaplan-Meier and tests


@dataclass(frozen=True)
class KmCurve:
    times: np.ndarray  # distinct event times, ascending
    survival: np.ndarray  # product-limit estimate after each event time
    at_risk: np.ndarray
    events: np.ndarray


def km_estimate(times, events) -> KmCurve:
    """Product-limit estimator over the distinct observed event times."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=np.int64)
    if times.size == 0:
        raise MetricError("km_estimate needs at least one sample")
    event_times = np.unique(times[events == 1])
    surv = 1.0
    out_s, out_n, out_d = [], [], []
    for t in event_times:
        n_at_risk = int(np.count_nonzero(times >= t))
        d = int(np.count_nonzero((times == t) & (events == 1)))
        surv *= 1.0 - d / n_at_risk
        out_s.append(surv)
        out_n.append(n_at_risk)
        out_d.append(d)
    return KmCurve(
        times=event_times,
        survival=np.array(out_s),
        at_risk=np.array(out_n, dtype=np.int64),
        events=np.array(out_d, dtype=np.int64),
    )


def log_rank_p(times_a, events_a, times_b, events_b) -> tuple[float, float]:
    """Two-group log-rank test; returns (chi2, p) with 1 df."""
    ta = np.asarray(times_a, dtype=np.float64)
    ea = np.asarray(events_a, dtype=np.int64)
    tb = np.asarray(times_b, dtype=np.float64)
    eb = np.asarray(events_b, dtype=np.int64)
    if ta.size == 0 or tb.size == 0:
        raise MetricError("log-rank needs two non-empty groups")
    all_times = np.concatenate([ta, tb])
    all_events = np.concatenate([ea, eb])
    event_times = np.unique(all_times[all_events == 1])
    if event_times.size == 0:
        raise MetricError("log-rank needs at least one event")
    observed_a = 0.0
    expected_a = 0.0
    variance = 0.0
    for t in event_times:
        n1 = int(np.count_nonzero(ta >= t))
        n2 = int(np.count_nonzero(tb >= t))
        n = n1 + n2
        d1 = int(np.count_nonzero((ta == t) & (ea == 1)))
        d2 = int(np.count_nonzero((tb == t) & (eb == 1)))
        d = d1 + d2
        if n < 2 or n1 == 0 or n2 == 0:
            # only one group still at risk: no information in this stratum
            observed_a += d1
            expected_a += d * (n1 / n) if n else 0.0
            continue
        observed_a += d1
        expected_a += d * n1 / n
        variance += d * (n1 / n) * (n2 / n) * (n - d) / (n - 1)
    if variance <= 0.0:
        raise MetricError("log-rank degenerate: zero variance")
    chi2 = (observed_a - expected_a) ** 2 / variance
    return float(chi2), float(chi2_sf(chi2, df=1))


def welch_t_test(risks_a, risks_b) -> tuple[float, float]:
    """Welch t statistic with Satterthwaite df; two-sided p."""
    a = np.asarray(risks_a, dtype=np.float64)
    b = np.asarray(risks_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise MetricError("welch t-test needs at least two samples per group")
    va = float(np.var(a, ddof=1))
    vb = float(np.var(b, ddof=1))
    se2 = va / a.size + vb / b.size
    if se2 <= 0.0:
        raise MetricError("welch t-test degenerate: zero variance in both groups")
    t = (float(a.mean()) - float(b.mean())) / math.sqrt(se2)
    df = se2**2 / (
        (va / a.size) ** 2 / (a.size - 1) + (vb / b.size) ** 2 / (b.size - 1)
    )
    return float(t), float(student_t_two_sided_p(t, df))


# ---------------------------------------------------------------------------
# diagnostics


def expert_histogram(trace_groups: list[tuple[RouterTrace, ...]]) -> np.ndarray:
    """Total top-k selections per expert for each router position.

    trace_groups: one tuple of per-router traces per sample (all tuples the
    same length). Returns [n_routers, num_experts].
    """
    if not trace_groups:
        raise MetricError("expert_histogram needs at least one trace group")
    n_routers = len(trace_groups[0])
    counts = None
    for group in trace_groups:
        if len(group) != n_routers:
            raise MetricError("inconsistent router count across samples")
        row = np.stack([trace.selection_counts() for trace in group])
        counts = row if counts is None else counts + row
    return counts


def average_abs_correlation(token_mats: list[np.ndarray]) -> np.ndarray:
    """Mean absolute Pearson correlation between token rows, across samples."""
    if not token_mats:
        raise MetricError("need at least one token matrix")
    acc = None
    for mat in token_mats:
        stds = mat.std(axis=1)
        if np.any(stds == 0.0):
            raise MetricError("zero-variance token: correlation undefined")
        corr = np.abs(np.corrcoef(mat))
        acc = corr if acc is None else acc + corr
    return acc / len(token_mats)


def redundancy_score(
    params: HDMoEParams,
    model_cfg: ModelConfig,
    records: list[SampleRecord],
    level: int,
    modality: str | None,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Average absolute token-correlation heatmaps before/after the shared
    expert; delta = sum of off-diagonal (pre) - sum of off-diagonal (post).

    level 1 takes modality 'a' or 'b'; level 2 ignores modality.
    """
    if len(records) < 2:
        raise MetricError("redundancy_score needs at least two samples")
    pre_mats, post_mats = [], []
    for sample in records:
        res = model_mod.forward(sample, params, model_cfg, rng, requires_grad=False)
        if level == 1:
            out = {"a": res.moe_a, "b": res.moe_b}.get(modality)
            if out is None:
                raise ValueError(f"level 1 needs modality 'a' or 'b', got {modality!r}")
        elif level == 2:
            out = res.moe_inter
        else:
            raise ValueError(f"level must be 1 or 2, got {level}")
        pre_mats.append(out.tokens.value.copy())
        post_mats.append(out.shared_tokens.value.copy())
    pre = average_abs_correlation(pre_mats)
    post = average_abs_correlation(post_mats)
    off = ~np.eye(pre.shape[0], dtype=bool)
    delta = float(pre[off].sum() - post[off].sum())
    return pre, post, delta


def stability_report(
    params: HDMoEParams,
    model_cfg: ModelConfig,
    records: list[SampleRecord],
    repeats: int,
    rng: np.random.Generator,
) -> tuple[list[float], float, float]:
    """Re-evaluate a frozen model with independent fusion draws per repeat."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    times = np.array([r.time_months for r in records])
    events = np.array([1 - r.censored for r in records])
    scores = []
    for _ in range(repeats):
        risks = np.array(
            [
                model_mod.forward(r, params, model_cfg, rng, requires_grad=False).prediction.risk
                for r in records
            ]
        )
        scores.append(c_index(RiskTable(risks=risks, times=times, events=events)))
    # identical scores must report exactly zero spread (the mean of n copies
    # of x can differ from x by an ulp, making np.std spuriously nonzero)
    std = 0.0 if min(scores) == max(scores) else float(np.std(scores))
    return scores, float(np.mean(scores)), std


def km_curves_csv(groups: dict[str, KmCurve]) -> str:
    lines = ["group,time,survival,at_risk,events"]
    for name, curve in groups.items():
        for t, s, n, d in zip(curve.times, curve.survival, curve.at_risk, curve.events):
            lines.append(f"{name},{t:.17g},{s:.17g},{n},{d}")
    return "\n".join(lines) + "\n"
