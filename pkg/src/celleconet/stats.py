"""Classification and survival statistics.

Confusion metrics, Mann-Whitney ROC-AUC, Kaplan-Meier, two-group log-rank,
univariable Cox PH (Efron ties), Harrell's C-index, Yates-corrected 2x2
chi-square, and the subgroup / false-negative bias reports built on them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

Z_95 = 1.96


class UndefinedStatistic(ValueError):
    """The requested statistic is undefined for this input."""


class ConvergenceError(ArithmeticError):
    """Cox fit did not converge (e.g. monotone likelihood)."""


def chi2_sf_1df(x: float) -> float:
    """Upper tail of the chi-square(1) distribution."""
    if x <= 0:
        return 1.0
    return math.erfc(math.sqrt(x / 2.0))


# ---------------------------------------------------------------- classification


@dataclass(frozen=True)
class Confusion:
    accuracy: float
    sensitivity: float
    specificity: float
    tp: int
    fp: int
    tn: int
    fn: int


def confusion_metrics(probs, labels, tau: float = 0.5) -> Confusion:
    """Metrics at threshold ``tau``; undefined rates are NaN."""
    p = np.asarray(probs, dtype=float)
    y = np.asarray(labels, dtype=int)
    pred = p >= tau
    tp = int(np.sum(pred & (y == 1)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    fp = int(np.sum(pred & (y == 0)))
    n = tp + fn + tn + fp
    acc = (tp + tn) / n if n else math.nan
    sens = tp / (tp + fn) if tp + fn else math.nan
    spec = tn / (tn + fp) if tn + fp else math.nan
    return Confusion(acc, sens, spec, tp, fp, tn, fn)


def roc_auc(scores, labels) -> float:
    """P(score+ > score-) + P(tie)/2 via average ranks."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedStatistic("AUC needs both classes")
    ranks = rankdata(s)
    u = np.sum(ranks[y == 1]) - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------- survival


@dataclass
class KmCurve:
    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray
    censored: np.ndarray
    greenwood_var: np.ndarray

    def at(self, t: float) -> float:
        idx = np.searchsorted(self.times, t, side="right") - 1
        return 1.0 if idx < 0 else float(self.survival[idx])


def km_estimate(times, events) -> KmCurve:
    """Product-limit estimate over the distinct observed times."""
    t = np.asarray(times, dtype=float)
    e = np.asarray(events, dtype=int)
    if t.size == 0:
        raise ValueError("Kaplan-Meier needs at least one record")
    uniq = np.unique(t)
    at_risk = np.array([np.sum(t >= u) for u in uniq])
    d = np.array([np.sum((t == u) & (e == 1)) for u in uniq])
    c = np.array([np.sum((t == u) & (e == 0)) for u in uniq])
    surv = np.cumprod(1.0 - d / at_risk)
    # once S hits 0 the variance is 0; skip the d == n term that would divide by zero
    live = at_risk > d
    terms = np.zeros(len(uniq))
    terms[live] = d[live] / (at_risk[live] * (at_risk[live] - d[live]))
    gw = surv ** 2 * np.cumsum(terms)
    return KmCurve(uniq, surv, at_risk, d, c, gw)


def logrank(times_a, events_a, times_b, events_b) -> tuple:
    """Two-group log-rank chi-square statistic and p-value (1 df)."""
    ta, ea = np.asarray(times_a, float), np.asarray(events_a, int)
    tb, eb = np.asarray(times_b, float), np.asarray(events_b, int)
    if ta.size == 0 or tb.size == 0:
        raise UndefinedStatistic("log-rank needs two non-empty groups")
    t = np.concatenate([ta, tb])
    e = np.concatenate([ea, eb])
    g = np.concatenate([np.zeros(ta.size, int), np.ones(tb.size, int)])
    if e.sum() == 0:
        raise UndefinedStatistic("log-rank undefined: no events")
    o_minus_e = 0.0
    var = 0.0
    for u in np.unique(t[e == 1]):
        risk = t >= u
        n = risk.sum()
        n_a = np.sum(risk & (g == 0))
        died = (t == u) & (e == 1)
        d = died.sum()
        d_a = np.sum(died & (g == 0))
        o_minus_e += d_a - d * n_a / n
        if n > 1:
            var += d * (n_a / n) * (1 - n_a / n) * (n - d) / (n - 1)
    if var <= 0:
        raise UndefinedStatistic("log-rank undefined: zero variance")
    stat = o_minus_e ** 2 / var
    return float(stat), chi2_sf_1df(stat)


@dataclass
class CoxFit:
    beta: float
    se: float
    hazard_ratio: float
    ci_low: float
    ci_high: float
    p_value: float
    converged: bool
    iterations: int
    log_likelihood: float


def _efron_terms(beta: float, t, e, x):
    """Efron partial log-likelihood, score and information for one covariate."""
    ll = score = info = 0.0
    w = np.exp(beta * x)
    for u in np.unique(t[e == 1]):
        risk = t >= u
        dead = (t == u) & (e == 1)
        d = int(dead.sum())
        s0r, s1r, s2r = w[risk].sum(), (w * x)[risk].sum(), (w * x * x)[risk].sum()
        s0d, s1d, s2d = w[dead].sum(), (w * x)[dead].sum(), (w * x * x)[dead].sum()
        ll += beta * x[dead].sum()
        score += x[dead].sum()
        for k in range(d):
            f = k / d
            s0 = s0r - f * s0d
            s1 = s1r - f * s1d
            s2 = s2r - f * s2d
            ll -= math.log(s0)
            score -= s1 / s0
            info += s2 / s0 - (s1 / s0) ** 2
    return ll, score, info


def cox_loglik(beta: float, times, events, covariate) -> float:
    return _efron_terms(beta, np.asarray(times, float), np.asarray(events, int),
                        np.asarray(covariate, float))[0]


def cox_univariable(times, events, covariate, tol: float = 1e-8, max_iter: int = 100,
                    beta_limit: float = 25.0) -> CoxFit:
    """Fit log-HR by safeguarded Newton; bisection on the score as fallback."""
    t = np.asarray(times, float)
    e = np.asarray(events, int)
    x = np.asarray(covariate, float)
    if e.sum() == 0:
        raise UndefinedStatistic("Cox fit needs at least one event")
    levels = np.unique(x)
    if levels.size < 2:
        raise UndefinedStatistic("Cox fit needs a non-constant covariate")
    if levels.size == 2:
        for lv in levels:
            if e[x == lv].sum() == 0:
                raise ConvergenceError(
                    f"monotone likelihood: no events in group {lv:g}; beta diverges")

    beta = 0.0
    ll, score, info = _efron_terms(beta, t, e, x)
    it = 0
    converged = abs(score) < tol
    while not converged and it < max_iter:
        it += 1
        step = score / info if info > 0 else math.copysign(1.0, score)
        step = max(-5.0, min(5.0, step))
        new = beta + step
        new_ll, new_score, new_info = _efron_terms(new, t, e, x)
        halvings = 0
        while new_ll < ll - 1e-12 and halvings < 30:
            step /= 2.0
            new = beta + step
            new_ll, new_score, new_info = _efron_terms(new, t, e, x)
            halvings += 1
        if new_ll < ll - 1e-12:
            break
        beta, ll, score, info = new, new_ll, new_score, new_info
        if abs(beta) > beta_limit:
            raise ConvergenceError(f"beta diverging (|beta| > {beta_limit}); monotone likelihood")
        converged = abs(score) < tol
    if not converged:
        beta = _bisect_score(t, e, x, tol, beta_limit)
        ll, score, info = _efron_terms(beta, t, e, x)
        converged = abs(score) < tol
        if not converged:
            raise ConvergenceError(f"Cox score did not vanish (|score|={abs(score):.3g})")
    if info < 1e-8 or abs(beta) > beta_limit:
        # score vanishes only asymptotically: the likelihood keeps rising with |beta|
        raise ConvergenceError(f"monotone likelihood: information {info:.3g} at beta={beta:.3g}")
    se = 1.0 / math.sqrt(info)
    z = beta / se
    return CoxFit(beta, se, math.exp(beta), math.exp(beta - Z_95 * se),
                  math.exp(beta + Z_95 * se), chi2_sf_1df(z * z), True, it, ll)


def _bisect_score(t, e, x, tol, limit) -> float:
    lo, hi = -limit, limit
    s_lo = _efron_terms(lo, t, e, x)[1]
    s_hi = _efron_terms(hi, t, e, x)[1]
    if s_lo * s_hi > 0:
        raise ConvergenceError("score does not change sign; monotone likelihood")
    mid = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        s = _efron_terms(mid, t, e, x)[1]
        if abs(s) < tol:
            break
        # score is decreasing in beta
        if s > 0:
            lo = mid
        else:
            hi = mid
    return mid


def concordance_index(scores, times, events) -> float:
    """Harrell's C; a pair is comparable when the earlier time is an event.

    Higher score means higher risk, so it should go with the earlier time.
    """
    s = np.asarray(scores, float)
    t = np.asarray(times, float)
    e = np.asarray(events, int)
    comparable = (t[:, None] < t[None, :]) & (e[:, None] == 1)
    n = comparable.sum()
    if n == 0:
        raise UndefinedStatistic("no comparable pairs")
    conc = (s[:, None] > s[None, :]) & comparable
    ties = (s[:, None] == s[None, :]) & comparable
    return float((conc.sum() + 0.5 * ties.sum()) / n)


def chi_square_2x2(table) -> tuple:
    """Pearson chi-square with Yates continuity correction."""
    (a, b), (c, d) = np.asarray(table, dtype=float)
    n = a + b + c + d
    margins = (a + b, c + d, a + c, b + d)
    if min(margins) <= 0:
        raise UndefinedStatistic(f"2x2 table has an empty margin: {[[a, b], [c, d]]}")
    num = max(0.0, abs(a * d - b * c) - n / 2.0)
    stat = n * num * num / (margins[0] * margins[1] * margins[2] * margins[3])
    return float(stat), chi2_sf_1df(stat)


# ---------------------------------------------------------------- reports


@dataclass
class Prediction:
    patient_id: str
    probability: float
    label: int
    time_months: float = math.nan
    event: int = 0


def _auc_or_nan(scores, labels) -> float:
    try:
        return roc_auc(scores, labels)
    except UndefinedStatistic:
        return math.nan


def _split_numeric(values: dict, threshold=None) -> dict:
    nums = {k: float(v) for k, v in values.items()}
    cut = float(np.median(list(nums.values()))) if threshold is None else float(threshold)
    return {k: (f">={cut:g}" if v >= cut else f"<{cut:g}") for k, v in nums.items()}


SUBGROUP_KEYS = ("sex", "race", "age", "stage", "grade_old", "grade_new")


def subgroup_report(predictions, cohort, key: str, tau: float = 0.5, threshold=None) -> list:
    """Per-subgroup N/accuracy/sensitivity/specificity/AUC on pooled test predictions.

    Numeric subgroup values (e.g. age) are split at ``threshold`` (default
    the median).
    """
    if key not in SUBGROUP_KEYS:
        raise KeyError(f"unknown subgroup key {key!r}; expected one of {SUBGROUP_KEYS}")
    by_id = {p.patient_id: p for p in cohort.patients}
    values = {}
    for pr in predictions:
        v = by_id[pr.patient_id].subgroups.get(key)
        if v is not None and v != "":
            values[pr.patient_id] = v
    if not values:
        raise UndefinedStatistic(f"no patient has a value for subgroup {key!r}")
    if all(isinstance(v, (int, float)) for v in values.values()):
        values = _split_numeric(values, threshold)
    rows = []
    for group in sorted({str(v) for v in values.values()}):
        sel = [pr for pr in predictions if str(values.get(pr.patient_id)) == group
               and pr.patient_id in values]
        probs = [pr.probability for pr in sel]
        labels = [pr.label for pr in sel]
        m = confusion_metrics(probs, labels, tau)
        rows.append({"subgroup": key, "value": group, "n": len(sel), "accuracy": m.accuracy,
                     "sensitivity": m.sensitivity, "specificity": m.specificity,
                     "auc": _auc_or_nan(probs, labels)})
    return rows


@dataclass
class BiasComparison:
    name: str
    group_a: str
    group_b: str
    fn_a: int = 0
    n_a: int = 0
    fn_b: int = 0
    n_b: int = 0
    stat: float = math.nan
    p_value: float = math.nan
    note: str = ""
    fnr_a: float = field(init=False, default=math.nan)
    fnr_b: float = field(init=False, default=math.nan)

    def finish(self):
        self.fnr_a = self.fn_a / self.n_a if self.n_a else math.nan
        self.fnr_b = self.fn_b / self.n_b if self.n_b else math.nan
        try:
            self.stat, self.p_value = chi_square_2x2(
                [[self.fn_a, self.n_a - self.fn_a], [self.fn_b, self.n_b - self.fn_b]])
        except UndefinedStatistic as exc:
            self.note = str(exc) if not self.note else self.note
        return self


def bias_report(predictions, cohort, tau: float = 0.5, race_pair=("White", "African American"),
                late_window=(40.0, 60.0), early_recurrence: float = 24.0,
                early_death: float = 60.0) -> list:
    """False-negative-rate comparisons among recurred patients.

    A false negative is a label-1 patient with probability below ``tau``.
    The early-death comparison reads ``death_months`` from the subgroups map.
    """
    by_id = {p.patient_id: p for p in cohort.patients}
    recurred = [(pr, by_id[pr.patient_id]) for pr in predictions if pr.label == 1]

    def compare(name, a_name, b_name, in_a, in_b):
        c = BiasComparison(name, a_name, b_name)
        for pr, pt in recurred:
            fn = int(pr.probability < tau)
            if in_a(pt):
                c.n_a += 1
                c.fn_a += fn
            elif in_b(pt):
                c.n_b += 1
                c.fn_b += fn
        if c.n_a == 0 or c.n_b == 0:
            c.note = f"empty stratum ({a_name if c.n_a == 0 else b_name})"
        return c.finish()

    ages = [float(pt.subgroups["age"]) for _, pt in recurred
            if pt.subgroups.get("age") is not None]
    age_cut = float(np.median(ages)) if ages else math.nan
    lo, hi = late_window

    def sg(pt, key):
        return pt.subgroups.get(key)

    def early_aggr(pt):
        death = sg(pt, "death_months")
        return (pt.event == 1 and pt.time_months <= early_recurrence
                and death is not None and float(death) <= early_death)

    return [
        compare("sex", "female", "male",
                lambda pt: sg(pt, "sex") == "female", lambda pt: sg(pt, "sex") == "male"),
        compare("race", race_pair[0], race_pair[1],
                lambda pt: sg(pt, "race") == race_pair[0], lambda pt: sg(pt, "race") == race_pair[1]),
        compare("age", f">={age_cut:g}", f"<{age_cut:g}",
                lambda pt: sg(pt, "age") is not None and float(sg(pt, "age")) >= age_cut,
                lambda pt: sg(pt, "age") is not None and float(sg(pt, "age")) < age_cut),
        compare("late_recurrence", f"{lo:g}-{hi:g} months", f"<{lo:g} months",
                lambda pt: pt.event == 1 and lo <= pt.time_months < hi,
                lambda pt: pt.event == 1 and pt.time_months < lo),
        compare("early_recurrence_early_death", "early recurrence + early death", "other recurred",
                early_aggr, lambda pt: not early_aggr(pt)),
    ]
