"""Propensity scores and greedy 1:k caliper matching."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy import special, stats

from . import trip_model as tm

log = logging.getLogger(__name__)

CATEGORICAL = ("gender", "age_band", "income_level")
CONTINUOUS = ("avg_travel_time", "avg_n_trips")


class SeparationWarning(UserWarning):
    """Logistic coefficients diverge: the classes are (quasi-)separable."""


class EmptyCohortError(RuntimeError):
    pass


@dataclass
class PropensityModel:
    names: list
    coef: np.ndarray  # intercept first, original feature scale
    cov: np.ndarray
    iterations: int
    grad_norm: float
    converged: bool
    status: str
    loglik_trace: list = field(default_factory=list)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return special.expit(self.coef[0] + X @ self.coef[1:])


def _loglik(eta, y):
    # log(1 + e^eta) computed stably
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def fit_propensity(
    X,
    treated,
    names: Optional[Sequence[str]] = None,
    tol: float = 1e-8,
    max_iter: int = 100,
    max_coef_norm: float = 50.0,
) -> PropensityModel:
    """Logistic regression by iteratively reweighted least squares.

    Features are standardised internally; ``tol`` bounds the Euclidean norm
    of the mean log-likelihood gradient on that scale. A step that lowers the
    likelihood is halved until it does not. If the standardised coefficient
    norm passes ``max_coef_norm`` before convergence the data are treated as
    separable: a :class:`SeparationWarning` is raised and the last iterate
    inside the bound is returned with ``status="separation"``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(treated, dtype=float)
    n, p = X.shape
    if not np.isfinite(X).all():
        raise ValueError("features must be finite")
    if min(y.sum(), n - y.sum()) < 2:
        raise ValueError("need at least two individuals in each class")
    names = list(names) if names is not None else [f"x{i}" for i in range(p)]

    mu, sd = X.mean(axis=0), X.std(axis=0)
    sd[sd == 0] = 1.0
    Z = np.column_stack([np.ones(n), (X - mu) / sd])
    beta = np.zeros(p + 1)
    beta[0] = np.log(y.mean() / (1 - y.mean()))
    eta = Z @ beta
    ll = _loglik(eta, y)
    trace = [ll]
    status, converged, it, gnorm = "max_iter", False, 0, np.inf
    for it in range(1, max_iter + 1):
        prob = special.expit(eta)
        grad = Z.T @ (y - prob)
        gnorm = float(np.linalg.norm(grad / n))
        if gnorm < tol:
            converged, status = True, "converged"
            it -= 1
            break
        w = prob * (1 - prob)
        H = (Z * w[:, None]).T @ Z
        step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            cand_eta = Z @ cand
            cand_ll = _loglik(cand_eta, y)
            if cand_ll >= ll or t < 1e-10:
                break
            t *= 0.5
        if cand_ll < ll:
            status = "stalled"
            break
        if np.linalg.norm(cand[1:]) > max_coef_norm:
            status = "separation"
            warnings.warn("propensity model does not converge: classes look separable", SeparationWarning)
            break
        beta, eta, ll = cand, cand_eta, cand_ll
        trace.append(ll)
    else:
        it = max_iter
    # the gradient also vanishes once probabilities saturate; a strictly separating fit means no finite MLE
    if status == "converged" and eta[y == 1].min() > 0 > eta[y == 0].max():
        status, converged = "separation", False
        warnings.warn("propensity model does not converge: classes look separable", SeparationWarning)

    prob = special.expit(eta)
    w = prob * (1 - prob)
    H = (Z * w[:, None]).T @ Z
    cov_z = np.linalg.pinv(H)
    # back to the original feature scale: beta_j / sd_j, intercept absorbs the means
    T = np.eye(p + 1)
    T[1:, 1:] = np.diag(1 / sd)
    T[0, 1:] = -mu / sd
    coef = T @ beta
    cov = T @ cov_z @ T.T
    return PropensityModel(
        names=["intercept", *names], coef=coef, cov=cov, iterations=it, grad_norm=gnorm,
        converged=converged, status=status, loglik_trace=trace,
    )


# ---------------------------------------------------------------------------
# matching

@dataclass
class MatchedCohort:
    """Matched sets, one row per treated unit; trailing ``control_k`` are missing when the caliper ran out."""

    triples: pd.DataFrame  # treated_id, control_1..control_<ratio>, cohort_month, treated_score, caliper
    caliper: float
    n_dropped: int
    balance: Optional[pd.DataFrame] = None
    chi_square: Optional[pd.DataFrame] = None
    models: dict = field(default_factory=dict)

    def pairs(self) -> pd.DataFrame:
        """Long format: treated_id, control_id, cohort_month."""
        t = self.triples
        ctrl = [c for c in t.columns if c.startswith("control_")]
        long = pd.concat(
            [t[["treated_id", c, "cohort_month"]].rename(columns={c: "control_id"}) for c in ctrl]
        )
        long = long[long["control_id"].notna()]
        return long.sort_values(["cohort_month", "treated_id", "control_id"], kind="stable").reset_index(drop=True)

    @property
    def treated_ids(self) -> np.ndarray:
        return self.triples["treated_id"].to_numpy()

    @property
    def control_ids(self) -> np.ndarray:
        return self.pairs()["control_id"].to_numpy()


class _Buckets:
    """Controls grouped by identical score, with O(1)-amortised 'next non-empty bucket' lookups."""

    def __init__(self, scores: np.ndarray, ids: np.ndarray):
        order = np.lexsort((ids, scores))
        self.values, starts = np.unique(scores[order], return_index=True)
        self.members = [list(g) for g in np.split(ids[order], starts[1:])]
        self.head = [0] * len(self.values)
        m = len(self.values)
        self._left = list(range(m))
        self._right = list(range(m))

    def empty(self, b: int) -> bool:
        return self.head[b] >= len(self.members[b])

    @staticmethod
    def _find(parent, b):
        root = b
        while 0 <= root < len(parent) and parent[root] != root:
            root = parent[root]
        while 0 <= b < len(parent) and parent[b] != b:
            parent[b], b = root, parent[b]
        return root

    def left_of(self, b: int) -> int:
        """Nearest non-empty bucket at or left of ``b`` (-1 if none)."""
        return self._find(self._left, b) if b >= 0 else -1

    def right_of(self, b: int) -> int:
        m = len(self.values)
        return self._find(self._right, b) if b < m else m

    def pop(self, b: int):
        cid = self.members[b][self.head[b]]
        self.head[b] += 1
        if self.empty(b):
            self._left[b] = b - 1
            self._right[b] = b + 1
        return cid


def greedy_match(
    treated_scores, treated_ids, control_scores, control_ids, ratio: int = 2, caliper: float = np.inf
) -> tuple[list, int]:
    """Greedy nearest-neighbour matching without replacement.

    Treated units are visited by descending score (ties: lower id first);
    each takes up to ``ratio`` unused controls with ``|score diff| <= caliper``,
    nearest first, ties broken by lower control id. Returns
    ``([(treated_id, [control ids...]), ...], n_dropped)``.
    """
    ts, tid = np.asarray(treated_scores, float), np.asarray(treated_ids)
    cs, cid = np.asarray(control_scores, float), np.asarray(control_ids)
    buckets = _Buckets(cs, cid)
    vals = buckets.values
    out, dropped = [], 0
    for k in np.lexsort((tid, -ts)):
        s = ts[k]
        chosen = []
        while len(chosen) < ratio:
            pos = int(np.searchsorted(vals, s, side="left"))
            lb = buckets.left_of(pos - 1)
            rb = buckets.right_of(pos)
            best = None
            if lb >= 0:
                best = (s - vals[lb], buckets.members[lb][buckets.head[lb]], lb)
            if rb < len(vals):
                cand = (vals[rb] - s, buckets.members[rb][buckets.head[rb]], rb)
                if best is None or cand[:2] < best[:2]:
                    best = cand
            if best is None or best[0] > caliper:
                break
            chosen.append(buckets.pop(best[2]))
        if chosen:
            out.append((tid[k], chosen))
        else:
            dropped += 1
    return out, dropped


def match(
    scores,
    treated,
    ids=None,
    ratio: int = 2,
    caliper_mult: float = 0.25,
    scale: str = "probability",
) -> MatchedCohort:
    """Match each treated unit to ``ratio`` controls within ``caliper_mult`` SD of all scores."""
    scores = np.asarray(scores, dtype=float)
    treated = np.asarray(treated, dtype=bool)
    ids = np.arange(len(scores)) if ids is None else np.asarray(ids)
    if ((scores <= 0) | (scores >= 1)).any():
        raise ValueError("propensity scores must lie strictly inside (0, 1)")
    if treated.all() or not treated.any():
        raise ValueError("need both treated and control units")
    dist = special.logit(scores) if scale == "logit" else scores
    caliper = caliper_mult * float(np.std(dist, ddof=1))
    pairs, dropped = greedy_match(dist[treated], ids[treated], dist[~treated], ids[~treated], ratio, caliper)
    if not pairs:
        raise EmptyCohortError("cohort empty: no treated unit has a control within the caliper")
    score_of = dict(zip(ids[treated], scores[treated]))
    return MatchedCohort(_triples(pairs, ratio, None, score_of, caliper), caliper, dropped)


def _triples(pairs, ratio, cohort_month, score_of, caliper):
    ctrl = [f"control_{i + 1}" for i in range(ratio)]
    rows = []
    for t, cs in pairs:
        cs = list(cs) + [None] * (ratio - len(cs))
        rows.append((t, *cs, cohort_month, score_of.get(t, np.nan), caliper))
    frame = pd.DataFrame(rows, columns=["treated_id", *ctrl, "cohort_month", "treated_score", "caliper"])
    for c in ctrl:
        frame[c] = frame[c].astype("Int64") if _intlike(frame[c]) else frame[c]
    return frame


def _intlike(col):
    vals = col.dropna()
    return len(vals) == 0 or all(isinstance(v, (int, np.integer)) for v in vals)


# ---------------------------------------------------------------------------
# covariates and balance

def design_matrix(covariates: pd.DataFrame) -> pd.DataFrame:
    """One-hot categoricals (first level dropped) plus continuous covariates."""
    parts = {}
    for cov, levels in (("gender", tm.GENDERS), ("age_band", tm.AGE_BANDS), ("income_level", tm.INCOME_LEVELS)):
        if cov not in covariates:
            continue
        col = covariates[cov].astype(str).to_numpy()
        for level in levels[1:]:
            parts[f"{cov}:{level}"] = (col == str(level)).astype(float)
    for cov in CONTINUOUS:
        if cov in covariates:
            parts[cov] = covariates[cov].to_numpy(dtype=float)
    return pd.DataFrame(parts, index=covariates.index)


def _dummies(covariates: pd.DataFrame) -> pd.DataFrame:
    parts = {}
    for cov, levels in (("gender", tm.GENDERS), ("age_band", tm.AGE_BANDS), ("income_level", tm.INCOME_LEVELS)):
        if cov in covariates:
            col = covariates[cov].astype(str).to_numpy()
            for level in levels:
                parts[f"{cov}:{level}"] = (col == str(level)).astype(float)
    for cov in CONTINUOUS:
        if cov in covariates:
            parts[cov] = covariates[cov].to_numpy(dtype=float)
    return pd.DataFrame(parts, index=covariates.index)


def smd(treated_values, control_values) -> float:
    """Standardised mean difference with the pooled (average) sample variance."""
    a = np.asarray(treated_values, float)
    b = np.asarray(control_values, float)
    diff = a.mean() - b.mean()
    va = a.var(ddof=1) if len(a) > 1 else 0.0
    vb = b.var(ddof=1) if len(b) > 1 else 0.0
    pooled = np.sqrt((va + vb) / 2)
    if pooled == 0:
        return 0.0 if diff == 0 else float(np.sign(diff) * np.inf)
    return float(diff / pooled)


def balance_report(cohort: MatchedCohort, covariates: pd.DataFrame, pool: Optional[pd.DataFrame] = None):
    """SMD before/after matching per covariate level, plus chi-square tests on the matched set.

    ``covariates`` holds one row per (cohort_month, user_id) when matching was
    done per cohort, else one row per user_id; it must contain a boolean
    ``treated`` column for the pre-matching comparison. Returns
    ``(smd_table, chi_square_table)``.
    """
    if cohort.triples.empty:
        raise EmptyCohortError("cohort empty")
    cov = covariates
    keyed = "cohort_month" in cov.columns and cohort.triples["cohort_month"].notna().all()
    key_cols = ["cohort_month", "user_id"] if keyed else ["user_id"]
    cov = cov.set_index(key_cols)
    pairs = cohort.pairs()
    if keyed:
        t_idx = pd.MultiIndex.from_arrays([cohort.triples["cohort_month"], cohort.triples["treated_id"]])
        c_idx = pd.MultiIndex.from_arrays([pairs["cohort_month"], pairs["control_id"].astype(object)])
    else:
        t_idx = pd.Index(cohort.triples["treated_id"])
        c_idx = pd.Index(pairs["control_id"].astype(object))
    c_idx = _align_index(c_idx, cov.index)
    matched_t, matched_c = cov.loc[t_idx], cov.loc[c_idx]
    before_t = cov[cov["treated"].astype(bool)]
    before_c = cov[~cov["treated"].astype(bool)]

    dt, dc = _dummies(before_t), _dummies(before_c)
    mt, mc = _dummies(matched_t), _dummies(matched_c)
    rows = []
    for col in dt.columns:
        rows.append(
            {
                "covariate": col,
                "mean_treated_before": dt[col].mean(),
                "mean_control_before": dc[col].mean(),
                "smd_before": smd(dt[col], dc[col]),
                "mean_treated_after": mt[col].mean(),
                "mean_control_after": mc[col].mean(),
                "smd_after": smd(mt[col], mc[col]),
            }
        )
    smd_table = pd.DataFrame(rows)

    chi = []
    for c in CATEGORICAL:
        if c not in matched_t:
            continue
        table = pd.crosstab(
            np.r_[np.ones(len(matched_t)), np.zeros(len(matched_c))],
            np.r_[matched_t[c].astype(str).to_numpy(), matched_c[c].astype(str).to_numpy()],
        )
        table = table.loc[:, table.sum(axis=0) > 0]
        if table.shape[1] < 2 or table.shape[0] < 2:
            chi.append({"covariate": c, "chi2": 0.0, "dof": 0, "p_value": 1.0})
            continue
        res = stats.chi2_contingency(table.to_numpy(), correction=False)
        chi.append({"covariate": c, "chi2": float(res[0]), "dof": int(res[2]), "p_value": float(res[1])})
    return smd_table, pd.DataFrame(chi)


def _align_index(idx, target):
    # nullable-int control ids must compare equal to plain ints in the covariate index
    if isinstance(idx, pd.MultiIndex):
        lv = [idx.get_level_values(i) for i in range(idx.nlevels)]
        tl = target.get_level_values(target.nlevels - 1)
        last = pd.Index(np.asarray(lv[-1].to_numpy(), dtype=tl.dtype)) if tl.dtype != object else lv[-1]
        return pd.MultiIndex.from_arrays([*lv[:-1], last])
    return pd.Index(np.asarray(idx.to_numpy(), dtype=target.dtype)) if target.dtype != object else idx


def pre_period_covariates(panel: pd.DataFrame, users: pd.DataFrame, month: int) -> pd.DataFrame:
    """Per-user covariates computed over months ``< month``.

    ``avg_n_trips`` averages over all pre-period months (empty months count
    as zero); ``avg_travel_time`` is the trip-weighted mean duration. Users
    without any pre-period trip are left out.
    """
    pre = panel[panel["month"] < month]
    total_dur = (pre["avg_duration"] * pre["n_trips"]).groupby(pre["user_id"]).sum()
    n = pre.groupby("user_id")["n_trips"].sum()
    stats_ = pd.DataFrame({"avg_travel_time": total_dur / n, "avg_n_trips": n / month})
    out = users.set_index("user_id")[["gender", "age_band", "income_level", "enrollment_month"]].join(stats_, how="inner")
    return out.reset_index()


def match_cohorts(
    panel: pd.DataFrame,
    users: pd.DataFrame,
    ratio: int = 2,
    caliper_mult: float = 0.25,
    scale: str = "probability",
) -> tuple[MatchedCohort, pd.DataFrame]:
    """Match within each enrolment-month cohort against never-treated users.

    Covariates are pre-enrolment averages for that cohort. A control used by
    an earlier cohort is not offered again. Returns the pooled cohort (with
    balance tables attached) and the stacked covariate rows used.
    """
    enrol = users["enrollment_month"]
    months = sorted(int(m) for m in enrol.dropna().unique())
    used: set = set()
    triples, cov_rows, dropped, calipers, models = [], [], 0, [], {}
    for m in months:
        cov = pre_period_covariates(panel, users, m)
        is_t = (cov["enrollment_month"] == m).fillna(False).to_numpy(dtype=bool)
        is_c = cov["enrollment_month"].isna().to_numpy() & ~cov["user_id"].isin(used).to_numpy()
        n_missing = int((enrol == m).sum()) - int(is_t.sum())
        cov = cov[is_t | is_c].copy()
        cov["treated"] = is_t[is_t | is_c]
        cov["cohort_month"] = m
        if cov["treated"].sum() < 2 or (~cov["treated"]).sum() < 2:
            dropped += int(cov["treated"].sum()) + n_missing
            log.warning("cohort %d skipped: too few treated or controls", m)
            continue
        X = design_matrix(cov)
        with warnings.catch_warnings():
            warnings.simplefilter("always", SeparationWarning)
            model = fit_propensity(X.to_numpy(), cov["treated"].to_numpy(), names=list(X.columns))
        scores = np.clip(model.predict(X.to_numpy()), 1e-12, 1 - 1e-12)
        dist = special.logit(scores) if scale == "logit" else scores
        caliper = caliper_mult * float(np.std(dist, ddof=1))
        t = cov["treated"].to_numpy()
        ids = cov["user_id"].to_numpy()
        pairs, d = greedy_match(dist[t], ids[t], dist[~t], ids[~t], ratio, caliper)
        dropped += d + n_missing
        cov["score"] = scores
        models[m] = model
        calipers.append(caliper)
        triples.append(_triples(pairs, ratio, m, dict(zip(ids[t], scores[t])), caliper))
        for _, cs in pairs:
            used.update(cs)
        cov_rows.append(cov)
    if not triples or sum(len(t) for t in triples) == 0:
        raise EmptyCohortError("cohort empty: no treated unit could be matched")
    cohort = MatchedCohort(
        pd.concat(triples, ignore_index=True), float(np.max(calipers)), dropped, models=models
    )
    covariates = pd.concat(cov_rows, ignore_index=True)
    cohort.balance, cohort.chi_square = balance_report(cohort, covariates)
    return cohort, covariates
