"""Two-way fixed-effects estimators: ATT, event study, heterogeneity, placebo."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from . import trip_model as tm

log = logging.getLogger(__name__)


class CollinearityError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message, last_change):
        super().__init__(message)
        self.last_change = last_change


def demean_two_way(columns, unit, time, tol: float = 1e-10, max_sweeps: int = 500):
    """Sweep out unit and time means by alternating projections.

    Parameters
    ----------
    columns : array (n,) or (n, p)
    unit, time : integer-like group labels, length n

    Returns
    -------
    (residuals, sweeps) with residuals shaped like ``columns``.
    """
    X = np.array(columns, dtype=float, copy=True)
    squeeze = X.ndim == 1
    X = X.reshape(len(X), -1)
    u = pd.factorize(np.asarray(unit))[0]
    t = pd.factorize(np.asarray(time))[0]
    nu, nt = np.bincount(u), np.bincount(t)
    change = np.inf
    for sweep in range(1, max_sweeps + 1):
        change = 0.0
        for j in range(X.shape[1]):
            col = X[:, j]
            mu = np.bincount(u, weights=col) / nu
            col -= mu[u]
            mt = np.bincount(t, weights=col) / nt
            col -= mt[t]
            change = max(change, float(np.abs(mu).max()), float(np.abs(mt).max()))
        if change < tol:
            break
    else:
        raise ConvergenceError(f"demeaning did not converge in {max_sweeps} sweeps (max change {change:.3g})", change)
    return (X[:, 0] if squeeze else X), sweep


@dataclass
class FEDesign:
    """Outcome, regressors and panel identifiers for a two-way FE regression."""

    y: np.ndarray
    X: np.ndarray
    names: list
    unit: np.ndarray
    time: np.ndarray
    cluster: Optional[np.ndarray] = None
    outcome: str = "pst"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float).reshape(len(self.y), -1)
        if self.cluster is None:
            self.cluster = self.unit
        if len(self.names) != self.X.shape[1]:
            raise ValueError("one name per regressor")
        if pd.isna(self.unit).any() or pd.isna(self.time).any():
            raise ValueError("every row needs a unit id and a time id")


@dataclass
class FEEstimate:
    names: list
    coef: np.ndarray
    se: np.ndarray
    vcov: np.ndarray
    classical_se: np.ndarray
    n_obs: int
    n_units: int
    n_clusters: int
    n_singletons: int
    sweeps: int
    outcome: str = "pst"
    extra: dict = field(default_factory=dict)

    @property
    def t(self) -> np.ndarray:
        return self.coef / self.se

    @property
    def p(self) -> np.ndarray:
        return 2 * stats.t.sf(np.abs(self.t), df=max(self.n_clusters - 1, 1))

    def __getitem__(self, name: str) -> float:
        return float(self.coef[self.names.index(name)])

    def se_of(self, name: str) -> float:
        return float(self.se[self.names.index(name)])

    def t_of(self, name: str) -> float:
        return float(self.t[self.names.index(name)])

    def table(self) -> pd.DataFrame:
        return pd.DataFrame({"term": self.names, "coef": self.coef, "se": self.se, "t": self.t, "p": self.p})

    def combination(self, weights: dict) -> tuple[float, float]:
        """Value and standard error of a linear combination of coefficients."""
        w = np.zeros(len(self.names))
        for k, v in weights.items():
            w[self.names.index(k)] = v
        return float(w @ self.coef), float(np.sqrt(w @ self.vcov @ w))

    def to_json(self) -> dict:
        return {
            "outcome": self.outcome,
            "terms": [
                {"term": n, "coef": float(c), "se": float(s), "t": float(t), "p": float(p)}
                for n, c, s, t, p in zip(self.names, self.coef, self.se, self.t, self.p)
            ],
            "n_obs": self.n_obs,
            "n_units": self.n_units,
            "n_singletons_dropped": self.n_singletons,
            "demeaning_sweeps": self.sweeps,
            **self.extra,
        }


def fit(design: FEDesign, tol: float = 1e-10, max_sweeps: int = 500) -> FEEstimate:
    """OLS on two-way demeaned data with unit-clustered (CR1) standard errors."""
    unit = np.asarray(design.unit)
    counts = pd.Series(unit).map(pd.Series(unit).value_counts()).to_numpy()
    keep = counts > 1
    n_single = int((~keep).sum())
    y, X = design.y[keep], design.X[keep]
    unit, time, cluster = unit[keep], np.asarray(design.time)[keep], np.asarray(design.cluster)[keep]
    if len(y) == 0:
        raise CollinearityError("treatment collinear with fixed effects: no unit has two observations")

    Z, sweeps = demean_two_way(np.column_stack([y, X]), unit, time, tol, max_sweeps)
    yt, Xt = Z[:, 0], Z[:, 1:]
    raw_norm = np.linalg.norm(X - X.mean(axis=0), axis=0)
    dm_norm = np.linalg.norm(Xt, axis=0)
    for j, name in enumerate(design.names):
        if dm_norm[j] <= 1e-9 * max(1.0, raw_norm[j]) or dm_norm[j] < 1e-12:
            raise CollinearityError(f"treatment collinear with fixed effects: {name}")
    _check_rank(Xt, design.names)

    XtX_inv = np.linalg.inv(Xt.T @ Xt)
    beta = XtX_inv @ (Xt.T @ yt)
    e = yt - Xt @ beta
    n, k = Xt.shape
    g_codes = pd.factorize(cluster)[0]
    G = int(g_codes.max()) + 1
    scores = np.zeros((G, k))
    np.add.at(scores, g_codes, Xt * e[:, None])
    meat = scores.T @ scores
    adj = G / max(G - 1, 1) * (n - 1) / max(n - k, 1)
    vcov = adj * XtX_inv @ meat @ XtX_inv
    n_units = len(np.unique(unit))
    n_times = len(np.unique(time))
    dof = max(n - k - n_units - n_times + 1, 1)
    classical = np.sqrt(np.diag(XtX_inv) * (e @ e) / dof)
    se = np.sqrt(np.diag(vcov))
    return FEEstimate(
        names=list(design.names), coef=beta, se=se, vcov=vcov, classical_se=classical, n_obs=n,
        n_units=n_units, n_clusters=G, n_singletons=n_single, sweeps=sweeps, outcome=design.outcome,
    )


def _check_rank(Xt, names):
    if Xt.shape[1] < 2:
        return
    Q, R = np.linalg.qr(Xt)
    diag = np.abs(np.diag(R))
    scale = np.linalg.norm(Xt, axis=0)
    bad = diag <= 1e-9 * np.maximum(scale, 1e-300)
    if bad.any():
        raise CollinearityError(f"collinear regressor: {names[int(np.argmax(bad))]}")


# ---------------------------------------------------------------------------
# designs built from the monthly panel

def att_design(panel: pd.DataFrame, outcome: str = "pst", treatment: str = "dp") -> FEDesign:
    return FEDesign(
        y=panel[outcome].to_numpy(dtype=float),
        X=panel[treatment].to_numpy(dtype=float),
        names=["dp"],
        unit=panel["user_id"].to_numpy(),
        time=panel["month"].to_numpy(),
        outcome=outcome,
    )


def estimate_att(panel: pd.DataFrame, outcome: str = "pst") -> FEEstimate:
    """Average effect of enrolment: slope on the treatment dummy with unit and month effects."""
    est = fit(att_design(panel, outcome))
    if est.coef.size and not np.isfinite(est.se).all():
        raise CollinearityError("treatment collinear with fixed effects")
    return est


def event_columns(panel: pd.DataFrame, lo: int = tm.EVENT_MIN, hi: int = tm.EVENT_MAX, ref: int = tm.EVENT_REF):
    enrol = panel["enrollment_month"].astype("Int64").to_numpy(dtype=float, na_value=np.nan)
    treated = ~np.isnan(enrol)
    k = np.where(treated, np.clip(panel["month"].to_numpy() - np.nan_to_num(enrol), lo, hi), np.nan)
    ks = [x for x in range(lo, hi + 1) if x != ref]
    X = np.column_stack([(k == x).astype(float) for x in ks])
    return X, [f"k={x}" for x in ks], ks


def estimate_event_study(
    panel: pd.DataFrame, outcome: str = "pst", lo: int = tm.EVENT_MIN, hi: int = tm.EVENT_MAX, ref: int = tm.EVENT_REF
) -> FEEstimate:
    """Dynamic effects by months since enrolment; ``ref`` is omitted, endpoints binned."""
    X, names, ks = event_columns(panel, lo, hi, ref)
    if not X.any():
        raise CollinearityError("treatment collinear with fixed effects: no treated observations")
    design = FEDesign(
        y=panel[outcome].to_numpy(dtype=float), X=X, names=names,
        unit=panel["user_id"].to_numpy(), time=panel["month"].to_numpy(), outcome=outcome,
    )
    try:
        est = fit(design)
    except CollinearityError as exc:
        raise CollinearityError(f"treatment collinear with fixed effects ({exc})") from exc
    est.extra["event_times"] = ks
    est.extra["reference"] = ref
    return est


def event_table(est: FEEstimate, level: float = 0.95) -> pd.DataFrame:
    """Plot-ready rows: k, beta, se, ci_low, ci_high."""
    z = stats.norm.ppf(0.5 + level / 2)
    ks = est.extra.get("event_times") or [int(n.split("=")[1]) for n in est.names]
    return pd.DataFrame(
        {"k": ks, "beta": est.coef, "se": est.se, "ci_low": est.coef - z * est.se, "ci_high": est.coef + z * est.se}
    )


def segment_columns(users: pd.DataFrame, covariates: Sequence[str]) -> pd.DataFrame:
    """Indicator columns per covariate level (first level of each covariate dropped)."""
    levels = {"gender": tm.GENDERS, "age_band": tm.AGE_BANDS, "income_level": tm.INCOME_LEVELS}
    out = pd.DataFrame({"user_id": users["user_id"].to_numpy()})
    for cov in covariates:
        vals = users[cov].astype(str).to_numpy()
        levs = levels.get(cov) or sorted(set(vals))
        for level in list(levs)[1:]:
            out[f"{cov}:{level}"] = (vals == str(level)).astype(float)
    return out


def estimate_heterogeneous(panel: pd.DataFrame, segments: pd.DataFrame, outcome: str = "pst") -> FEEstimate:
    """Treatment effect with treatment-by-segment interactions.

    ``segments`` holds ``user_id`` plus time-invariant numeric columns. Each
    is centred on its mean over treated observations, so the ``dp``
    coefficient stays the average effect on the treated. Use
    :func:`segment_effect` for the effect within one segment.
    """
    names = [c for c in segments.columns if c != "user_id"]
    V = segments.set_index("user_id").loc[panel["user_id"].to_numpy(), names].to_numpy(dtype=float)
    dp = panel["dp"].to_numpy(dtype=float)
    treated_rows = dp == 1
    if not treated_rows.any():
        raise CollinearityError("treatment collinear with fixed effects: no treated observations")
    centre = V[treated_rows].mean(axis=0)
    Vc = V - centre
    for j, n in enumerate(names):
        if np.allclose(Vc[treated_rows, j], 0.0):
            raise CollinearityError(f"collinear interaction: {n} is constant among treated observations")
    X = np.column_stack([dp, dp[:, None] * Vc])
    design = FEDesign(
        y=panel[outcome].to_numpy(dtype=float), X=X, names=["dp", *[f"dp*{n}" for n in names]],
        unit=panel["user_id"].to_numpy(), time=panel["month"].to_numpy(), outcome=outcome,
    )
    est = fit(design)
    est.extra["centre"] = dict(zip(names, centre.tolist()))
    return est


def segment_effect(est: FEEstimate, values: dict) -> tuple[float, float]:
    """Effect (and SE) for a segment given its raw interaction values, e.g. ``{"gender:M": 1.0}``.

    Interaction columns not named in ``values`` are taken as 0.
    """
    centre = est.extra["centre"]
    weights = {"dp": 1.0}
    for n, c in centre.items():
        weights[f"dp*{n}"] = values.get(n, 0.0) - c
    return est.combination(weights)


def placebo(panel: pd.DataFrame, shift: int, pre_only: bool = True, outcome: str = "pst") -> FEEstimate:
    """Re-estimate the average effect with enrolment moved ``shift`` months earlier.

    With ``pre_only`` (default) treated units keep only their genuinely
    untreated months, so any placebo 'effect' is a pre-trend. ``shift=0``
    returns the ordinary estimate.
    """
    if shift == 0:
        return estimate_att(panel, outcome)
    if shift < 0:
        raise ValueError("shift must be non-negative")
    enrol = panel["enrollment_month"].astype("Int64").to_numpy(dtype=float, na_value=np.nan)
    treated = ~np.isnan(enrol)
    fake = enrol - shift
    if (fake[treated] < 1).any():
        raise ValueError("shifted enrolment falls outside the study window")
    month = panel["month"].to_numpy()
    keep = ~treated | (month < np.nan_to_num(enrol, nan=np.inf)) if pre_only else np.ones(len(panel), bool)
    sub = panel.loc[keep].copy()
    sub["dp"] = (treated[keep] & (month[keep] >= np.nan_to_num(fake[keep], nan=np.inf))).astype(np.int8)
    est = estimate_att(sub, outcome)
    est.extra.update({"placebo_shift": shift, "pre_only": pre_only})
    return est


def select_sample(
    panel: pd.DataFrame,
    treated_ids,
    control_ids,
    control_group: str = "never",
) -> pd.DataFrame:
    """Restrict the panel to matched units.

    ``control_group="notyet"`` also keeps other enrolled users' months before
    their own enrolment as untreated observations.
    """
    ids = set(np.asarray(treated_ids).tolist()) | set(np.asarray(control_ids).tolist())
    in_ids = panel["user_id"].isin(ids).to_numpy()
    if control_group == "never":
        return panel.loc[in_ids].reset_index(drop=True)
    if control_group != "notyet":
        raise ValueError("control_group must be 'never' or 'notyet'")
    enrol = panel["enrollment_month"].astype("Int64").to_numpy(dtype=float, na_value=np.nan)
    extra = ~in_ids & ~np.isnan(enrol) & (panel["month"].to_numpy() < np.nan_to_num(enrol, nan=-1))
    sub = panel.loc[in_ids | extra].copy()
    # pre-enrolment months of unmatched enrollees act as controls only
    sub.loc[extra[in_ids | extra], "enrollment_month"] = pd.NA
    return sub.reset_index(drop=True)
