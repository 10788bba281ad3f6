import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from carbon_incentive import did
from oracles import dummy_ols, random_panel


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("unbalanced", [False, True])
def test_fit_matches_dummy_ols(seed, unbalanced):
    rng = np.random.default_rng(seed)
    y, X, unit, time = random_panel(rng, unbalanced=unbalanced)
    est = did.fit(did.FEDesign(y, X, ["a", "b"], unit, time))
    coef, se = dummy_ols(y, X, unit, time)
    np.testing.assert_allclose(est.coef, coef, atol=1e-8)
    np.testing.assert_allclose(est.classical_se, se, rtol=1e-6)


def test_clustered_se_oracle():
    rng = np.random.default_rng(11)
    y, X, unit, time = random_panel(rng, n_units=40, k=1)
    est = did.fit(did.FEDesign(y, X, ["x"], unit, time))
    # CR1 on the dummy regression, restricted to the slope block
    U = pd.get_dummies(unit).to_numpy(float)
    T = pd.get_dummies(time).to_numpy(float)[:, 1:]
    Z = np.column_stack([X, U, T])
    inv = np.linalg.pinv(Z.T @ Z)
    b = inv @ Z.T @ y
    e = y - Z @ b
    # the slope row of (Z'Z)^-1 Z' equals the demeaned regressor over its squared norm
    w = (inv @ Z.T)[0]
    G = len(np.unique(unit))
    n = len(y)
    s = np.array([np.sum(w[unit == g] * e[unit == g]) for g in np.unique(unit)])
    k = 1
    var = G / (G - 1) * (n - 1) / (n - k) * np.sum(s**2)
    assert est.se[0] == pytest.approx(np.sqrt(var), rel=1e-6)


def test_singletons_dropped():
    rng = np.random.default_rng(3)
    y, X, unit, time = random_panel(rng, unbalanced=False)
    y2 = np.append(y, 100.0)
    X2 = np.vstack([X, [[5.0, 5.0]]])
    est = did.fit(did.FEDesign(y2, X2, ["a", "b"], np.append(unit, 999), np.append(time, 0)))
    base = did.fit(did.FEDesign(y, X, ["a", "b"], unit, time))
    assert est.n_singletons == 1
    np.testing.assert_allclose(est.coef, base.coef, atol=1e-10)


def test_time_invariant_regressor_is_collinear():
    rng = np.random.default_rng(0)
    y, X, unit, time = random_panel(rng)
    X[:, 1] = unit * 0.5
    with pytest.raises(did.CollinearityError, match="b"):
        did.fit(did.FEDesign(y, X, ["a", "b"], unit, time))


def staggered_panel(rng, n=120, months=13, att=0.1, pre_trend=0.0):
    enrol = np.where(rng.random(n) < 0.5, rng.integers(4, 10, n), -1)
    rows = []
    for u in range(n):
        alpha = rng.normal(0.3, 0.1)
        for t in range(months):
            e = enrol[u]
            dp = int(e >= 0 and t >= e)
            y = alpha + 0.01 * t + att * dp + (pre_trend * (t - e) if e >= 0 and t < e else 0.0) + rng.normal(0, 0.02)
            rows.append((u, t, y, dp, e if e >= 0 else pd.NA))
    panel = pd.DataFrame(rows, columns=["user_id", "month", "pst", "dp", "enrollment_month"])
    panel["enrollment_month"] = panel["enrollment_month"].astype("Int64")
    return panel


def test_att_recovers_planted_effect():
    panel = staggered_panel(np.random.default_rng(5))
    est = did.estimate_att(panel)
    assert est["dp"] == pytest.approx(0.1, abs=0.01)
    assert est.se_of("dp") > 0


def test_placebo_zero_shift_is_att():
    panel = staggered_panel(np.random.default_rng(6))
    assert did.placebo(panel, 0)["dp"] == pytest.approx(did.estimate_att(panel)["dp"], abs=1e-14)


@pytest.mark.parametrize("shift", [1, 2])
def test_placebo_null_without_pretrend(shift):
    panel = staggered_panel(np.random.default_rng(7), n=300)
    assert abs(did.placebo(panel, shift).t_of("dp")) < 3


def test_placebo_detects_pretrend():
    panel = staggered_panel(np.random.default_rng(8), n=300, pre_trend=0.02)
    assert abs(did.placebo(panel, 2).t_of("dp")) > 3


def test_placebo_outside_window():
    panel = staggered_panel(np.random.default_rng(9))
    with pytest.raises(ValueError, match="window"):
        did.placebo(panel, 5)


def test_event_study_flat_profile():
    panel = staggered_panel(np.random.default_rng(10), n=400)
    tab = did.event_table(did.estimate_event_study(panel)).set_index("k")
    assert -1 not in tab.index
    post = tab.loc[tab.index >= 0, "beta"]
    pre = tab.loc[tab.index < -1, "beta"]
    np.testing.assert_allclose(post, 0.1, atol=0.01)
    np.testing.assert_allclose(pre, 0.0, atol=0.01)
    assert ((tab["ci_low"] <= tab["beta"]) & (tab["beta"] <= tab["ci_high"])).all()


def test_no_treated_rows():
    panel = staggered_panel(np.random.default_rng(1))
    panel["dp"] = 0
    with pytest.raises(did.CollinearityError):
        did.estimate_att(panel)


def test_segment_effects():
    rng = np.random.default_rng(12)
    panel = staggered_panel(rng, n=400)
    users = pd.DataFrame({"user_id": np.arange(400), "gender": np.where(np.arange(400) % 2, "M", "F")})
    male = panel["user_id"] % 2 == 1
    panel.loc[male & (panel["dp"] == 1), "pst"] += 0.05
    est = did.estimate_heterogeneous(panel, did.segment_columns(users, ["gender"]))
    f, _ = did.segment_effect(est, {})
    m, _ = did.segment_effect(est, {"gender:M": 1.0})
    assert f == pytest.approx(0.10, abs=0.01)
    assert m == pytest.approx(0.15, abs=0.01)


@given(st.integers(0, 2**31 - 1))
def test_demeaning_idempotent(seed):
    rng = np.random.default_rng(seed)
    _, X, unit, time = random_panel(rng, n_units=8, n_periods=5, k=1)
    once, _ = did.demean_two_way(X, unit, time)
    twice, _ = did.demean_two_way(once, unit, time)
    np.testing.assert_allclose(once, twice, atol=1e-8)
    # residual has zero unit and time means
    assert np.abs(pd.Series(once[:, 0]).groupby(unit).mean()).max() < 1e-8
