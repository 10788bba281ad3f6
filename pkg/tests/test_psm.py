import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression

from carbon_incentive import psm
from carbon_incentive import synthcity as sc
from carbon_incentive import trip_model as tm


def brute_force_match(ts, tid, cs, cid, ratio, caliper):
    """O(n^2) oracle for greedy nearest-neighbour matching without replacement."""
    used = np.zeros(len(cs), bool)
    out, dropped = [], 0
    for k in sorted(range(len(ts)), key=lambda i: (-ts[i], tid[i])):
        chosen = []
        for _ in range(ratio):
            best = None
            for j in range(len(cs)):
                if used[j]:
                    continue
                d = abs(cs[j] - ts[k])
                if d <= caliper and (best is None or (d, cid[j]) < best[:2]):
                    best = (d, cid[j], j)
            if best is None:
                break
            used[best[2]] = True
            chosen.append(best[1])
        if chosen:
            out.append((tid[k], chosen))
        else:
            dropped += 1
    return out, dropped


@given(
    st.lists(st.integers(1, 40), min_size=1, max_size=15),
    st.lists(st.integers(1, 40), min_size=1, max_size=30),
    st.integers(1, 3),
    st.sampled_from([0.0, 0.02, 0.05, np.inf]),
)
def test_greedy_match_equals_brute_force(t_raw, c_raw, ratio, caliper):
    # coarse scores force plenty of ties
    ts = np.array(t_raw) / 40
    cs = np.array(c_raw) / 40
    tid = np.arange(len(ts)) * 2
    cid = np.arange(len(cs)) * 3 + 1000
    got = psm.greedy_match(ts, tid, cs, cid, ratio, caliper)
    want = brute_force_match(ts, tid, cs, cid, ratio, caliper)
    assert [(int(a), [int(c) for c in b]) for a, b in got[0]] == [(int(a), [int(c) for c in b]) for a, b in want[0]]
    assert got[1] == want[1]


def test_fit_propensity_matches_sklearn():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((2000, 3)) * [1.0, 5.0, 0.2] + [0, 10, 1]
    eta = -0.5 + X @ [0.8, -0.1, 2.0]
    y = rng.random(2000) < 1 / (1 + np.exp(-eta))
    model = psm.fit_propensity(X, y, names=["a", "b", "c"])
    ref = LogisticRegression(penalty=None, tol=1e-12, max_iter=10_000).fit(X, y)
    np.testing.assert_allclose(model.coef, np.r_[ref.intercept_, ref.coef_.ravel()], rtol=1e-4, atol=1e-6)
    assert model.converged
    np.testing.assert_allclose(model.predict(X), ref.predict_proba(X)[:, 1], atol=1e-6)


def test_separation_warns():
    X = np.r_[np.zeros(20), np.ones(20)][:, None]
    y = np.r_[np.zeros(20), np.ones(20)].astype(bool)
    with pytest.warns(psm.SeparationWarning):
        model = psm.fit_propensity(X, y)
    assert model.status == "separation"


@pytest.mark.parametrize(
    "t,c,expected",
    [([1.0, 3.0], [1.0, 3.0], 0.0), ([2.0, 4.0], [0.0, 2.0], 2 / np.sqrt(2.0)), ([1.0, 1.0], [1.0, 1.0], 0.0)],
)
def test_smd(t, c, expected):
    assert psm.smd(np.array(t), np.array(c)) == pytest.approx(expected)


def test_match_caliper_and_ratio():
    rng = np.random.default_rng(2)
    scores = rng.uniform(0.05, 0.95, 300)
    treated = rng.random(300) < 0.2
    cohort = psm.match(scores, treated, ratio=2, caliper_mult=0.25)
    assert cohort.caliper == pytest.approx(0.25 * np.std(scores, ddof=1))
    pairs = cohort.pairs()
    diffs = np.abs(scores[pairs["treated_id"]] - scores[pairs["control_id"].astype(int)])
    assert (diffs <= cohort.caliper).all()
    assert pairs["control_id"].is_unique
    assert len(cohort.triples) + cohort.n_dropped == treated.sum()


def test_match_rejects_bad_scores():
    with pytest.raises(ValueError):
        psm.match(np.array([0.0, 0.5]), np.array([True, False]))
    with pytest.raises(ValueError):
        psm.match(np.array([0.3, 0.5]), np.array([True, True]))


def test_empty_cohort():
    scores = np.array([0.9, 0.1, 0.1, 0.1])
    with pytest.raises(psm.EmptyCohortError):
        psm.match(scores, np.array([True, False, False, False]), caliper_mult=0.01)


@pytest.fixture(scope="module")
def small_scenario():
    cfg = sc.ScenarioConfig(n_individuals=4000, seed=3, planted_att=0.1)
    s = sc.generate(cfg)
    panel = tm.build_panel(s.trips, s.users, cfg.bounds)
    return s, panel


def test_match_cohorts_structure(small_scenario):
    s, panel = small_scenario
    cohort, covs = psm.match_cohorts(panel, s.users)
    users = s.users.set_index("user_id")
    controls = cohort.pairs()["control_id"].astype(int)
    assert controls.is_unique
    assert users.loc[controls, "enrollment_month"].isna().all()
    enrolled = users.loc[cohort.treated_ids, "enrollment_month"].to_numpy(dtype=int)
    assert (enrolled == cohort.triples["cohort_month"].to_numpy()).all()
    # 0.1 is the large-sample target; a 4k-person city leaves some sampling noise
    assert cohort.balance["smd_after"].abs().max() < 0.15
    assert set(cohort.triples["cohort_month"].unique()) <= set(cohort.models)


def test_pre_period_covariates_oracle(small_scenario):
    s, panel = small_scenario
    month = 6
    covs = psm.pre_period_covariates(panel, s.users, month).set_index("user_id")
    trips = s.trips[cfg_month(s) < month]
    grp = trips.groupby("user_id")
    np.testing.assert_allclose(covs.loc[grp.size().index, "avg_n_trips"], grp.size() / month)
    np.testing.assert_allclose(covs.loc[grp.size().index, "avg_travel_time"], grp["duration_min"].mean(), rtol=1e-10)


def cfg_month(s):
    return s.config.bounds.month_index(s.trips["departure"])


def test_design_matrix_drops_reference_levels():
    covs = pd.DataFrame({"gender": ["F", "M"], "age_band": ["<=18", ">=50"], "income_level": [1, 3], "avg_travel_time": [1.0, 2.0], "avg_n_trips": [3.0, 4.0]})
    X = psm.design_matrix(covs)
    assert "gender:F" not in X and "gender:M" in X
    assert X.shape[1] == 1 + 6 + 2 + 2
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert np.isfinite(X.to_numpy()).all()
