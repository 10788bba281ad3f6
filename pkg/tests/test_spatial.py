import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.decomposition import PCA

from carbon_incentive import trip_model as tm
from carbon_incentive.spatial import (
    REGRESSORS,
    EmptyDayWarning,
    GCNParams,
    RankDeficientError,
    ZoneGraph,
    build_daily_graphs,
    categorize,
    cluster_zones,
    forward,
    gcn_train,
    gradient_check,
    normalized_adjacency,
    pca_2d,
    purity,
    regress_infrastructure,
    zone_outcomes,
)
from oracles import dense_oracle, random_params, tiny_graph


@pytest.mark.parametrize("seed", range(10))
def test_forward_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    g = tiny_graph(rng)
    p = random_params(rng, GCNParams())
    a_o, a_d = normalized_adjacency(g.adjacency())
    out, _, _ = forward(p, a_o, a_d, g.features)
    np.testing.assert_allclose(out, dense_oracle(p, g), atol=1e-10)


def test_normalized_adjacency_formula():
    g = tiny_graph(np.random.default_rng(0), n=5)
    a_o, a_d = normalized_adjacency(g.adjacency())
    A = g.adjacency().toarray() + np.eye(5)
    r, c = A.sum(axis=1), A.sum(axis=0)
    np.testing.assert_allclose(a_o.toarray(), A / np.sqrt(np.outer(r, c)), atol=1e-14)
    np.testing.assert_allclose(a_d.toarray(), a_o.toarray().T)


def test_swap_exchanges_channels():
    rng = np.random.default_rng(3)
    g = tiny_graph(rng, n=6)
    p = random_params(rng)
    a_o, a_d = normalized_adjacency(g.adjacency())
    h2 = p["W2o"].shape[1]
    q = dict(p)
    for k in ("W1", "b1", "W2", "b2"):
        q[f"{k}o"], q[f"{k}d"] = p[f"{k}d"], p[f"{k}o"]
    q["W3"] = np.vstack([p["W3"][h2:], p["W3"][:h2]])
    swapped, _, _ = forward(p, a_o, a_d, g.features, swap=True)
    relabelled, _, _ = forward(q, a_o, a_d, g.features)
    np.testing.assert_allclose(swapped, relabelled, atol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_gradient_check_small(seed):
    rng = np.random.default_rng(100 + seed)
    assert gradient_check(random_params(rng), tiny_graph(rng)) < 1e-4


def test_gradient_check_rejects_large_graph():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        gradient_check(random_params(rng), tiny_graph(rng, n=7))


def test_feature_dimension_mismatch():
    rng = np.random.default_rng(0)
    g = tiny_graph(rng, n_feat=5)
    a_o, a_d = normalized_adjacency(g.adjacency())
    with pytest.raises(ValueError, match="dimension"):
        forward(random_params(rng), a_o, a_d, g.features)


def synthetic_graphs(n_days=12, n=9, seed=0):
    rng = np.random.default_rng(seed)
    gs = []
    for t in range(n_days):
        g = tiny_graph(rng, n=n)
        x = rng.standard_normal((n, 12))
        y = np.column_stack([np.tanh(x[:, :4]), x[:, 4:5] ** 2])
        gs.append(ZoneGraph(pd.Timestamp("2023-01-01") + pd.Timedelta(days=t), g.zone_ids, g.src, g.dst, g.edge_weight, x, y))
    return gs


@pytest.mark.parametrize("split", ["day", "zone"])
@pytest.mark.parametrize("optimizer,batch", [("gd", None), ("adam", None), ("adam", 3)])
def test_best_checkpoint_is_minimum(split, optimizer, batch):
    cfg = GCNParams(conv_widths=(8, 8), dense_widths=(8, 5), lr=0.01, max_iters=40, patience=40,
                    optimizer=optimizer, batch_graphs=batch, split=split, seed=1)
    model = gcn_train(synthetic_graphs(), cfg)
    logged = [te for _, _, te in model.trace]
    assert min(logged) == logged[model.best_iteration]
    assert all(model.trace[model.best_iteration][2] <= te for te in logged)
    assert model.metrics["MSE"] == pytest.approx(logged[model.best_iteration], rel=1e-4)


def test_training_is_deterministic():
    cfg = GCNParams(conv_widths=(8, 8), dense_widths=(8, 5), lr=0.01, max_iters=15, optimizer="adam", batch_graphs=4, seed=7)
    a, b = gcn_train(synthetic_graphs(), cfg), gcn_train(synthetic_graphs(), cfg)
    np.testing.assert_array_equal(np.array(a.trace), np.array(b.trace))
    np.testing.assert_array_equal(a.zone_embeddings(synthetic_graphs()), b.zone_embeddings(synthetic_graphs()))


def test_daily_graphs_match_brute_force():
    rng = np.random.default_rng(5)
    bounds = tm.StudyBounds(n_months=1, rows=3, cols=3)
    n = 400
    trips = pd.DataFrame(
        {
            "departure": pd.Timestamp("2022-12-01") + pd.to_timedelta(rng.integers(0, 5 * 1440, n), unit="m"),
            "origin_row": rng.integers(0, 3, n), "origin_col": rng.integers(0, 3, n),
            "dest_row": rng.integers(0, 3, n), "dest_col": rng.integers(0, 3, n),
            "mode": rng.integers(0, 4, n), "duration_min": rng.uniform(5, 60, n), "distance_km": rng.uniform(1, 9, n),
        }
    )
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        graphs = build_daily_graphs(trips, bounds)
    assert len(graphs) == 31
    assert sum(issubclass(w.category, EmptyDayWarning) for w in caught) == 26
    g = graphs[2]
    day = trips[trips["departure"].dt.normalize() == g.date]
    o = day["origin_row"] * 3 + day["origin_col"]
    d = day["dest_row"] * 3 + day["dest_col"]
    A = np.zeros((9, 9))
    np.add.at(A, (o, d), 1)
    np.testing.assert_array_equal(g.adjacency().toarray(), A)
    for z in range(9):
        for m in range(4):
            sel = (o == z) & (day["mode"] == m)
            assert g.features[z, 3 * m] == sel.sum()
            if sel.any():
                assert g.features[z, 3 * m + 1] == pytest.approx(day["duration_min"][sel].mean())


def blobs(rng, k, per=20, dim=6, sep=8.0):
    centres = rng.standard_normal((k, dim)) * sep
    x = np.vstack([c + rng.standard_normal((per, dim)) for c in centres])
    return x, np.repeat(np.arange(k), per)


@pytest.mark.parametrize("k", [2, 3, 4, 5])
def test_cluster_selects_true_k(k):
    x, truth = blobs(np.random.default_rng(k), k)
    res = cluster_zones(x, np.arange(len(x)), k_range=(2, 8))
    assert res.k == k
    assert purity(res.labels, truth) == 1.0


def test_degenerate_embeddings():
    res = cluster_zones(np.ones((20, 3)), np.arange(20))
    assert res.degenerate and res.k == 1


def test_categories_follow_reduction():
    labels = np.array([0, 0, 1, 1, 2, 2, 3, 3])
    red = np.array([0.1, 0.1, 0.4, 0.4, 0.0, 0.0, 0.2, 0.2])
    assert categorize(labels, red).tolist() == ["LI", "LI", "HI", "HI", "NI", "NI", "MI", "MI"]


@given(st.lists(st.integers(0, 3), min_size=1, max_size=40))
def test_purity_bounds(labels):
    truth = list(reversed(labels))
    p = purity(labels, truth)
    assert 0 < p <= 1
    assert purity(labels, labels) == 1.0


def test_pca_matches_sklearn_up_to_sign():
    x = np.random.default_rng(1).standard_normal((50, 5)) @ np.diag([5, 3, 1, 0.5, 0.1])
    ours = pca_2d(x)
    ref = PCA(2).fit_transform(x)
    for j in range(2):
        assert np.allclose(ours[:, j], ref[:, j], atol=1e-8) or np.allclose(ours[:, j], -ref[:, j], atol=1e-8)


def test_regression_matches_lstsq():
    rng = np.random.default_rng(2)
    X = pd.DataFrame(rng.standard_normal((60, 3)), columns=["a", "b", "c"])
    y = 1 + X.to_numpy() @ [0.5, -1.0, 2.0] + 0.1 * rng.standard_normal(60)
    reg = regress_infrastructure(y, X)
    A = np.column_stack([np.ones(60), X])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    np.testing.assert_allclose(reg.coef, coef, atol=1e-10)
    resid = y - A @ coef
    se = np.sqrt(np.diag(np.linalg.inv(A.T @ A)) * (resid @ resid) / (60 - 4))
    np.testing.assert_allclose(reg.se, se, rtol=1e-8)
    assert reg["b"] == pytest.approx(coef[2])


def test_regression_rank_deficient():
    rng = np.random.default_rng(3)
    X = pd.DataFrame({"a": rng.random(20), "b": rng.random(20)})
    X["c"] = 2 * X["a"]
    with pytest.raises(RankDeficientError, match="c"):
        regress_infrastructure(rng.random(20), X)


def test_zone_outcomes_nan_for_empty_zones():
    bounds = tm.StudyBounds(n_months=1, rows=2, cols=2)
    trips = pd.DataFrame(
        {"origin_row": [0, 0, 1], "origin_col": [0, 0, 0], "mode": [1, 0, 2], "duration_min": [10.0, 20.0, 30.0]}
    )
    records = pd.DataFrame({"preferred": [0, 0, 1], "actual": [1, 0, 2], "er_kg": [0.5, 0.0, 0.0]})
    zones = pd.DataFrame({"zone_id": range(4), "road_density": 1.0, "bus_density": 2.0, "subway_density": 3.0})
    out = zone_outcomes(trips, records, zones, bounds.cols)
    assert out["car_reduction"].iloc[0] == pytest.approx(0.5)
    assert out["car_reduction"].iloc[1:].isna().all()
    assert out["co2_kg"].tolist() == [0.5, 0.0, 0.0, 0.0]
    assert set(REGRESSORS) <= set(out.columns)
