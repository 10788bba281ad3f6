"""End-to-end acceptance checks on synthetic data.

Each test records a one-line verdict in ``conftest.ACCEPTANCE``; the lines are
printed in the terminal summary. Scenario runs are cached per module, so the
first test touching a fixture pays for it (the ATT sweep takes several minutes).
"""

import time
import warnings

import numpy as np
import pandas as pd
import pytest
from conftest import ACCEPTANCE
from oracles import brute_ledger, dense_oracle, dummy_ols, metrics_from_labels, random_params, random_trips, tiny_graph
from scipy.cluster import hierarchy

from carbon_incentive import did, pipeline, psm
from carbon_incentive import synthcity as sc
from carbon_incentive import trip_model as tm
from carbon_incentive.counterfactual import (
    EmissionFactorTable,
    ForestParams,
    binary_metrics,
    build_ledger,
    citywide_extrapolation,
    classifier_metrics,
    confusion_matrix,
    split_by_enrollment,
    train_forest,
)
from carbon_incentive.spatial import (
    REGRESSORS,
    GCNParams,
    ZoneGraph,
    build_daily_graphs,
    categorize,
    cluster_zones,
    forward,
    gcn_train,
    gradient_check,
    normalized_adjacency,
    purity,
    regress_infrastructure,
    zone_outcomes,
)
from carbon_incentive.spatial.analysis import _standardize

pytestmark = pytest.mark.slow

N_SEEDS = 20
PLANTED = 0.10


def record(name, ok, detail):
    ACCEPTANCE[name] = (bool(ok), detail)
    assert ok, f"{name}: {detail}"


def causal_run(seed, n=50_000, **scenario):
    """Generate, match and estimate; keep only the numbers."""
    t0 = time.perf_counter()
    cfg = sc.ScenarioConfig(n_individuals=n, seed=seed, **scenario)
    s = sc.generate(cfg)
    panel = tm.build_panel(s.trips, s.users, cfg.bounds)
    cohort, _ = psm.match_cohorts(panel, s.users)
    sub = did.select_sample(panel, cohort.treated_ids, cohort.control_ids)
    out = {"att": did.estimate_att(sub)["dp"], "seconds": time.perf_counter() - t0}
    out["naive"] = did.estimate_att(panel)["dp"]
    out["placebo_t"] = [did.placebo(sub, shift).t_of("dp") for shift in (1, 2)]
    out["max_smd"] = float(cohort.balance["smd_after"].abs().max())
    out["selection"] = s.truth.selection_strength
    out["event"] = did.event_table(did.estimate_event_study(sub)).set_index("k")
    out["beta"] = dict(s.truth.beta)
    return out


@pytest.fixture(scope="module")
def att_runs():
    return [causal_run(seed, planted_att=PLANTED) for seed in range(N_SEEDS)]


# ---------------------------------------------------------------------------
# causal estimation

def test_att_recovery(att_runs):
    att = np.array([r["att"] for r in att_runs])
    hits = int(np.sum((att >= 0.09) & (att <= 0.11)))
    slowest = max(r["seconds"] for r in att_runs)
    record(
        "ATT recovery",
        hits >= 18 and slowest < 300,
        f"{hits}/{N_SEEDS} seeds in [0.09, 0.11] (range {att.min():.4f}..{att.max():.4f}); slowest run {slowest:.0f}s",
    )


def test_self_selection_removed(att_runs):
    r = att_runs[0]
    ok = abs(r["naive"] - PLANTED) > 0.02 and abs(r["att"] - PLANTED) <= 0.01 and r["selection"] >= 0.3 and r["max_smd"] < 0.1
    record(
        "self-selection removal",
        ok,
        f"naive {r['naive']:.4f}, matched {r['att']:.4f}, selection {r['selection']:.3f}, max SMD {r['max_smd']:.3f}",
    )


def test_event_study_shape():
    profile = tuple(np.linspace(1.0, 0.128 / 0.204, 9))
    r = causal_run(0, planted_att=0.204, dynamic_profile=profile)
    tab, beta = r["event"], r["beta"]
    err = [abs(tab.loc[k, "beta"] - beta[k]) for k in (0, 8)]
    pre = tab[tab.index < tm.EVENT_REF]
    pre_t = (pre["beta"] / pre["se"]).abs()
    record(
        "event-study shape",
        max(err) <= 0.02 and (pre_t < 2).all(),
        f"beta0 {tab.loc[0, 'beta']:.4f} vs {beta[0]:.3f}, beta8 {tab.loc[8, 'beta']:.4f} vs {beta[8]:.3f}, "
        f"max pre-period |t| {pre_t.max():.2f}",
    )


def test_placebo_null(att_runs):
    t = np.abs(np.array([r["placebo_t"] for r in att_runs]))
    clean = (t < 1.96).sum(axis=0)
    # a seed counts only if both shifts are null
    both = int((t < 1.96).all(axis=1).sum())
    record(
        "placebo null",
        both >= 18,
        f"both shifts |t| < 1.96 in {both}/{N_SEEDS} seeds ({clean[0]}/{N_SEEDS} shift 1, {clean[1]}/{N_SEEDS} shift 2); "
        f"max |t| {t.max():.2f}",
    )


def test_estimator_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        n_units, n_periods = int(rng.integers(5, 51)), int(rng.integers(3, 13))
        y, X, unit, time_ = oracle_panel(rng, n_units, n_periods)
        est = did.fit(did.FEDesign(y, X, ["a", "b"], unit, time_))
        coef, _ = dummy_ols(y, X, unit, time_)
        worst = max(worst, float(np.max(np.abs(est.coef - coef))))
    record("estimator oracle", worst < 1e-8, f"max |coef gap| {worst:.1e} over 100 panels up to 50x12")


def oracle_panel(rng, n_units, n_periods):
    unit = np.repeat(np.arange(n_units), n_periods)
    time_ = np.tile(np.arange(n_periods), n_units)
    keep = rng.random(len(unit)) > 0.2 * rng.random()
    unit, time_ = unit[keep], time_[keep]
    X = rng.standard_normal((len(unit), 2)) + rng.standard_normal(n_units)[unit, None]
    y = X @ rng.standard_normal(2) + rng.standard_normal(n_units)[unit] + rng.standard_normal(n_periods)[time_]
    return y + rng.standard_normal(len(y)), X, unit, time_


# ---------------------------------------------------------------------------
# counterfactual modes and carbon

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_classifier_accuracy(seed):
    cfg = sc.ScenarioConfig(seed=seed)
    sample = sc.preference_sample(cfg, 20_000, noise=0.1)
    _, report = train_forest(
        sample, cfg.bounds, ForestParams(n_trees=100, seed=seed), cv_folds=2, cv_trees=10,
        individualized=False, zones=sc.plant_zone_archetypes(cfg),
    )
    record(f"classifier accuracy (seed {seed})", report.accuracy >= 0.85, f"held-out accuracy {report.accuracy:.3f}")


def test_metric_functions_oracle():
    rng = np.random.default_rng(7)
    bad = 0
    for _ in range(1000):
        tp, tn, fp, fn = (int(v) for v in rng.integers(0, 60, 4))
        if tp + tn + fp + fn == 0:
            tn = 1
        y = [1] * tp + [0] * tn + [0] * fp + [1] * fn
        p = [1] * tp + [0] * tn + [1] * fp + [0] * fn
        got, want = binary_metrics(tp, tn, fp, fn), metrics_from_labels(y, p, 1)
        bad += any(
            (want[k] is None) != (got[k] is None) or (want[k] is not None and not np.isclose(got[k], want[k], rtol=1e-12, atol=0))
            for k in want
        )
        labels = rng.integers(0, 4, 30)
        preds = np.where(rng.random(30) < 0.6, labels, rng.integers(0, 4, 30))
        per_class = classifier_metrics(confusion_matrix(labels, preds))["per_class"]
        for c in range(4):
            ref = metrics_from_labels(labels, preds, c)
            bad += any(
                (ref[k] is None) != (per_class[c][k] is None)
                or (ref[k] is not None and not np.isclose(per_class[c][k], ref[k], rtol=1e-12, atol=0))
                for k in ref
            )
    record("metric functions oracle", bad == 0, f"{bad} mismatches over 1000 count tuples and 1000 label vectors")


def test_carbon_accounting():
    rng = np.random.default_rng(11)
    worst_cer, worst_ms, nonzero = 0.0, 0.0, 0
    for _ in range(100):
        n = int(rng.integers(1, 400))
        trips = random_trips(rng, n)
        pref, act = rng.integers(0, 4, n), rng.integers(0, 4, n)
        f = EmissionFactorTable(car=rng.uniform(0.1, 0.3), bus=rng.uniform(0, 0.1), subway=rng.uniform(0, 0.1))
        led = build_ledger(pref, act, trips, f)
        pa, co2 = brute_ledger(pref, act, trips, f.per_mode())
        for ti, day in enumerate(led.days):
            want = np.array([[pa.get((day, i, j), 0) for j in range(4)] for i in range(4)])
            assert (led.pa[ti] == want).all()
            worst_cer = max(worst_cer, abs(led.cer[ti] - co2.get(day, 0.0)))
        sums = np.nansum(led.ms, axis=2)[led.p > 0]
        worst_ms = max(worst_ms, float(np.max(np.abs(sums - 1))) if sums.size else 0.0)
        level = rng.uniform(0, 0.3)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            flat = EmissionFactorTable(car=level, bus=level, subway=level, bike=level)
        nonzero += int(np.any(build_ledger(pref, act, trips, flat).cer != 0))
    record(
        "carbon accounting",
        worst_cer <= 1e-9 and worst_ms <= 1e-12 and nonzero == 0,
        f"max CER gap {worst_cer:.1e}, max |sum MS - 1| {worst_ms:.1e}, equal-factor ledgers with CER != 0: {nonzero}",
    )


def test_citywide_identity():
    got = citywide_extrapolation(0.141, 0.126)
    record("citywide arithmetic", abs(got - 0.018) <= 0.0005, f"0.141 x 0.126 = {100 * got:.3f}%")


# ---------------------------------------------------------------------------
# graph network

def test_gcn_correctness():
    rng = np.random.default_rng(99)
    grad_err = max(gradient_check(random_params(rng), tiny_graph(rng)) for _ in range(20))
    fwd_err = 0.0
    for _ in range(20):
        g = tiny_graph(rng)
        p = random_params(rng, GCNParams())
        out, _, _ = forward(p, *normalized_adjacency(g.adjacency()), g.features)
        fwd_err = max(fwd_err, float(np.max(np.abs(out - dense_oracle(p, g)))))
    graphs = []
    for t in range(12):
        g = tiny_graph(rng, n=9)
        x = rng.standard_normal((9, 12))
        y = np.column_stack([np.tanh(x[:, :4]), x[:, 4:5] ** 2])
        graphs.append(ZoneGraph(pd.Timestamp("2023-01-01") + pd.Timedelta(days=t), g.zone_ids, g.src, g.dst, g.edge_weight, x, y))
    model = gcn_train(graphs, GCNParams(conv_widths=(8, 8), dense_widths=(8, 5), lr=0.01, max_iters=60, patience=60, optimizer="adam", seed=3))
    logged = np.array([te for _, _, te in model.trace])
    best_ok = bool(np.all(logged[model.best_iteration] <= logged))
    record(
        "GCN correctness",
        grad_err < 1e-4 and fwd_err < 1e-10 and best_ok,
        f"max gradient rel. error {grad_err:.1e}, max forward gap {fwd_err:.1e}, best checkpoint minimal: {best_ok}",
    )


# ---------------------------------------------------------------------------
# spatial recovery

CLUSTER_SEEDS = (0, 1)


def spatial_run(seed, n=20_000, cluster=False):
    """Zone outcomes from the true counterfactual modes; optionally the GCN clustering too."""
    cfg = sc.ScenarioConfig(n_individuals=n, seed=seed, planted_att=PLANTED)
    s = sc.generate(cfg)
    _, post = split_by_enrollment(s.trips, s.users, cfg.bounds)
    ledger = build_ledger(s.truth.trip_counterfactual_mode[post.index.to_numpy()], post["mode"].to_numpy(), post)
    zo = zone_outcomes(s.trips, ledger.records, s.zones, cfg.grid_cols)
    ok = zo[["car_reduction", *REGRESSORS]].notna().all(axis=1)
    reg = regress_infrastructure(zo.loc[ok, "car_reduction"], zo.loc[ok, list(REGRESSORS)])
    out = {"coef": {k: reg[k] for k in ("subway_density", "bus_density", "road_density")}}
    if not cluster:
        return out
    days = post["departure"].dt.normalize()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        graphs = build_daily_graphs(s.trips, cfg.bounds, ledger.records, window=(days.min(), days.max()))
    model = gcn_train(graphs, GCNParams(batch_graphs=16, max_iters=300, seed=seed))
    emb = model.zone_embeddings(graphs)
    truth = s.truth.zone_category.reindex(zo["zone_id"]).to_numpy()
    red = zo["car_reduction"].to_numpy()
    res = cluster_zones(emb, zo["zone_id"].to_numpy(), red)
    forced = hierarchy.fcluster(hierarchy.linkage(_standardize(emb), "ward"), 4, "maxclust")
    out.update(
        n_zones=len(zo), k=res.k, purity=purity(res.labels, truth),
        ordered=res.categories is not None and bool(np.all(res.categories == truth)),
        forced_purity=purity(forced, truth), forced_match=float(np.mean(categorize(forced, red) == truth)),
    )
    return out


@pytest.fixture(scope="module")
def spatial_runs():
    return [spatial_run(seed, cluster=seed in CLUSTER_SEEDS) for seed in range(N_SEEDS)]


def test_spatial_clustering(spatial_runs):
    runs = [spatial_runs[s] for s in CLUSTER_SEEDS]
    ok = all(r["n_zones"] >= 200 and r["k"] == 4 and r["purity"] >= 0.95 and r["ordered"] for r in runs)
    detail = "; ".join(
        f"seed {s}: k={r['k']} purity {r['purity']:.2f} (forced k=4: purity {r['forced_purity']:.2f}, "
        f"category match {r['forced_match']:.2f})"
        for s, r in zip(CLUSTER_SEEDS, runs)
    )
    record("spatial recovery: clustering", ok, detail)


def test_infrastructure_regression(spatial_runs):
    wins = sum(r["coef"]["subway_density"] > 0 and max(r["coef"], key=lambda k: abs(r["coef"][k])) == "subway_density" for r in spatial_runs)
    mean = {k.split("_")[0]: np.mean([r["coef"][k] for r in spatial_runs]) for k in spatial_runs[0]["coef"]}
    record(
        "spatial recovery: infrastructure regression",
        wins >= 18,
        f"subway coefficient positive and largest in {wins}/{N_SEEDS} seeds; mean coefs "
        + ", ".join(f"{k} {v:.3f}" for k, v in mean.items()),
    )


# ---------------------------------------------------------------------------
# determinism

def test_determinism(tmp_path):
    base = {
        "seed": 21,
        "scenario": {"n_individuals": 1500, "planted_att": PLANTED},
        "forest": {"n_trees": 15, "cv_folds": 2, "cv_trees": 5, "min_profile_trips": 10},
        "gcn": {"conv_widths": [8, 16], "dense_widths": [16, 5], "max_iters": 8, "batch_graphs": 8},
    }
    hashes = []
    for name in ("a", "b"):
        cfg = pipeline.PipelineConfig.from_dict({**base, "out": str(tmp_path / name)})
        assert pipeline.run("all", cfg).ok
        out = tmp_path / name
        hashes.append({p.relative_to(out).as_posix(): pipeline.file_hash(p) for p in sorted(out.rglob("*")) if p.is_file() and p.name != pipeline.MANIFEST})
    same = hashes[0] == hashes[1]
    record("determinism", same, f"{len(hashes[0])} artifacts, {'all' if same else 'not all'} byte-identical across two runs")
