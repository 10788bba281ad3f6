"""Figures and the consolidated ``run_report.json`` for a finished pipeline run."""

from __future__ import annotations

import json

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

# PNG metadata otherwise embeds the matplotlib version and breaks byte-identical reruns
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def plot_event_study(table: pd.DataFrame, path, planted=None) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.axhline(0, color="0.6", lw=0.8)
    ax.axvline(-0.5, color="0.6", lw=0.8, ls=":")
    ax.errorbar(table["k"], table["beta"], yerr=[table["beta"] - table["ci_low"], table["ci_high"] - table["beta"]],
                fmt="o", color="C0", capsize=3, label="estimate")
    if planted is not None:
        ax.plot(planted[0], planted[1], "x--", color="C3", label="planted")
        ax.legend(frameon=False)
    ax.set_xlabel("months since enrolment")
    ax.set_ylabel("effect on low-carbon share")
    fig.tight_layout()
    _save(fig, path)


def plot_daily_ledger(daily: dict, path) -> None:
    days = pd.to_datetime(daily["day"])
    fig, (a1, a2) = plt.subplots(2, 1, figsize=(7, 4.4), sharex=True)
    a1.plot(days, np.asarray(daily["cer_kg"], float), lw=0.9, color="C2")
    a1.set_ylabel("avoided CO2 (kg/day)")
    a2.plot(days, np.asarray(daily["rct"], float), lw=0.9, color="C1")
    a2.set_ylabel("car-trip reduction")
    fig.autofmt_xdate()
    fig.tight_layout()
    _save(fig, path)


def plot_gcn_trace(trace: list, best: int, path) -> None:
    it = [t["iteration"] for t in trace]
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    ax.plot(it, [t["train_loss"] for t in trace], label="train loss")
    ax.plot(it, [t["test_mse"] for t in trace], label="test MSE")
    ax.axvline(best, color="0.5", ls=":", lw=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)


def plot_zone_clusters(clusters: pd.DataFrame, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    for lab, g in clusters.groupby("cluster"):
        cat = g["category"].iloc[0]
        ax.scatter(g["projection_x"], g["projection_y"], s=10, label=f"{lab}: {cat}" if isinstance(cat, str) and cat else str(lab))
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.legend(frameon=False, fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def plot_balance(smd: list, path) -> None:
    tab = pd.DataFrame(smd)
    y = np.arange(len(tab))
    fig, ax = plt.subplots(figsize=(5, 0.3 * len(tab) + 1.2))
    ax.scatter(tab["smd_before"].abs(), y, marker="o", label="before")
    ax.scatter(tab["smd_after"].abs(), y, marker="s", label="after")
    ax.axvline(0.1, color="0.5", ls=":")
    ax.set_yticks(y, [str(v) for v in tab[tab.columns[0]]], fontsize=7)
    ax.set_xlabel("|standardised mean difference|")
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)


def _read(path):
    return json.loads(path.read_text())


def _term(est: dict, name: str, *keys) -> dict:
    row = next(t for t in est["terms"] if t["term"] == name)
    return {k: row[k] for k in ("coef", "se", *keys)}


def render(ctx) -> dict:
    """Draw every figure and write ``run_report.json`` from upstream artifacts in ``ctx.out``."""
    from .pipeline import write_json

    out = ctx.out
    truth = _read(out / "ground_truth.json")
    balance = _read(out / "balance.json")
    did_res = _read(out / "did_results.json")
    metrics = _read(out / "metrics.json")
    gcn = _read(out / "gcn_metrics.json")
    infra = _read(out / "infra_regression.json")
    table = pd.read_csv(out / "event_study.csv")
    clusters = pd.read_csv(out / "zones_clusters.csv", keep_default_na=False)

    planted = None
    if truth.get("synthetic") and truth.get("beta"):
        ks = sorted(int(k) for k in truth["beta"])
        planted = (ks, [truth["beta"][str(k)] for k in ks])
    plot_event_study(table, out / "figures/event_study.png", planted)
    plot_daily_ledger(metrics["daily"], out / "figures/daily_ledger.png")
    plot_gcn_trace(gcn["trace"], gcn["best_iteration"], out / "figures/gcn_trace.png")
    plot_zone_clusters(clusters, out / "figures/zone_clusters.png")
    plot_balance(balance["smd"], out / "figures/balance.png")

    headline = {
        "att": {"delta": _term(did_res["att"], "dp"), "naive_delta": _term(did_res["naive_att"], "dp")},
        "placebo": {k: (_term(v, "dp", "t") if "terms" in v else v) for k, v in did_res["placebo"].items()},
        "event_study": {int(r["k"]): r["beta"] for r in did_res["event_study"]},
        "max_abs_smd_after": balance["max_abs_smd_after"],
        "classifier_accuracy": metrics["classifier"]["Ac"],
        "ledger": {k: metrics["ledger"][k] for k in ("car_reduction", "total_cer_kg", "n_shifted")},
        "citywide": metrics["citywide"],
        "zone_clusters": {"k": gcn["clustering"]["k"], "table": gcn["clustering"]["clusters"]},
        "infrastructure": dict(zip(infra.get("terms", []), infra.get("coef", []))),
    }
    if truth.get("synthetic"):
        headline["planted_att"] = truth["planted"]["planted_att"]
    report = {
        "schema_version": 1,
        "stage": "report",
        "headline": headline,
        "artifacts": dict(sorted(ctx.inputs.items())),
    }
    write_json(out / "run_report.json", report)
    return {"att": headline["att"]["delta"]["coef"]}
