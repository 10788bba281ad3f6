"""Artifacts-on-disk pipeline: each stage reads declared inputs and writes declared outputs.

Every output is hashed into ``manifest.json`` together with the hash of the
configuration that produced it, so downstream stages can refuse stale or
missing inputs.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import shutil
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import pandas as pd

from . import did, psm
from . import synthcity as sc
from . import trip_model as tm
from ._rng import stream_key
from .counterfactual import (
    EmissionFactorTable,
    ForestParams,
    build_ledger,
    citywide_summary,
    infer_preferred_modes,
    segment_carbon_summary,
    split_by_enrollment,
    train_forest,
    user_activity,
)
from .spatial import (
    REGRESSORS,
    GCNParams,
    build_daily_graphs,
    cluster_zones,
    gcn_train,
    regress_infrastructure,
    zone_outcomes,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"
ZONE_COLUMNS = ("zone_id", "row", "col", "subway_density", "bus_density", "road_density", "archetype")


class PipelineError(Exception):
    exit_code = 1


class ConfigError(PipelineError):
    exit_code = 2


class DependencyError(PipelineError):
    exit_code = 3


class StaleArtifactError(DependencyError):
    pass


class NumericError(PipelineError):
    exit_code = 4


# ---------------------------------------------------------------------------
# configuration

def _default_psm():
    return {"ratio": 2, "caliper_mult": 0.25, "scale": "probability"}


def _default_did():
    return {
        "outcome": "pst",
        "placebo_shifts": [1, 2],
        "placebo_pre_only": True,
        "control_group": "never",
        "secondary_outcomes": ["avg_duration", "avg_distance", "n_trips"],
        "segments": ["gender", "age_band", "income_level"],
    }


def _default_forest():
    return {
        "n_trees": 200, "max_depth": 16, "min_leaf": 5, "features_per_split": None, "max_bins": 64,
        "cv_folds": 5, "cv_trees": 50, "test_fraction": 0.2,
        "individualized": True, "min_profile_trips": 20, "zone_features": True,
    }


def _default_gcn():
    return {
        "conv_widths": [64, 128], "dense_widths": [128, 5],
        "lr": 0.001, "max_iters": 500, "patience": 10, "dropout": 0.35, "optimizer": "gd",
        "batch_graphs": 16, "split": "day", "test_fraction": 0.2, "dtype": "float32",
    }


def _default_spatial():
    return {"k_min": 2, "k_max": 8, "standardize": True}


@dataclass
class PipelineConfig:
    """Run configuration. ``scenario`` overrides synthetic-city defaults; ``input`` switches to real files.

    ``input`` (optional) holds ``trips``, ``users`` and ``zones`` paths plus
    the study window: ``start``, ``n_months``, ``grid_rows``, ``grid_cols``.
    """

    out: str = "out"
    seed: int = 0
    threads: int = 1
    scenario: dict = field(default_factory=lambda: {"n_individuals": 5000, "planted_att": 0.10})
    input: Optional[dict] = None
    stages: dict = field(default_factory=dict)
    psm: dict = field(default_factory=_default_psm)
    did: dict = field(default_factory=_default_did)
    forest: dict = field(default_factory=_default_forest)
    emission_factors: dict = field(default_factory=lambda: EmissionFactorTable().to_dict())
    gcn: dict = field(default_factory=_default_gcn)
    spatial: dict = field(default_factory=_default_spatial)
    participant_trip_share: float = 0.126
    days_per_year: float = 365.0

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        merged = {}
        for f in fields(cls):
            default = getattr(base, f.name)
            if f.name not in data:
                merged[f.name] = default
            elif isinstance(default, dict) and f.name not in ("scenario", "stages", "emission_factors"):
                extra = set(data[f.name]) - set(default)
                if extra:
                    raise ConfigError(f"unknown {f.name} keys: {sorted(extra)}")
                merged[f.name] = {**default, **data[f.name]}
            else:
                merged[f.name] = data[f.name]
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return copy.deepcopy(asdict(self))

    def validate(self) -> None:
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if not 0 < self.participant_trip_share <= 1:
            raise ConfigError("participant_trip_share must lie in (0, 1]")
        if self.days_per_year <= 0:
            raise ConfigError("days_per_year must be positive")
        if self.psm["ratio"] < 1 or self.psm["caliper_mult"] <= 0:
            raise ConfigError("psm ratio must be >= 1 and caliper_mult > 0")
        if self.psm["scale"] not in ("probability", "logit"):
            raise ConfigError("psm scale must be 'probability' or 'logit'")
        if self.did["control_group"] not in ("never", "notyet"):
            raise ConfigError("did control_group must be 'never' or 'notyet'")
        if any(int(s) < 0 for s in self.did["placebo_shifts"]):
            raise ConfigError("placebo shifts must be >= 0")
        if not 0 < self.forest["test_fraction"] < 1 or not 0 < self.gcn["test_fraction"] < 1:
            raise ConfigError("test fractions must lie in (0, 1)")
        if self.gcn["split"] not in ("day", "zone") or self.gcn["optimizer"] not in ("gd", "adam"):
            raise ConfigError("gcn split must be day|zone and optimizer gd|adam")
        if not 2 <= self.spatial["k_min"] <= self.spatial["k_max"]:
            raise ConfigError("spatial k range must satisfy 2 <= k_min <= k_max")
        unknown = set(self.stages) - set(STAGE_ORDER)
        if unknown:
            raise ConfigError(f"unknown stage toggles: {sorted(unknown)}")
        try:
            self.factors()
            if self.input is None:
                self.scenario_config()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.input is not None:
            missing = {"trips", "users", "zones", "start", "n_months", "grid_rows", "grid_cols"} - set(self.input)
            if missing:
                raise ConfigError(f"input section lacks {sorted(missing)}")
            for key in ("trips", "users", "zones"):
                if not Path(self.input[key]).is_file():
                    raise ConfigError(f"input file not found: {self.input[key]}")

    # derived objects ---------------------------------------------------------

    def scenario_config(self) -> sc.ScenarioConfig:
        return sc.ScenarioConfig.from_dict({**self.scenario, "seed": self.seed})

    def bounds(self) -> tm.StudyBounds:
        if self.input is None:
            return self.scenario_config().bounds
        from datetime import date

        i = self.input
        return tm.StudyBounds(
            start=date.fromisoformat(i["start"]), n_months=int(i["n_months"]), rows=int(i["grid_rows"]), cols=int(i["grid_cols"])
        )

    def factors(self) -> EmissionFactorTable:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return EmissionFactorTable.from_dict(self.emission_factors)

    def forest_params(self) -> ForestParams:
        keys = {f.name for f in fields(ForestParams)} - {"seed"}
        return ForestParams(**{k: v for k, v in self.forest.items() if k in keys}, seed=stream_key(self.seed, "stage:forest"))

    def gcn_params(self) -> GCNParams:
        keys = {f.name for f in fields(GCNParams)} - {"seed"}
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in self.gcn.items() if k in keys}
        return GCNParams(**kw, seed=stream_key(self.seed, "stage:gcn"))


# ---------------------------------------------------------------------------
# artifact IO

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if obj is pd.NA:
        return None
    return obj


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")


def write_csv(path: Path, frame: pd.DataFrame) -> None:
    frame.to_csv(path, index=False, lineterminator="\n", float_format="%.17g")


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(section: dict) -> str:
    blob = json.dumps(_jsonable(section), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# stages

@dataclass(frozen=True)
class Stage:
    name: str
    inputs: tuple
    outputs: tuple
    sections: tuple  # config fields that shape this stage's outputs
    run: Callable


@dataclass
class StageContext:
    config: PipelineConfig
    out: Path
    inputs: dict = field(default_factory=dict)  # input artifact name -> verified sha256

    def path(self, name: str) -> Path:
        return self.out / name

    def echo(self, stage: str) -> dict:
        return {"schema_version": SCHEMA_VERSION, "stage": stage, "config": _stage_config(self.config, stage)}

    def trips(self) -> pd.DataFrame:
        trips, _ = tm.ingest_trips(self.path("trips.csv"), self.config.bounds())
        return trips

    def users(self) -> pd.DataFrame:
        return tm.ingest_users(self.path("users.csv"), self.config.bounds())

    def zones(self) -> pd.DataFrame:
        return pd.read_csv(self.path("zones.csv"))

    def panel(self) -> pd.DataFrame:
        panel = pd.read_csv(self.path("panel.csv"))
        panel["enrollment_month"] = panel["enrollment_month"].astype("Int64")
        return panel


def _synth(ctx: StageContext) -> dict:
    cfg = ctx.config
    if cfg.input is not None:
        for key in ("trips", "users", "zones"):
            shutil.copyfile(cfg.input[key], ctx.path(f"{key}.csv"))
        write_json(ctx.path("ground_truth.json"), {**ctx.echo("synth"), "synthetic": False})
        return {"source": "input"}
    scenario = sc.generate(cfg.scenario_config())
    tm.write_trips_csv(scenario.trips, ctx.path("trips.csv"))
    tm.write_users_csv(scenario.users, ctx.path("users.csv"))
    write_csv(ctx.path("zones.csv"), scenario.zones[list(ZONE_COLUMNS)])
    truth = scenario.truth.to_json()
    truth["zone_effect_multiplier"] = dict(zip(scenario.zones["zone_id"].astype(str), scenario.zones["effect_multiplier"]))
    truth["post_enrollment_gap"] = scenario.truth.post_enrollment_gap()
    write_json(ctx.path("ground_truth.json"), {**ctx.echo("synth"), "synthetic": True, **truth})
    return {"n_trips": len(scenario.trips), "n_users": len(scenario.users), "selection_strength": scenario.truth.selection_strength}


def _panel(ctx: StageContext) -> dict:
    bounds = ctx.config.bounds()
    trips, rejected = tm.ingest_trips(ctx.path("trips.csv"), bounds)
    users = tm.ingest_users(ctx.path("users.csv"), bounds)
    panel = tm.build_panel(trips, users, bounds)
    write_csv(ctx.path("panel.csv"), panel)
    write_json(
        ctx.path("ingest_report.json"),
        {**ctx.echo("panel"), "n_valid_trips": len(trips), "rejected": dict(sorted(rejected.items())), "n_cells": len(panel)},
    )
    return {"n_cells": len(panel), "n_rejected": int(sum(rejected.values()))}


def _match(ctx: StageContext) -> dict:
    p = ctx.config.psm
    panel, users = ctx.panel(), ctx.users()
    try:
        cohort, _ = psm.match_cohorts(panel, users, ratio=int(p["ratio"]), caliper_mult=float(p["caliper_mult"]), scale=p["scale"])
    except psm.EmptyCohortError as exc:
        raise NumericError(str(exc)) from exc
    write_csv(ctx.path("cohort.csv"), cohort.pairs()[["treated_id", "control_id", "cohort_month"]].astype({"control_id": np.int64}))
    smd_after = cohort.balance["smd_after"].abs()
    write_json(
        ctx.path("balance.json"),
        {
            **ctx.echo("match"),
            "n_treated_matched": int(len(cohort.triples)),
            "n_controls": int(len(cohort.control_ids)),
            "n_dropped": int(cohort.n_dropped),
            "caliper_max": cohort.caliper,
            "max_abs_smd_before": float(cohort.balance["smd_before"].abs().max()),
            "max_abs_smd_after": float(smd_after.max()),
            "smd": cohort.balance.to_dict("records"),
            "chi_square": cohort.chi_square.to_dict("records"),
            "propensity_models": {
                str(m): {"names": list(mod.names), "coef": mod.coef, "converged": bool(mod.converged), "iterations": int(mod.iterations)}
                for m, mod in sorted(cohort.models.items())
            },
        },
    )
    return {"n_treated": int(len(cohort.triples)), "max_abs_smd_after": float(smd_after.max())}


def _did(ctx: StageContext) -> dict:
    d = ctx.config.did
    panel, users = ctx.panel(), ctx.users()
    pairs = pd.read_csv(ctx.path("cohort.csv"))
    sub = did.select_sample(panel, pairs["treated_id"].unique(), pairs["control_id"].unique(), d["control_group"])
    out = d["outcome"]
    try:
        att = did.estimate_att(sub, out)
        naive = did.estimate_att(panel, out)
        es = did.estimate_event_study(sub, outcome=out)
        placebos, placebo_errors = {}, {}
        for shift in d["placebo_shifts"]:
            try:
                placebos[str(shift)] = did.placebo(sub, int(shift), pre_only=d["placebo_pre_only"], outcome=out)
            except ValueError as exc:  # shifted enrolment leaves the window
                placebo_errors[str(shift)] = str(exc)
        secondary = {o: did.estimate_att(sub, o) for o in d["secondary_outcomes"] if o != out}
        hetero = {}
        for cov in d["segments"]:
            est = did.estimate_heterogeneous(sub, did.segment_columns(users, [cov]), out)
            levels = {"gender": tm.GENDERS, "age_band": tm.AGE_BANDS, "income_level": tm.INCOME_LEVELS}[cov]
            effects = {}
            for i, level in enumerate(levels):
                vals = {f"{cov}:{level}": 1.0} if i else {}
                effects[str(level)] = dict(zip(("effect", "se"), did.segment_effect(est, vals)))
            hetero[cov] = {"estimate": est.to_json(), "segment_effects": effects}
    except (did.CollinearityError, did.ConvergenceError) as exc:
        raise NumericError(str(exc)) from exc
    table = did.event_table(es)
    write_csv(ctx.path("event_study.csv"), table)
    write_json(
        ctx.path("did_results.json"),
        {
            **ctx.echo("did"),
            "window": {"months": int(ctx.config.bounds().n_months), "event_min": tm.EVENT_MIN, "event_max": tm.EVENT_MAX, "reference": tm.EVENT_REF},
            "att": att.to_json(),
            "naive_att": naive.to_json(),
            "event_study": table.to_dict("records"),
            "placebo": {**{k: v.to_json() for k, v in placebos.items()}, **{k: {"error": e} for k, e in placebo_errors.items()}},
            "secondary_outcomes": {k: v.to_json() for k, v in secondary.items()},
            "heterogeneous": hetero,
        },
    )
    return {"att": att["dp"], "att_se": att.se_of("dp"), "placebo_t": {k: v.t_of("dp") for k, v in placebos.items()}}


def _counterfactual(ctx: StageContext) -> dict:
    cfg = ctx.config
    f = cfg.forest
    bounds = cfg.bounds()
    trips, users, zones = ctx.trips(), ctx.users(), ctx.zones()
    pre, post = split_by_enrollment(trips, users, bounds)
    if len(post) == 0:
        raise NumericError("no post-enrolment participant trips to account for")
    try:
        model, report = train_forest(
            pre, bounds, cfg.forest_params(), test_fraction=f["test_fraction"], cv_folds=int(f["cv_folds"]),
            cv_trees=f["cv_trees"], individualized=f["individualized"], min_profile_trips=int(f["min_profile_trips"]),
            zones=zones if f["zone_features"] else None, threads=cfg.threads,
        )
    except ValueError as exc:
        raise NumericError(str(exc)) from exc
    preferred = infer_preferred_modes(model, post)
    ledger = build_ledger(preferred, post["mode"].to_numpy(), post, cfg.factors())
    write_csv(ctx.path("ledger.csv"), ledger.to_frame())

    rec = ledger.records
    tokens = np.asarray(tm.MODE_TOKENS)
    write_csv(
        ctx.path("shift_records.csv"),
        pd.DataFrame(
            {
                "trip_id": rec.index.to_numpy(),
                "user_id": rec["user_id"].to_numpy(),
                "day": rec["day"].dt.strftime("%Y-%m-%d"),
                "preferred": tokens[rec["preferred"].to_numpy()],
                "actual": tokens[rec["actual"].to_numpy()],
                "distance_km": rec["distance_km"].to_numpy(),
                "er_kg": rec["er_kg"].to_numpy(),
            }
        ),
    )
    segments = segment_carbon_summary(ledger, users, user_activity(ctx.panel()))
    write_csv(ctx.path("segment_summary.csv"), segments)

    cm = report.confusion
    # on pre-period test trips nobody is incentivised, so any "reduction" there is classifier bias
    baseline_rct = float(1 - cm[0, 0] / cm[:, 0].sum()) if cm[:, 0].sum() else None
    try:
        city = citywide_summary(ledger, cfg.participant_trip_share, cfg.days_per_year)
    except ValueError as exc:
        city = {"error": str(exc)}
    daily = ledger.daily()
    write_json(
        ctx.path("metrics.json"),
        {
            **ctx.echo("counterfactual"),
            "classifier": report.to_json(),
            "n_pre_trips": len(pre),
            "n_post_trips": len(post),
            "ledger": ledger.summary(),
            "baseline_car_reduction": baseline_rct,
            "daily": daily.to_dict("list"),
            "citywide": city,
        },
    )
    write_json(ctx.path("model_card.json"), {**ctx.echo("counterfactual"), **model.card(), "test_accuracy": report.accuracy})
    return {"accuracy": report.accuracy, "car_reduction": ledger.overall_rct(), "total_cer_kg": float(ledger.cer.sum())}


def _spatial(ctx: StageContext) -> dict:
    cfg = ctx.config
    s = cfg.spatial
    bounds = cfg.bounds()
    trips, zones = ctx.trips(), ctx.zones().sort_values("zone_id").reset_index(drop=True)
    rec = pd.read_csv(ctx.path("shift_records.csv"))
    token = {t: i for i, t in enumerate(tm.MODE_TOKENS)}
    records = pd.DataFrame(
        {
            "preferred": rec["preferred"].map(token).to_numpy(),
            "actual": rec["actual"].map(token).to_numpy(),
            "er_kg": rec["er_kg"].to_numpy(dtype=float),
        },
        index=pd.Index(rec["trip_id"].to_numpy()),
    )
    days = pd.to_datetime(rec["day"])
    window = (days.min(), days.max())
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        graphs = build_daily_graphs(trips, bounds, records, window=window)
    n_empty = sum(1 for w in caught if "no trips" in str(w.message))
    try:
        model = gcn_train(graphs, cfg.gcn_params())
    except (ValueError, ArithmeticError) as exc:
        raise NumericError(str(exc)) from exc
    emb = model.zone_embeddings(graphs)

    outcomes = zone_outcomes(trips, records, zones, bounds.cols)
    clusters = cluster_zones(
        emb, outcomes["zone_id"].to_numpy(), outcomes["car_reduction"].to_numpy(),
        k_range=(int(s["k_min"]), int(s["k_max"])), standardize=bool(s["standardize"]),
    )
    write_csv(ctx.path("zones_clusters.csv"), clusters.to_frame())
    write_csv(ctx.path("zone_outcomes.csv"), outcomes)

    ok = outcomes[["car_reduction", *REGRESSORS]].notna().all(axis=1)
    try:
        reg = regress_infrastructure(outcomes.loc[ok, "car_reduction"], outcomes.loc[ok, list(REGRESSORS)])
        reg_json = reg.to_json()
    except ValueError as exc:  # includes rank deficiency
        reg_json = {"error": str(exc)}
    write_json(ctx.path("infra_regression.json"), {**ctx.echo("spatial"), "outcome": "car_reduction", "n_zones_dropped": int((~ok).sum()), **reg_json})

    frame = pd.DataFrame({"cluster": clusters.labels, "car_reduction": outcomes["car_reduction"], "co2_kg": outcomes["co2_kg"]})
    if clusters.categories is not None:
        frame["category"] = clusters.categories
    keys = ["cluster", "category"] if clusters.categories is not None else ["cluster"]
    cat_table = (
        frame.groupby(keys)
        .agg(n_zones=("car_reduction", "size"), mean_car_reduction=("car_reduction", "mean"), co2_kg=("co2_kg", "sum"))
        .reset_index()
        .to_dict("records")
    )
    write_json(
        ctx.path("gcn_metrics.json"),
        {
            **ctx.echo("spatial"),
            "n_graphs": len(graphs),
            "n_empty_days": n_empty,
            **model.summary(),
            "clustering": {
                "k": clusters.k,
                "degenerate": clusters.degenerate,
                "notes": clusters.notes,
                "scores": clusters.scores.to_dict("records"),
                "clusters": cat_table,
            },
        },
    )
    return {"k": clusters.k, "test_mse": model.metrics["MSE"]}


def _report(ctx: StageContext) -> dict:
    from . import report

    return report.render(ctx)


STAGE_ORDER = ("synth", "panel", "match", "did", "counterfactual", "spatial", "report")
STAGES = {
    s.name: s
    for s in (
        Stage("synth", (), ("trips.csv", "users.csv", "zones.csv", "ground_truth.json"), ("seed", "scenario", "input"), _synth),
        Stage("panel", ("trips.csv", "users.csv"), ("panel.csv", "ingest_report.json"), ("input",), _panel),
        Stage("match", ("panel.csv", "users.csv"), ("cohort.csv", "balance.json"), ("psm",), _match),
        Stage("did", ("panel.csv", "users.csv", "cohort.csv"), ("did_results.json", "event_study.csv"), ("did",), _did),
        Stage(
            "counterfactual",
            ("trips.csv", "users.csv", "zones.csv", "panel.csv"),
            ("ledger.csv", "shift_records.csv", "segment_summary.csv", "metrics.json", "model_card.json"),
            ("seed", "input", "forest", "emission_factors", "participant_trip_share", "days_per_year", "threads"),
            _counterfactual,
        ),
        Stage(
            "spatial",
            ("trips.csv", "zones.csv", "shift_records.csv"),
            ("zones_clusters.csv", "zone_outcomes.csv", "gcn_metrics.json", "infra_regression.json"),
            ("seed", "input", "gcn", "spatial"),
            _spatial,
        ),
        Stage(
            "report",
            ("balance.json", "did_results.json", "event_study.csv", "ledger.csv", "metrics.json", "zones_clusters.csv",
             "zone_outcomes.csv", "gcn_metrics.json", "infra_regression.json", "ground_truth.json"),
            ("run_report.json", "figures/event_study.png", "figures/daily_ledger.png", "figures/gcn_trace.png",
             "figures/zone_clusters.png", "figures/balance.png"),
            (),
            _report,
        ),
    )
}
PRODUCER = {a: s.name for s in STAGES.values() for a in s.outputs}


def _stage_config(config: PipelineConfig, stage: str) -> dict:
    d = config.to_dict()
    # threads never change results; keep them out of the hash
    return {k: d[k] for k in STAGES[stage].sections if k != "threads"}


# ---------------------------------------------------------------------------
# manifest

def load_manifest(out: Path) -> dict:
    path = out / MANIFEST
    if not path.exists():
        return {"schema_version": SCHEMA_VERSION, "artifacts": {}, "stages": {}}
    return json.loads(path.read_text())


def _save_manifest(out: Path, manifest: dict) -> None:
    write_json(out / MANIFEST, manifest)


def check_inputs(stage: Stage, config: PipelineConfig, out: Path, manifest: dict) -> dict:
    """Hashes of ``stage``'s inputs; raises if any is missing, modified or stale."""
    hashes = {}
    for name in stage.inputs:
        producer = PRODUCER[name]
        entry = manifest["artifacts"].get(name)
        path = out / name
        if entry is None or not path.exists():
            raise DependencyError(f"{stage.name}: missing {name}; run {producer} first")
        actual = file_hash(path)
        if actual != entry["sha256"]:
            raise StaleArtifactError(f"{stage.name}: {name} was modified after {producer} wrote it; rerun {producer}")
        if entry["config_hash"] != config_hash(_stage_config(config, producer)):
            raise StaleArtifactError(f"{stage.name}: {name} was produced with a different configuration; rerun {producer}")
        recorded = manifest["stages"].get(producer, {}).get("inputs", {})
        for up, h in recorded.items():
            if manifest["artifacts"].get(up, {}).get("sha256") != h:
                raise StaleArtifactError(f"{stage.name}: {name} is older than its input {up}; rerun {producer}")
        hashes[name] = actual
    return hashes


@dataclass
class RunReport:
    stages: dict  # name -> {"status", "wall_time_s", "summary"}
    artifacts: dict  # name -> sha256
    config: dict

    @property
    def ok(self) -> bool:
        return all(s["status"] == "ok" for s in self.stages.values())


def run_stage(name: str, config: PipelineConfig) -> dict:
    stage = STAGES[name]
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "figures").mkdir(exist_ok=True)
    manifest = load_manifest(out)
    inputs = check_inputs(stage, config, out, manifest)
    log.info("stage %s: start", name)
    t0 = time.perf_counter()
    summary = stage.run(StageContext(config, out, inputs))
    wall = time.perf_counter() - t0
    chash = config_hash(_stage_config(config, name))
    for art in stage.outputs:
        manifest["artifacts"][art] = {
            "sha256": file_hash(out / art), "stage": name, "config_hash": chash, "schema_version": SCHEMA_VERSION,
        }
    manifest["stages"][name] = {"config_hash": chash, "inputs": inputs, "wall_time_s": round(wall, 3), "summary": _jsonable(summary)}
    _save_manifest(out, manifest)
    log.info("stage %s: ok in %.1fs", name, wall)
    return {"status": "ok", "wall_time_s": wall, "summary": summary}


def run(command: str, config: PipelineConfig) -> RunReport:
    """Run one stage, or every enabled stage in order for ``all``."""
    if command == "all":
        names = [s for s in STAGE_ORDER if config.stages.get(s, True)]
    elif command in STAGES:
        names = [command]
    else:
        raise ConfigError(f"unknown command {command!r}")
    results = {n: run_stage(n, config) for n in names}
    manifest = load_manifest(Path(config.out))
    return RunReport(results, {k: v["sha256"] for k, v in manifest["artifacts"].items()}, config.to_dict())
