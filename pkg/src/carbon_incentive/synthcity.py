"""Seeded synthetic city with planted programme effects.

Every generated trip carries two modes drawn from the same uniforms: the mode
actually taken and the mode that would have been taken without the programme.
The two differ only when the planted shift moves a trip off (or onto) the car,
so the counterfactual world is known exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from datetime import date
from typing import Mapping, Optional

import numpy as np
import pandas as pd
from scipy import special, stats

from . import trip_model as tm
from ._rng import Streams, categorical

ARCHETYPES = ("subway-rich", "bus-rich", "sparse", "peripheral")
ARCHETYPE_CATEGORY = {"subway-rich": "HI", "bus-rich": "MI", "sparse": "LI", "peripheral": "NI"}

# mean/sd of (subway, bus, road) density per archetype, km of line per km^2
_DENSITY = {
    "subway-rich": ((1.2, 0.2), (0.8, 0.2), (1.0, 0.2)),
    "bus-rich": ((0.4, 0.15), (1.3, 0.2), (0.9, 0.2)),
    "sparse": ((0.1, 0.08), (0.5, 0.15), (0.6, 0.2)),
    "peripheral": ((0.0, 0.03), (0.15, 0.1), (0.3, 0.15)),
}
_POP_WEIGHT = {"subway-rich": 1.6, "bus-rich": 1.2, "sparse": 0.8, "peripheral": 0.4}

# km/h and fixed access/egress minutes per mode (car, bus, subway, bike)
_SPEED = np.array([24.0, 14.0, 32.0, 12.0])
_OVERHEAD = np.array([6.0, 10.0, 12.0, 2.0])

_CHUNK = 10_000


class ConfigError(ValueError):
    pass


def _default_segment_asc():
    # covariate -> level -> utility shift per mode (car, bus, subway, bike)
    return {
        "gender": {"F": [-0.2, 0.1, 0.1, 0.0], "M": [0.2, 0.0, 0.0, 0.1]},
        "age_band": {
            "<=18": [-0.8, 0.3, 0.2, 0.6],
            "19-24": [-0.4, 0.1, 0.4, 0.4],
            "25-34": [0.0, 0.0, 0.2, 0.1],
            "35-39": [0.2, 0.0, 0.0, 0.0],
            "40-44": [0.3, 0.0, -0.1, -0.1],
            "45-49": [0.3, 0.1, -0.1, -0.2],
            ">=50": [0.1, 0.4, -0.2, -0.3],
        },
        "income_level": {"1": [-0.5, 0.3, 0.1, 0.1], "2": [0.0, 0.0, 0.0, 0.0], "3": [0.5, -0.3, 0.0, -0.2]},
    }


def _default_segment_trend():
    # monthly drop in car probability; acts on the probability scale so trends stay parallel within a segment
    return {
        "age_band": {"<=18": 0.008, "19-24": 0.015, "25-34": 0.008, "35-39": 0.0, "40-44": -0.003, "45-49": -0.005, ">=50": -0.008},
    }


def _default_enrollment():
    return {
        "gender:F": 0.4,
        "age_band:<=18": 0.3,
        "age_band:19-24": 2.0,
        "age_band:25-34": 1.0,
        "age_band:35-39": 0.2,
        "age_band:45-49": -0.5,
        "age_band:>=50": -1.0,
        "income_level:1": -0.5,
        "income_level:3": 0.6,
        "log_trip_rate": 0.9,
    }


@dataclass(frozen=True)
class ScenarioConfig:
    """All knobs of the synthetic city. Levels are keyed by their string form."""

    seed: int = 0
    n_individuals: int = 5000
    n_months: int = 13
    start: str = "2022-12-01"
    grid_rows: int = 16
    grid_cols: int = 16
    gender_weights: Mapping = field(default_factory=lambda: {"F": 0.5, "M": 0.5})
    age_weights: Mapping = field(
        default_factory=lambda: {"<=18": 0.04, "19-24": 0.14, "25-34": 0.30, "35-39": 0.15, "40-44": 0.13, "45-49": 0.10, ">=50": 0.14}
    )
    income_weights: Mapping = field(default_factory=lambda: {"1": 0.35, "2": 0.45, "3": 0.20})
    mode_asc: tuple = (1.2, -0.2, -0.3, -0.7)
    segment_asc: Mapping = field(default_factory=_default_segment_asc)
    segment_trend: Mapping = field(default_factory=_default_segment_trend)
    distance_coef: tuple = (0.06, -0.03, 0.04, -0.35)
    access_coef: Mapping = field(default_factory=lambda: {"subway": 1.0, "bus": 0.6, "road": 0.5})
    peak_car_penalty: float = 0.3
    logit_scale: float = 1.0
    distance_scale: Mapping = field(default_factory=dict)
    planted_att: float = 0.0
    dynamic_profile: tuple = (1.0,) * 9
    anticipation: float = 0.0
    att_heterogeneity: Mapping = field(default_factory=dict)
    enrollment_intercept: float = -3.1
    enrollment_coefs: Mapping = field(default_factory=_default_enrollment)
    enrollment_months: tuple = (4, 10)
    trip_rate_mean: float = 6.0
    trip_rate_shape: float = 1.3
    commute_share: float = 0.55
    archetype_weights: tuple = (0.25, 0.25, 0.25, 0.25)
    zone_effect_strength: float = 1.0
    zone_layout: str = "rings"  # "rings" or "sectors"
    ring_jitter: float = 1.5  # cells of random displacement when ranking zones by distance from the centre
    density_noise: float = 1.0  # multiplier on within-archetype density spread
    # per archetype: ((mean, sd) for subway, bus, road density); missing archetypes use the built-in table
    archetype_density: Mapping = field(default_factory=dict)
    population_weights: Mapping = field(default_factory=dict)

    def __post_init__(self):
        validate(self)

    @property
    def bounds(self) -> tm.StudyBounds:
        return tm.StudyBounds(
            start=date.fromisoformat(self.start), n_months=self.n_months, rows=self.grid_rows, cols=self.grid_cols
        )

    def replace(self, **changes) -> "ScenarioConfig":
        data = asdict(self)
        data.update(changes)
        return ScenarioConfig(**data)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, data: Mapping) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        data = dict(data)
        for key in ("mode_asc", "dynamic_profile", "enrollment_months", "archetype_weights", "distance_coef"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


def validate(cfg: ScenarioConfig) -> None:
    def weights(name, w, levels=None):
        if levels is not None and set(map(str, w)) != set(map(str, levels)):
            raise ConfigError(f"{name} must cover exactly {levels}")
        vals = np.asarray(list(w.values()) if isinstance(w, Mapping) else w, dtype=float)
        if (vals < 0).any() or abs(vals.sum() - 1.0) > 1e-9:
            raise ConfigError(f"{name} must be non-negative and sum to 1")

    if not -1.0 <= cfg.planted_att <= 1.0:
        raise ConfigError("planted_att must lie in [-1, 1]")
    if not -1.0 <= cfg.anticipation <= 1.0:
        raise ConfigError("anticipation must lie in [-1, 1]")
    if cfg.n_individuals < 1 or cfg.n_months < 2:
        raise ConfigError("need at least one individual and two months")
    if cfg.grid_rows < 2 or cfg.grid_cols < 2:
        raise ConfigError("grid must be at least 2x2")
    weights("gender_weights", cfg.gender_weights, tm.GENDERS)
    weights("age_weights", cfg.age_weights, tm.AGE_BANDS)
    weights("income_weights", cfg.income_weights, tm.INCOME_LEVELS)
    weights("archetype_weights", cfg.archetype_weights)
    if len(cfg.archetype_weights) != 4 or len(cfg.mode_asc) != 4 or len(cfg.distance_coef) != 4:
        raise ConfigError("mode and archetype vectors need four entries")
    if len(cfg.dynamic_profile) != 9:
        raise ConfigError("dynamic_profile needs one multiplier per event time 0..8")
    lo, hi = cfg.enrollment_months
    if not 0 < lo <= hi < cfg.n_months:
        raise ConfigError("enrollment_months must lie inside the window, after month 0")
    if cfg.trip_rate_mean <= 0 or cfg.trip_rate_shape <= 0 or cfg.logit_scale <= 0:
        raise ConfigError("trip rate and logit scale parameters must be positive")
    if cfg.zone_layout not in ("rings", "sectors"):
        raise ConfigError("zone_layout must be 'rings' or 'sectors'")
    if cfg.ring_jitter < 0 or cfg.density_noise < 0:
        raise ConfigError("ring_jitter and density_noise must be >= 0")
    if not 0 <= cfg.commute_share <= 1 or cfg.zone_effect_strength < 0:
        raise ConfigError("commute_share must lie in [0, 1] and zone_effect_strength be >= 0")
    for key in cfg.enrollment_coefs:
        if key != "log_trip_rate" and key.split(":", 1)[0] not in ("gender", "age_band", "income_level"):
            raise ConfigError(f"unknown enrollment covariate {key!r}")
    for name in ("archetype_density", "population_weights"):
        extra = set(getattr(cfg, name)) - set(ARCHETYPES)
        if extra:
            raise ConfigError(f"{name} has unknown archetypes {sorted(extra)}")
    for a, spec in cfg.archetype_density.items():
        arr = np.asarray(spec, dtype=float)
        if arr.shape != (3, 2) or (arr[:, 1] < 0).any():
            raise ConfigError(f"archetype_density[{a!r}] needs three (mean, sd>=0) pairs")
    if any(w <= 0 for w in cfg.population_weights.values()):
        raise ConfigError("population_weights must be positive")


@dataclass
class GroundTruth:
    propensity: pd.Series
    cells: pd.DataFrame  # user_id, month, pst, pst_counterfactual, n_trips, dp
    beta: dict
    zone_category: pd.Series
    trip_counterfactual_mode: np.ndarray
    selection_strength: float
    planted: dict

    def post_enrollment_gap(self) -> float:
        post = self.cells[self.cells["dp"] == 1]
        return float((post["pst"] - post["pst_counterfactual"]).mean())

    def to_json(self) -> dict:
        cells = self.cells
        return {
            "schema_version": 1,
            "planted": self.planted,
            "beta": {str(k): v for k, v in sorted(self.beta.items())},
            "selection_strength": self.selection_strength,
            "zone_category": {str(k): v for k, v in self.zone_category.items()},
            "propensity": {str(k): round(float(v), 12) for k, v in self.propensity.items()},
            "cells": {
                "user_id": cells["user_id"].tolist(),
                "month": cells["month"].tolist(),
                "pst": np.round(cells["pst"].to_numpy(), 12).tolist(),
                "pst_counterfactual": np.round(cells["pst_counterfactual"].to_numpy(), 12).tolist(),
            },
        }


@dataclass
class Scenario:
    config: ScenarioConfig
    trips: pd.DataFrame
    users: pd.DataFrame
    zones: pd.DataFrame
    truth: GroundTruth

    @property
    def bounds(self) -> tm.StudyBounds:
        return self.config.bounds


# ---------------------------------------------------------------------------
# zones

def _allocate(n: int, weights) -> np.ndarray:
    exact = np.asarray(weights, dtype=float) * n
    counts = np.floor(exact).astype(int)
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[: n - counts.sum()]] += 1
    return counts


def plant_zone_archetypes(config: ScenarioConfig) -> pd.DataFrame:
    """Assign an archetype and infrastructure densities to every grid cell.

    With the default ``rings`` layout archetypes form rough rings, subway-rich
    cells nearest the centre and peripheral cells at the edge; ``sectors``
    gives each archetype a contiguous wedge around the centre instead. ``effect_multiplier`` scales the planted
    car-to-low-carbon shift for trips starting in the zone; it increases with
    subway density (and, more weakly, bus density) so the planted ordering is
    subway-rich > bus-rich > sparse > peripheral.
    """
    rows, cols = config.grid_rows, config.grid_cols
    s = Streams(config.seed)
    zone = np.arange(rows * cols)
    r, c = np.divmod(zone, cols)
    centre = np.hypot(r - (rows - 1) / 2, c - (cols - 1) / 2)
    jitter = s.uniform("zone-rank", zone)
    if config.zone_layout == "sectors":
        angle = np.arctan2(r - (rows - 1) / 2, c - (cols - 1) / 2)
        order = np.lexsort((zone, angle + config.ring_jitter * 0.1 * jitter))
    else:
        order = np.lexsort((zone, centre + config.ring_jitter * jitter))
    counts = _allocate(len(zone), config.archetype_weights)
    arch = np.empty(len(zone), dtype=object)
    arch[order] = np.repeat(ARCHETYPES, counts)

    dens = np.zeros((len(zone), 3))
    for a in ARCHETYPES:
        m = arch == a
        for j, (mu, sd) in enumerate(config.archetype_density.get(a, _DENSITY[a])):
            dens[m, j] = mu + config.density_noise * sd * s.normal(f"zone-density-{j}", zone[m])
    dens = dens.clip(min=0.0)
    raw = 0.3 + 1.0 * dens[:, 0] + 0.25 * dens[:, 1]
    return pd.DataFrame(
        {
            "zone_id": zone,
            "row": r,
            "col": c,
            "subway_density": dens[:, 0],
            "bus_density": dens[:, 1],
            "road_density": dens[:, 2],
            "archetype": arch,
            "population_weight": [config.population_weights.get(a, _POP_WEIGHT[a]) for a in arch],
            "raw_effect": raw,
        }
    )


# ---------------------------------------------------------------------------
# individuals

def _segment_codes(s: Streams, cfg: ScenarioConfig, idx: np.ndarray):
    g = categorical(s.uniform("gender", idx), np.array([cfg.gender_weights[k] for k in tm.GENDERS]))
    a = categorical(s.uniform("age", idx), np.array([cfg.age_weights[k] for k in tm.AGE_BANDS]))
    inc = categorical(s.uniform("income", idx), np.array([cfg.income_weights[str(k)] for k in tm.INCOME_LEVELS]))
    return g, a, inc


def _segment_lookup(table: Mapping, g, a, inc, width=None):
    """Sum per-level values of a covariate->level->value table over the three covariates."""
    levels = {"gender": (tm.GENDERS, g), "age_band": (tm.AGE_BANDS, a), "income_level": (tm.INCOME_LEVELS, inc)}
    shape = (len(g),) if width is None else (len(g), width)
    out = np.zeros(shape)
    for cov, per_level in table.items():
        names, codes = levels[cov]
        vec = np.array([np.asarray(per_level.get(str(n), np.zeros(width) if width else 0.0), dtype=float) for n in names])
        out += vec[codes]
    return out


def _individuals(cfg: ScenarioConfig, zones: pd.DataFrame):
    s = Streams(cfg.seed)
    n = cfg.n_individuals
    idx = np.arange(n)
    g, a, inc = _segment_codes(s, cfg, idx)
    shape = cfg.trip_rate_shape
    rate = cfg.trip_rate_mean * special.gammaincinv(shape, s.uniform("trip-rate", idx)) / shape
    rate = rate.clip(0.2, 40 * cfg.trip_rate_mean)

    rows, cols = cfg.grid_rows, cfg.grid_cols
    home = categorical(s.uniform("home", idx), zones["population_weight"].to_numpy())
    hr, hc = np.divmod(home, cols)
    # workplaces sit near home, pulled toward the centre
    wr = hr + 0.35 * ((rows - 1) / 2 - hr) + 2.5 * s.normal("work-dr", idx)
    wc = hc + 0.35 * ((cols - 1) / 2 - hc) + 2.5 * s.normal("work-dc", idx)
    wr = np.rint(wr).clip(0, rows - 1).astype(np.int64)
    wc = np.rint(wc).clip(0, cols - 1).astype(np.int64)
    work = wr * cols + wc

    index = np.full(n, cfg.enrollment_intercept)
    lookup = {"gender": (tm.GENDERS, g), "age_band": (tm.AGE_BANDS, a), "income_level": (tm.INCOME_LEVELS, inc)}
    for key, coef in cfg.enrollment_coefs.items():
        if key == "log_trip_rate":
            index += coef * np.log(rate / cfg.trip_rate_mean)
            continue
        cov, level = key.split(":", 1)
        names, codes = lookup[cov]
        index += coef * (codes == [str(x) for x in names].index(level))
    propensity = special.expit(index)
    enrolled = s.uniform("enrol", idx) < propensity
    lo, hi = cfg.enrollment_months
    month = lo + np.floor(s.uniform("enrol-month", idx) * (hi - lo + 1)).astype(np.int64)
    enrol = np.where(enrolled, month, -1)
    selection = float(np.corrcoef(enrolled, index)[0, 1]) if 0 < enrolled.sum() < n else 0.0

    users = pd.DataFrame(
        {
            "user_id": idx.astype(np.int64),
            "gender": np.asarray(tm.GENDERS)[g],
            "age_band": np.asarray(tm.AGE_BANDS)[a],
            "income_level": np.asarray(tm.INCOME_LEVELS)[inc],
            "enrollment_month": pd.array(np.where(enrolled, month, pd.NA), dtype="Int64"),
        }
    )
    latent = {
        "g": g, "a": a, "inc": inc, "rate": rate, "home": home, "work": work, "enrol": enrol,
        "asc": _segment_lookup(cfg.segment_asc, g, a, inc, width=4),
        "trend": _segment_lookup(cfg.segment_trend, g, a, inc),
        "att": cfg.planted_att + _segment_lookup(cfg.att_heterogeneity, g, a, inc),
        "dscale": np.exp(_segment_lookup({k: {l: np.log(v) for l, v in d.items()} for k, d in cfg.distance_scale.items()}, g, a, inc)),
    }
    return users, latent, propensity, selection


def _zone_multiplier(cfg: ScenarioConfig, zones: pd.DataFrame, latent) -> np.ndarray:
    """Per-zone shift multiplier, normalised to average 1 over treated users' trip origins."""
    raw = zones["raw_effect"].to_numpy()
    treated = latent["enrol"] >= 0
    if not treated.any():
        return np.ones(len(raw))
    w = latent["rate"][treated]
    c = cfg.commute_share * 5 / 7
    origin_mean = ((1 - c / 2) * raw[latent["home"][treated]] + (c / 2) * raw[latent["work"][treated]]) @ w / w.sum()
    return 1.0 + cfg.zone_effect_strength * (raw / origin_mean - 1.0)


# ---------------------------------------------------------------------------
# trips

def _month_calendar(bounds: tm.StudyBounds):
    starts = pd.date_range(bounds.start, periods=bounds.n_months + 1, freq="MS")
    first_day = ((starts[:-1] - starts[0]).days).to_numpy()
    days_in = np.diff((starts - starts[0]).days.to_numpy())
    return starts[0], first_day, days_in


def _mode_probabilities(cfg, zones_arr, latent_u, month, dist, o, d, peak):
    sub, bus, road = zones_arr
    v = np.empty((len(dist), 4))
    v[:] = np.asarray(cfg.mode_asc)
    v += latent_u["asc"]
    v += np.outer(dist, cfg.distance_coef)
    acc = cfg.access_coef
    v[:, 2] += acc["subway"] * 0.5 * (sub[o] + sub[d])
    v[:, 1] += acc["bus"] * 0.5 * (bus[o] + bus[d])
    v[:, 0] += acc["road"] * 0.5 * (road[o] + road[d]) - cfg.peak_car_penalty * peak
    v *= cfg.logit_scale
    v -= v.max(axis=1, keepdims=True)
    p = np.exp(v)
    return p / p.sum(axis=1, keepdims=True)


def _trip_geometry(s: Streams, cfg, latent_u, ui, month, j, calendar):
    """Day, time, origin/destination, distance and workday flag for each trip."""
    origin0, first_day, days_in = calendar
    rows, cols = cfg.grid_rows, cfg.grid_cols
    day = first_day[month] + np.floor(s.uniform("day", ui, month, j) * days_in[month]).astype(np.int64)
    weekday = (origin0.dayofweek + day) % 7
    workday = weekday < 5
    commute = s.uniform("kind", ui, month, j) < np.where(workday, cfg.commute_share, 0.15)
    am = s.uniform("ampm", ui, month, j) < 0.5
    u_hour = s.uniform("hour", ui, month, j)
    hour = np.where(commute, np.where(am, 7 + np.floor(3 * u_hour), 17 + np.floor(3 * u_hour)), 9 + np.floor(13 * u_hour))
    minute = np.floor(60 * s.uniform("minute", ui, month, j))

    home, work = latent_u["home"], latent_u["work"]
    hr, hc = np.divmod(home, cols)
    dr = np.rint(hr + 2.5 * s.normal("dest-dr", ui, month, j)).clip(0, rows - 1)
    dc = np.rint(hc + 2.5 * s.normal("dest-dc", ui, month, j)).clip(0, cols - 1)
    other = (dr * cols + dc).astype(np.int64)
    o = np.where(commute & ~am, work, home)
    d = np.where(commute, np.where(am, work, home), other)
    orow, ocol = np.divmod(o, cols)
    drow, dcol = np.divmod(d, cols)
    cells = np.hypot(orow - drow, ocol - dcol)
    dist = (1.3 * 0.5 * cells + 0.4 + 0.6 * s.uniform("dist", ui, month, j)) * latent_u["dscale"]
    peak = commute.astype(float)
    departure = (day * 1440 + hour * 60 + minute).astype(np.int64)
    return departure, o, d, dist, workday, peak


def _expand_counts(cfg: ScenarioConfig, s: Streams, users_idx: np.ndarray, rate: np.ndarray):
    n_m = cfg.n_months
    ui = np.repeat(users_idx, n_m)
    month = np.tile(np.arange(n_m), len(users_idx))
    mu = np.repeat(rate, n_m)
    counts = stats.poisson.ppf(s.uniform("n-trips", ui, month), mu).astype(np.int64)
    trip_user = np.repeat(ui, counts)
    trip_month = np.repeat(month, counts)
    offsets = np.repeat(np.cumsum(counts) - counts, counts)
    j = np.arange(counts.sum()) - offsets
    return trip_user, trip_month, j


def _generate_chunk(cfg, s, latent, zones_arr, mult, calendar, lo, hi):
    trip_user, month, j = _expand_counts(cfg, s, np.arange(lo, hi), latent["rate"][lo:hi])
    lu = {k: v[trip_user] for k, v in latent.items() if isinstance(v, np.ndarray)}
    departure, o, d, dist, workday, peak = _trip_geometry(s, cfg, lu, trip_user, month, j, calendar)
    p = _mode_probabilities(cfg, zones_arr, lu, month, dist, o, d, peak)

    enrol = lu["enrol"]
    k = month - enrol
    treated = enrol >= 0
    profile = np.asarray(cfg.dynamic_profile)
    shift = np.zeros(len(month))
    post = treated & (k >= 0)
    shift[post] = lu["att"][post] * profile[np.minimum(k[post], 8)]
    pre = treated & (k == -1)
    shift[pre] = cfg.anticipation
    shift *= mult[o]

    p_car = (p[:, 0] - lu["trend"] * month).clip(0.0, 1.0)
    p_car_new = (p_car - shift).clip(0.0, 1.0)
    u_car = s.uniform("mode-car", trip_user, month, j)
    low_cond = p[:, 1:] / np.maximum(1.0 - p[:, 0], 1e-300)[:, None]
    # a trip with no low-carbon mass can only fall back to bus
    low_cond[(1.0 - p[:, 0]) <= 1e-300] = [1.0, 0.0, 0.0]
    low_mode = 1 + categorical(s.uniform("mode-low", trip_user, month, j), low_cond)
    cf_mode = np.where(u_car < p_car, 0, low_mode)
    mode = np.where(u_car < p_car_new, 0, low_mode)

    noise = np.exp(0.2 * s.normal("duration", trip_user, month, j))
    duration = (60.0 * dist / _SPEED[mode] + _OVERHEAD[mode]) * noise
    return {
        "user": trip_user, "month": month, "departure": departure, "o": o, "d": d,
        "dist": dist, "duration": duration, "mode": mode, "cf_mode": cf_mode, "workday": workday,
    }


def generate(config: ScenarioConfig) -> Scenario:
    """Generate users, zones, trips and the ground truth for ``config``.

    Output is a pure function of the configuration: trips are sorted by
    (user_id, departure) and every random draw is keyed by
    (seed, purpose, user, month, trip counter).
    """
    validate(config)
    cfg = config
    s = Streams(cfg.seed)
    zones = plant_zone_archetypes(cfg)
    users, latent, propensity, selection = _individuals(cfg, zones)
    mult = _zone_multiplier(cfg, zones, latent)
    zones["effect_multiplier"] = mult
    zones_arr = (zones["subway_density"].to_numpy(), zones["bus_density"].to_numpy(), zones["road_density"].to_numpy())
    calendar = _month_calendar(cfg.bounds)

    parts = [
        _generate_chunk(cfg, s, latent, zones_arr, mult, calendar, lo, min(lo + _CHUNK, cfg.n_individuals))
        for lo in range(0, cfg.n_individuals, _CHUNK)
    ]
    cols = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    order = np.lexsort((cols["departure"], cols["user"]))
    cols = {k: v[order] for k, v in cols.items()}

    o_r, o_c = np.divmod(cols["o"], cfg.grid_cols)
    d_r, d_c = np.divmod(cols["d"], cfg.grid_cols)
    start = np.datetime64(cfg.start, "m")
    trips = pd.DataFrame(
        {
            "user_id": cols["user"].astype(np.int64),
            "departure": start + cols["departure"].astype("timedelta64[m]"),
            "origin_row": o_r.astype(np.int64),
            "origin_col": o_c.astype(np.int64),
            "dest_row": d_r.astype(np.int64),
            "dest_col": d_c.astype(np.int64),
            # rounded to the precision written to disk so CSV round trips are exact
            "distance_km": np.round(cols["dist"], 3),
            "duration_min": np.round(cols["duration"], 2),
            "mode": cols["mode"].astype(np.int8),
            "is_workday": cols["workday"],
        }
    )
    trips["departure"] = trips["departure"].astype("datetime64[ns]")

    realized = tm.panel_from_arrays(
        cols["user"], cols["month"], cols["mode"], trips["duration_min"].to_numpy(), trips["distance_km"].to_numpy(), users, cfg.n_months
    )
    cf = tm.panel_from_arrays(
        cols["user"], cols["month"], cols["cf_mode"], trips["duration_min"].to_numpy(), trips["distance_km"].to_numpy(), users, cfg.n_months
    )
    cells = realized[["user_id", "month", "pst", "n_trips", "dp"]].copy()
    cells["pst_counterfactual"] = cf["pst"].to_numpy()

    beta = {k: 0.0 for k in range(tm.EVENT_MIN, tm.EVENT_MAX + 1)}
    beta[-1] = cfg.anticipation
    for k in range(0, 9):
        beta[k] = cfg.planted_att * cfg.dynamic_profile[k]
    truth = GroundTruth(
        propensity=pd.Series(propensity, index=users["user_id"].to_numpy(), name="propensity"),
        cells=cells,
        beta=beta,
        zone_category=pd.Series(
            [ARCHETYPE_CATEGORY[a] for a in zones["archetype"]], index=zones["zone_id"].to_numpy(), name="category"
        ),
        trip_counterfactual_mode=cols["cf_mode"].astype(np.int8),
        selection_strength=selection,
        planted={
            "planted_att": cfg.planted_att,
            "dynamic_profile": list(cfg.dynamic_profile),
            "anticipation": cfg.anticipation,
            "att_heterogeneity": json.loads(json.dumps(cfg.att_heterogeneity)),
            "seed": cfg.seed,
        },
    )
    zones_out = zones[["zone_id", "row", "col", "subway_density", "bus_density", "road_density", "archetype", "effect_multiplier"]]
    return Scenario(cfg, trips, users, zones_out.copy(), truth)


# mode constants under which each mode is the utility maximiser for a sizeable share of trips
PREFERENCE_ASC = (0.0, 0.0, -0.5, 1.2)


def preference_sample(
    config: ScenarioConfig,
    n_trips: int,
    noise: float = 0.1,
    seed: Optional[int] = None,
    mode_asc=PREFERENCE_ASC,
) -> pd.DataFrame:
    """Labelled trips whose mode is the utility-maximising one, with ``noise`` of labels randomised.

    Segment utilities are switched off so the preference is a function of the
    trip features alone; the Bayes accuracy is ``1 - noise * 3/4``. The
    default ``mode_asc`` keeps every mode's share of preferences near a quarter
    so that majority-class guessing scores about 0.3.
    """
    cfg = config.replace(
        segment_asc={}, segment_trend={}, seed=config.seed if seed is None else seed,
        mode_asc=tuple(mode_asc) if mode_asc is not None else config.mode_asc,
    )
    s = Streams(cfg.seed)
    zones = plant_zone_archetypes(cfg)
    n_users = max(1, n_trips // 20)
    users, latent, _, _ = _individuals(cfg.replace(n_individuals=n_users), zones)
    zones_arr = (zones["subway_density"].to_numpy(), zones["bus_density"].to_numpy(), zones["road_density"].to_numpy())
    calendar = _month_calendar(cfg.bounds)
    t = np.arange(n_trips)
    ui = t % n_users
    month = (t // n_users) % cfg.n_months
    j = t
    lu = {k: v[ui] for k, v in latent.items() if isinstance(v, np.ndarray)}
    departure, o, d, _, workday, _ = _trip_geometry(s, cfg, lu, ui, month, j, calendar)
    # distance and peak flag rebuilt from the recorded fields so the preference
    # is a deterministic function of what a classifier can see
    o_r, o_c = np.divmod(o, cfg.grid_cols)
    d_r, d_c = np.divmod(d, cfg.grid_cols)
    dist = 1.3 * 0.5 * np.hypot(o_r - d_r, o_c - d_c) + 0.7
    hour = (departure % 1440) // 60
    peak = (workday & (((hour >= 7) & (hour <= 9)) | ((hour >= 17) & (hour <= 19)))).astype(float)
    p = _mode_probabilities(cfg, zones_arr, lu, month, dist, o, d, peak)
    preferred = p.argmax(axis=1)
    flip = s.uniform("label-noise", t) < noise
    random_mode = np.floor(4 * s.uniform("label-random", t)).astype(np.int64)
    mode = np.where(flip, random_mode, preferred)
    # duration follows the mode actually used; label noise is a recording error
    dur = (60.0 * dist / _SPEED[preferred] + _OVERHEAD[preferred]) * np.exp(0.2 * s.normal("duration", t))
    return pd.DataFrame(
        {
            "user_id": ui.astype(np.int64),
            "departure": (np.datetime64(cfg.start, "m") + departure.astype("timedelta64[m]")).astype("datetime64[ns]"),
            "origin_row": o_r, "origin_col": o_c, "dest_row": d_r, "dest_col": d_c,
            "distance_km": np.round(dist, 3),
            "duration_min": np.round(dur, 2),
            "mode": mode.astype(np.int8),
            "is_workday": workday,
            "preferred": preferred.astype(np.int8),
        }
    )
