"""Daily zone graphs: trip-flow edges, per-mode node features, shift targets."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from scipy import sparse

from .. import trip_model as tm

N_MODES = len(tm.MODES)
CAR = int(tm.TravelMode.CAR)
FEATURE_NAMES = tuple(f"{t}_{q}" for t in tm.MODE_TOKENS for q in ("volume", "avg_duration", "avg_distance"))
TARGET_NAMES = ("car_to_bus", "car_to_subway", "car_to_bike", "car_reduction", "carbon_reduction_kg")


class EmptyDayWarning(UserWarning):
    pass


@dataclass
class ZoneGraph:
    """One day of flows over a fixed zone set.

    ``edge_weight[e, m]`` counts trips by mode ``m`` from ``src[e]`` to
    ``dst[e]``; an edge is present only if its total count is positive.
    """

    date: pd.Timestamp
    zone_ids: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_weight: np.ndarray
    features: np.ndarray
    targets: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.zone_ids)

    def adjacency(self) -> sparse.csr_matrix:
        """Total-trip adjacency, ``A[i, j]`` = trips from i to j."""
        n = self.n_nodes
        return sparse.csr_matrix((self.edge_weight.sum(axis=1).astype(float), (self.src, self.dst)), shape=(n, n))


def _zone_index(trips, bounds, end: str):
    return trips[f"{end}_row"].to_numpy() * bounds.cols + trips[f"{end}_col"].to_numpy()


def node_features(n_zones: int, origin, mode, duration, distance) -> np.ndarray:
    """Per mode: trip count, mean duration and mean distance of trips leaving each zone."""
    key = np.asarray(origin) * N_MODES + np.asarray(mode)
    size = n_zones * N_MODES
    vol = np.bincount(key, minlength=size)
    dur = np.bincount(key, weights=duration, minlength=size)
    dist = np.bincount(key, weights=distance, minlength=size)
    with np.errstate(invalid="ignore", divide="ignore"):
        avg_dur = np.where(vol > 0, dur / np.maximum(vol, 1), 0.0)
        avg_dist = np.where(vol > 0, dist / np.maximum(vol, 1), 0.0)
    return np.stack([vol, avg_dur, avg_dist], axis=1).reshape(n_zones, N_MODES * 3).astype(float)


def node_targets(n_zones: int, origin, preferred, actual, er) -> np.ndarray:
    """Shift ratios car->bus/subway/bike, car-travel reduction and avoided CO2 per origin zone."""
    origin = np.asarray(origin)
    pref_car = np.asarray(preferred) == CAR
    actual = np.asarray(actual)
    pc = np.bincount(origin[pref_car], minlength=n_zones).astype(float)
    pa = np.bincount(origin[pref_car] * N_MODES + actual[pref_car], minlength=n_zones * N_MODES).reshape(n_zones, N_MODES)
    with np.errstate(invalid="ignore", divide="ignore"):
        ms = np.where(pc[:, None] > 0, pa / np.maximum(pc, 1)[:, None], 0.0)
    rct = np.where(pc > 0, 1 - ms[:, CAR], 0.0)
    co2 = np.bincount(origin, weights=er, minlength=n_zones)
    return np.column_stack([ms[:, 1], ms[:, 2], ms[:, 3], rct, co2])


def build_daily_graphs(
    trips: pd.DataFrame,
    bounds: tm.StudyBounds,
    ledger_records: Optional[pd.DataFrame] = None,
    window: Optional[tuple] = None,
) -> list[ZoneGraph]:
    """One graph per calendar day in ``window`` (inclusive dates; default: whole study).

    Node features come from every trip of the day. Targets come from
    ``ledger_records`` (index aligned with ``trips``; columns preferred,
    actual, er_kg) and are attached to each trip's origin zone.
    """
    n_zones = bounds.rows * bounds.cols
    zone_ids = np.arange(n_zones)
    days = bounds.days()
    if window is not None:
        lo, hi = pd.Timestamp(window[0]), pd.Timestamp(window[1])
        days = days[(days >= lo) & (days <= hi)]
    day_of = pd.DatetimeIndex(trips["departure"]).normalize()
    t_idx = days.get_indexer(day_of)
    keep = t_idx >= 0
    trips = trips[keep]
    t_idx = t_idx[keep]
    o = _zone_index(trips, bounds, "origin")
    d = _zone_index(trips, bounds, "dest")
    mode = trips["mode"].to_numpy().astype(np.int64)
    dur = trips["duration_min"].to_numpy(dtype=float)
    dist = trips["distance_km"].to_numpy(dtype=float)

    if ledger_records is not None:
        rec = ledger_records.loc[ledger_records.index.intersection(trips.index)]
        pos = trips.index.get_indexer(rec.index)
        r_t, r_o = t_idx[pos], o[pos]
        r_pref = rec["preferred"].to_numpy().astype(np.int64)
        r_act = rec["actual"].to_numpy().astype(np.int64)
        r_er = rec["er_kg"].to_numpy(dtype=float)
        r_order = np.argsort(r_t, kind="stable")
        r_bounds = np.searchsorted(r_t[r_order], np.arange(len(days) + 1))

    order = np.argsort(t_idx, kind="stable")
    bounds_t = np.searchsorted(t_idx[order], np.arange(len(days) + 1))
    graphs = []
    for t, day in enumerate(days):
        sel = order[bounds_t[t]:bounds_t[t + 1]]
        if sel.size == 0:
            warnings.warn(f"no trips on {day.date()}; emitting an empty graph", EmptyDayWarning, stacklevel=2)
        key = (o[sel] * n_zones + d[sel]) * N_MODES + mode[sel]
        uniq, cnt = np.unique(key, return_counts=True)
        pair, m = np.divmod(uniq, N_MODES)
        pairs, inv = np.unique(pair, return_inverse=True)
        w = np.zeros((len(pairs), N_MODES), dtype=np.int64)
        np.add.at(w, (inv, m), cnt)
        src, dst = np.divmod(pairs, n_zones)
        feats = node_features(n_zones, o[sel], mode[sel], dur[sel], dist[sel])
        if ledger_records is not None:
            rs = r_order[r_bounds[t]:r_bounds[t + 1]]
            targ = node_targets(n_zones, r_o[rs], r_pref[rs], r_act[rs], r_er[rs])
        else:
            targ = np.zeros((n_zones, len(TARGET_NAMES)))
        graphs.append(ZoneGraph(day, zone_ids, src.astype(np.int64), dst.astype(np.int64), w, feats, targ))
    return graphs
