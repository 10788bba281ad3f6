"""Zone clustering into effectiveness categories and infrastructure regression."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy.cluster import hierarchy
from sklearn.metrics import calinski_harabasz_score, silhouette_score

CATEGORIES = ("HI", "MI", "LI", "NI")
REGRESSORS = ("road_density", "bus_density", "subway_density", "car_travel_time", "transit_travel_time")


class RankDeficientError(ValueError):
    pass


@dataclass
class ZoneClusterResult:
    zone_ids: np.ndarray
    embeddings: np.ndarray
    projection: np.ndarray
    labels: np.ndarray
    k: int
    scores: pd.DataFrame  # k, silhouette, calinski_harabasz
    categories: Optional[np.ndarray] = None
    degenerate: bool = False
    notes: list = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        import hashlib

        hashes = [hashlib.sha256(np.ascontiguousarray(e).tobytes()).hexdigest()[:16] for e in self.embeddings]
        return pd.DataFrame(
            {
                "zone_id": self.zone_ids,
                "embedding_hash": hashes,
                "cluster": self.labels,
                "category": self.categories if self.categories is not None else [""] * len(self.labels),
                "projection_x": self.projection[:, 0],
                "projection_y": self.projection[:, 1],
            }
        )


def pca_2d(x: np.ndarray) -> np.ndarray:
    """First two principal-component scores; signs fixed so each axis' largest loading is positive."""
    xc = x - x.mean(axis=0)
    if not np.any(xc):
        return np.zeros((len(x), 2))
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    vt = vt[:2]
    flip = np.sign(vt[np.arange(len(vt)), np.abs(vt).argmax(axis=1)])
    proj = xc @ (vt * flip[:, None]).T
    if proj.shape[1] < 2:
        proj = np.hstack([proj, np.zeros((len(x), 2 - proj.shape[1]))])
    return proj


def _standardize(x: np.ndarray) -> np.ndarray:
    sd = x.std(axis=0)
    keep = sd > 1e-12 * max(1.0, np.abs(x).max())
    return (x[:, keep] - x[:, keep].mean(axis=0)) / sd[keep]


def cluster_zones(
    embeddings: np.ndarray,
    zone_ids: Sequence,
    car_reduction: Optional[np.ndarray] = None,
    k_range: tuple = (2, 8),
    standardize: bool = True,
) -> ZoneClusterResult:
    """Ward clustering over ``k_range``; the k with the highest silhouette wins.

    With k = 4 and ``car_reduction`` given, clusters are named HI, MI, LI, NI
    in descending order of their mean car-travel reduction.
    """
    x = np.asarray(embeddings, dtype=float)
    zone_ids = np.asarray(zone_ids)
    lo, hi = k_range
    if len(x) < 8:
        raise ValueError("need at least 8 zones")
    if len(x) < hi:
        raise ValueError(f"fewer zones ({len(x)}) than the largest candidate k ({hi})")
    proj = pca_2d(x)
    z = _standardize(x) if standardize else x - x.mean(axis=0)
    if z.shape[1] == 0 or not np.any(z):
        scores = pd.DataFrame({"k": list(range(lo, hi + 1)), "silhouette": np.nan, "calinski_harabasz": np.nan})
        return ZoneClusterResult(
            zone_ids, x, proj, np.ones(len(x), dtype=int), 1, scores, degenerate=True,
            notes=["all embeddings identical: silhouette undefined, single cluster"],
        )
    tree = hierarchy.linkage(z, method="ward")
    rows, best = [], None
    for k in range(lo, hi + 1):
        labels = hierarchy.fcluster(tree, t=k, criterion="maxclust")
        n_lab = len(np.unique(labels))
        if 2 <= n_lab < len(z):
            sil = float(silhouette_score(z, labels))
            ch = float(calinski_harabasz_score(z, labels))
        else:
            sil = ch = np.nan
        rows.append({"k": k, "silhouette": sil, "calinski_harabasz": ch})
        if np.isfinite(sil) and (best is None or sil > best[0]):
            best = (sil, k, labels)
    scores = pd.DataFrame(rows)
    if best is None:
        return ZoneClusterResult(zone_ids, x, proj, np.ones(len(x), dtype=int), 1, scores, degenerate=True,
                                 notes=["no candidate k produced a valid partition"])
    _, k, labels = best
    labels = _relabel(labels)
    cats = None
    notes = []
    if k == len(CATEGORIES) and car_reduction is not None:
        cats = categorize(labels, np.asarray(car_reduction, dtype=float))
    elif k != len(CATEGORIES):
        notes.append(f"selected k={k}; clusters reported without categories")
    return ZoneClusterResult(zone_ids, x, proj, labels, k, scores, cats, notes=notes)


def _relabel(labels: np.ndarray) -> np.ndarray:
    """Renumber clusters 0.. in order of first appearance."""
    _, first = np.unique(labels, return_index=True)
    order = np.unique(labels)[np.argsort(first)]
    mapping = {c: i for i, c in enumerate(order)}
    return np.array([mapping[c] for c in labels])


def categorize(labels: np.ndarray, car_reduction: np.ndarray) -> np.ndarray:
    """HI, MI, LI, NI by descending cluster-mean car-travel reduction."""
    clusters = np.unique(labels)
    means = np.array([np.nanmean(car_reduction[labels == c]) for c in clusters])
    rank = np.argsort(-means, kind="stable")
    name = {clusters[r]: CATEGORIES[i] for i, r in enumerate(rank)}
    return np.array([name[c] for c in labels])


def purity(labels, truth) -> float:
    """Share of items whose cluster's majority truth label matches their own."""
    tab = pd.crosstab(np.asarray(labels), np.asarray(truth))
    return float(tab.max(axis=1).sum() / tab.to_numpy().sum())


@dataclass
class InfraRegression:
    names: list
    coef: np.ndarray
    se: np.ndarray
    r2: float
    n_obs: int

    def table(self) -> pd.DataFrame:
        return pd.DataFrame({"term": self.names, "coef": self.coef, "se": self.se})

    def __getitem__(self, name) -> float:
        return float(self.coef[self.names.index(name)])

    def to_json(self) -> dict:
        return {
            "terms": list(self.names),
            "coef": self.coef.tolist(),
            "se": self.se.tolist(),
            "r2": self.r2,
            "n_obs": self.n_obs,
        }


def regress_infrastructure(y, X: pd.DataFrame, rtol: float = 1e-10) -> InfraRegression:
    """OLS of a zone outcome on zone features (plus intercept) via QR."""
    y = np.asarray(y, dtype=float)
    names = ["intercept"] + list(X.columns)
    A = np.column_stack([np.ones(len(y)), X.to_numpy(dtype=float)])
    n, p = A.shape
    if n <= p:
        raise ValueError(f"need more zones ({n}) than parameters ({p})")
    ok = np.isfinite(y) & np.isfinite(A).all(axis=1)
    if not ok.all():
        raise ValueError("non-finite values in regression inputs")
    q, r = np.linalg.qr(A)
    d = np.abs(np.diag(r))
    bad = d <= rtol * d.max()
    if bad.any():
        raise RankDeficientError(f"rank-deficient design; collinear columns: {[names[i] for i in np.flatnonzero(bad)]}")
    coef = np.linalg.solve(r, q.T @ y)
    resid = y - A @ coef
    rss = float(resid @ resid)
    sigma2 = rss / (n - p)
    rinv = np.linalg.solve(r, np.eye(p))
    se = np.sqrt(sigma2 * (rinv**2).sum(axis=1))
    tss = float(((y - y.mean()) ** 2).sum())
    r2 = 1 - rss / tss if tss > 0 else float("nan")
    return InfraRegression(names, coef, se, r2, n)


def zone_outcomes(trips: pd.DataFrame, records: pd.DataFrame, zones: pd.DataFrame, cols: int) -> pd.DataFrame:
    """Per-zone car-travel reduction, avoided CO2 and average car/transit travel times.

    Ledger ``records`` (index aligned with ``trips``) are attributed to their
    trip's origin zone; travel times use every trip leaving the zone.
    """
    n = len(zones)
    o = trips["origin_row"].to_numpy() * cols + trips["origin_col"].to_numpy()
    mode = trips["mode"].to_numpy()
    dur = trips["duration_min"].to_numpy(dtype=float)
    car = mode == 0

    def mean_by(mask):
        c = np.bincount(o[mask], minlength=n)
        s = np.bincount(o[mask], weights=dur[mask], minlength=n)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(c > 0, s / np.maximum(c, 1), np.nan)

    pos = trips.index.get_indexer(records.index)
    ro = o[pos]
    pref_car = records["preferred"].to_numpy() == 0
    act_car = records["actual"].to_numpy() == 0
    pc = np.bincount(ro[pref_car], minlength=n).astype(float)
    pac = np.bincount(ro[pref_car & act_car], minlength=n).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        rct = np.where(pc > 0, 1 - pac / np.maximum(pc, 1), np.nan)
    co2 = np.bincount(ro, weights=records["er_kg"].to_numpy(dtype=float), minlength=n)
    z = zones.sort_values("zone_id")
    return pd.DataFrame(
        {
            "zone_id": z["zone_id"].to_numpy(),
            "car_reduction": rct,
            "n_car_preferred": pc.astype(np.int64),
            "co2_kg": co2,
            "road_density": z["road_density"].to_numpy(),
            "bus_density": z["bus_density"].to_numpy(),
            "subway_density": z["subway_density"].to_numpy(),
            "car_travel_time": mean_by(car),
            "transit_travel_time": mean_by((mode == 1) | (mode == 2)),
        }
    )
