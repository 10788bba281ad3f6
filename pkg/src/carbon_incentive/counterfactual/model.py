"""Preferred-mode classification: feature encoding, training, evaluation, inference."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from .. import trip_model as tm
from .._rng import stream_key
from .forest import DegenerateLabelsError, ForestParams, RandomForest

TRIP_FEATURES = (
    "hour", "day_of_week", "day_of_year", "origin_row", "origin_col",
    "dest_row", "dest_col", "duration_min", "distance_km", "is_workday",
)
ZONE_ATTRIBUTES = ("subway_density", "bus_density", "road_density")
PROFILE_FEATURES = tuple(f"share_{t}" for t in tm.MODE_TOKENS)


class EncodingError(ValueError):
    pass


@dataclass
class FeatureEncoder:
    """Turns a trips frame into the classifier's feature matrix.

    With ``zone_attrs`` set (one row per grid cell, row-major), origin and
    destination cells are also described by their infrastructure densities.
    With ``profiles`` set, each trip also carries its user's pre-period mode
    shares; users with fewer than ``min_profile_trips`` trips get the pooled
    shares instead.
    """

    rows: int
    cols: int
    zone_attrs: Optional[np.ndarray] = None
    profiles: Optional[dict] = None
    pooled: Optional[np.ndarray] = None
    min_profile_trips: int = 20

    @property
    def names(self) -> tuple:
        names = TRIP_FEATURES
        if self.zone_attrs is not None:
            names += tuple(f"{end}_{a}" for end in ("origin", "dest") for a in ZONE_ATTRIBUTES)
        if self.profiles is not None:
            names += PROFILE_FEATURES
        return names

    @staticmethod
    def zone_matrix(zones: pd.DataFrame, rows: int, cols: int) -> np.ndarray:
        z = zones.sort_values(["row", "col"])
        if len(z) != rows * cols:
            raise ValueError("zone table must cover every grid cell")
        return z[list(ZONE_ATTRIBUTES)].to_numpy(dtype=float)

    @classmethod
    def fit(cls, trips: pd.DataFrame, rows: int, cols: int, individualized: bool = True,
            min_profile_trips: int = 20, zones: Optional[pd.DataFrame] = None) -> "FeatureEncoder":
        za = cls.zone_matrix(zones, rows, cols) if zones is not None else None
        if not individualized:
            return cls(rows, cols, za, min_profile_trips=min_profile_trips)
        modes = trips["mode"].to_numpy().astype(np.int64)
        pooled = np.bincount(modes, minlength=len(tm.MODES)) / max(len(modes), 1)
        counts = pd.crosstab(trips["user_id"], modes).reindex(columns=range(len(tm.MODES)), fill_value=0)
        n = counts.sum(axis=1)
        keep = counts[n >= min_profile_trips]
        shares = keep.to_numpy() / keep.sum(axis=1).to_numpy()[:, None]
        profiles = dict(zip(keep.index.tolist(), shares))
        return cls(rows, cols, za, profiles=profiles, pooled=pooled, min_profile_trips=min_profile_trips)

    def transform(self, trips: pd.DataFrame) -> np.ndarray:
        dep = pd.DatetimeIndex(trips["departure"])
        cols = {
            "hour": dep.hour.to_numpy(),
            "day_of_week": dep.dayofweek.to_numpy(),
            "day_of_year": dep.dayofyear.to_numpy(),
            "origin_row": trips["origin_row"].to_numpy(),
            "origin_col": trips["origin_col"].to_numpy(),
            "dest_row": trips["dest_row"].to_numpy(),
            "dest_col": trips["dest_col"].to_numpy(),
            "duration_min": trips["duration_min"].to_numpy(),
            "distance_km": trips["distance_km"].to_numpy(),
            "is_workday": trips["is_workday"].to_numpy(),
        }
        X = np.column_stack([np.asarray(cols[k], dtype=float) for k in TRIP_FEATURES])
        bad = ~np.isfinite(X).all(axis=1)
        bad |= (X[:, 3] < 0) | (X[:, 3] >= self.rows) | (X[:, 5] < 0) | (X[:, 5] >= self.rows)
        bad |= (X[:, 4] < 0) | (X[:, 4] >= self.cols) | (X[:, 6] < 0) | (X[:, 6] >= self.cols)
        bad |= (X[:, 7] <= 0) | (X[:, 8] <= 0)
        if bad.any():
            first = trips.index[np.flatnonzero(bad)[0]]
            raise EncodingError(f"trip {first!r}: feature outside encoding range")
        if self.zone_attrs is not None:
            o = (X[:, 3] * self.cols + X[:, 4]).astype(np.int64)
            d = (X[:, 5] * self.cols + X[:, 6]).astype(np.int64)
            X = np.hstack([X, self.zone_attrs[o], self.zone_attrs[d]])
        if self.profiles is None:
            return X
        shares = np.tile(self.pooled, (len(trips), 1))
        uid = trips["user_id"].to_numpy()
        for i, u in enumerate(uid):
            p = self.profiles.get(u)
            if p is not None:
                shares[i] = p
        return np.hstack([X, shares])


def binary_metrics(tp, tn, fp, fn) -> dict:
    """Accuracy, recall, precision and F1 for one binarised class.

    Undefined ratios come back as ``None``.
    """
    tp, tn, fp, fn = (int(v) for v in (tp, tn, fp, fn))
    if min(tp, tn, fp, fn) < 0:
        raise ValueError("confusion counts must be non-negative")
    n = tp + tn + fp + fn
    if n == 0:
        raise ValueError("at least one sample is required")
    re = tp / (tp + fn) if tp + fn else None
    pr = tp / (tp + fp) if tp + fp else None
    if re is None or pr is None or pr + re == 0:
        f1 = None
    else:
        f1 = 2 * pr * re / (pr + re)
    return {"Ac": (tp + tn) / n, "Re": re, "Pr": pr, "F1": f1}


def classifier_metrics(confusion) -> dict:
    """Per-class and support-weighted metrics from a square confusion matrix.

    ``confusion[i, j]`` counts samples of true class ``i`` predicted as ``j``.
    """
    cm = np.asarray(confusion, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion matrix must be square")
    n = int(cm.sum())
    if n == 0:
        raise ValueError("at least one sample is required")
    per_class = []
    for c in range(cm.shape[0]):
        tp = int(cm[c, c])
        fn = int(cm[c].sum()) - tp
        fp = int(cm[:, c].sum()) - tp
        tn = n - tp - fn - fp
        per_class.append({"TP": tp, "TN": tn, "FP": fp, "FN": fn, "support": tp + fn, **binary_metrics(tp, tn, fp, fn)})
    weighted, notes = {}, []
    for key in ("Re", "Pr", "F1"):
        ok = [m for m in per_class if m[key] is not None]
        w = sum(m["support"] for m in ok)
        weighted[key] = sum(m[key] * m["support"] for m in ok) / w if w else None
        skipped = [i for i, m in enumerate(per_class) if m[key] is None]
        if skipped:
            notes.append(f"{key} undefined for classes {skipped}; excluded from weighted average")
    return {"Ac": float(np.trace(cm)) / n, "per_class": per_class, "weighted": weighted, "notes": notes}


@dataclass
class ClassifierReport:
    confusion: np.ndarray
    metrics: dict
    cv_scores: list = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return self.metrics["Ac"]

    def to_json(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "classes": list(tm.MODE_TOKENS),
            **self.metrics,
            "cv_scores": list(self.cv_scores),
            "cv_mean": float(np.mean(self.cv_scores)) if self.cv_scores else None,
        }


@dataclass
class ForestModel:
    forest: RandomForest
    encoder: FeatureEncoder
    params: ForestParams
    cv_scores: list = field(default_factory=list)

    @property
    def n_trees(self) -> int:
        return len(self.forest.trees)

    def predict(self, trips: pd.DataFrame) -> np.ndarray:
        return self.forest.predict(self.encoder.transform(trips))

    def card(self) -> dict:
        return {
            "hyperparameters": asdict(self.params),
            "features": list(self.encoder.names),
            "classes": list(tm.MODE_TOKENS),
            "individualized": self.encoder.profiles is not None,
            "zone_attributes": self.encoder.zone_attrs is not None,
            "min_profile_trips": self.encoder.min_profile_trips,
            "cv_scores": list(self.cv_scores),
            "n_nodes": int(sum(t.n_nodes for t in self.forest.trees)),
        }


def confusion_matrix(y_true, y_pred, n_classes: int = 4) -> np.ndarray:
    return np.bincount(np.asarray(y_true) * n_classes + np.asarray(y_pred), minlength=n_classes**2).reshape(n_classes, n_classes)


def train_forest(
    trips: pd.DataFrame,
    bounds: tm.StudyBounds,
    params: ForestParams = ForestParams(),
    test_fraction: float = 0.2,
    cv_folds: int = 5,
    cv_trees: Optional[int] = None,
    individualized: bool = True,
    min_profile_trips: int = 20,
    zones: Optional[pd.DataFrame] = None,
    label: str = "mode",
    threads: int = 1,
) -> tuple[ForestModel, ClassifierReport]:
    """Fit on a random 80% of ``trips`` and evaluate on the rest.

    ``cv_trees`` caps the forest size inside cross-validation folds. Passing
    ``zones`` adds origin and destination infrastructure densities as features.
    """
    y = trips[label].to_numpy().astype(np.int64)
    if len(y) < 100:
        raise ValueError(f"need at least 100 labelled trips, got {len(y)}")
    if len(np.unique(y)) < 2:
        raise DegenerateLabelsError("degenerate labels: training data has a single class")
    rng = np.random.default_rng(stream_key(params.seed, "forest-split"))
    perm = rng.permutation(len(y))
    n_test = int(round(test_fraction * len(y)))
    test, train = np.sort(perm[:n_test]), np.sort(perm[n_test:])

    tr = trips.iloc[train]
    encoder = FeatureEncoder.fit(tr, bounds.rows, bounds.cols, individualized, min_profile_trips, zones)
    X_tr, X_te = encoder.transform(tr), encoder.transform(trips.iloc[test])
    y_tr, y_te = y[train], y[test]
    forest = RandomForest(params).fit(X_tr, y_tr, threads=threads)

    cv = []
    if cv_folds > 1:
        fold = np.random.default_rng(stream_key(params.seed, "forest-cv")).permutation(len(y_tr)) % cv_folds
        cv_params = ForestParams(**{**asdict(params), "n_trees": cv_trees or params.n_trees})
        for k in range(cv_folds):
            inn = fold != k
            if len(np.unique(y_tr[inn])) < 2:
                continue
            f = RandomForest(cv_params).fit(X_tr[inn], y_tr[inn], threads=threads)
            cv.append(float(np.mean(f.predict(X_tr[~inn]) == y_tr[~inn])))

    cm = confusion_matrix(y_te, forest.predict(X_te))
    report = ClassifierReport(cm, classifier_metrics(cm), cv)
    return ForestModel(forest, encoder, params, cv), report


def infer_preferred_modes(model: ForestModel, trips: pd.DataFrame) -> np.ndarray:
    """Most likely no-program mode for each trip (mode ordinals)."""
    if len(trips) == 0:
        return np.zeros(0, dtype=np.int8)
    return model.predict(trips).astype(np.int8)


def split_by_enrollment(trips: pd.DataFrame, users: pd.DataFrame, bounds: tm.StudyBounds):
    """Participants' trips before and from their enrollment month."""
    enrol = users.set_index("user_id")["enrollment_month"]
    e = trips["user_id"].map(enrol)
    part = e.notna().to_numpy()
    month = bounds.month_index(trips["departure"])
    e = e.to_numpy(dtype=float)
    pre = part & (month < e)
    post = part & (month >= e)
    return trips[pre], trips[post]


__all__ = [
    "TRIP_FEATURES", "ZONE_ATTRIBUTES", "PROFILE_FEATURES", "EncodingError", "FeatureEncoder", "binary_metrics",
    "classifier_metrics", "ClassifierReport", "ForestModel", "confusion_matrix", "train_forest",
    "infer_preferred_modes", "split_by_enrollment",
]
