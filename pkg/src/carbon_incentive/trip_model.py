"""Domain types, CSV ingestion and the monthly individual panel."""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass
from datetime import date, datetime
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import pandas as pd


class TravelMode(enum.IntEnum):
    CAR = 0
    BUS = 1
    SUBWAY = 2
    BIKE = 3

    @property
    def token(self) -> str:
        return _MODE_TOKENS[self]

    @property
    def low_carbon(self) -> bool:
        return self is not TravelMode.CAR

    @classmethod
    def parse(cls, token: str) -> "TravelMode":
        return _TOKEN_MODES[token.strip().lower()]


_MODE_TOKENS = {
    TravelMode.CAR: "car",
    TravelMode.BUS: "bus",
    TravelMode.SUBWAY: "subway",
    TravelMode.BIKE: "bike",
}
_TOKEN_MODES = {v: k for k, v in _MODE_TOKENS.items()}
MODES = tuple(TravelMode)
MODE_TOKENS = tuple(m.token for m in MODES)
LOW_CARBON = np.array([m.low_carbon for m in MODES])

GENDERS = ("F", "M")
AGE_BANDS = ("<=18", "19-24", "25-34", "35-39", "40-44", "45-49", ">=50")
INCOME_LEVELS = (1, 2, 3)

EVENT_MIN, EVENT_MAX, EVENT_REF = -4, 8, -1

TRIP_COLUMNS = (
    "user_id", "departure_iso8601", "origin_row", "origin_col", "dest_row",
    "dest_col", "distance_km", "duration_min", "mode", "is_workday",
)
USER_COLUMNS = ("user_id", "gender", "age_band", "income_level", "enrollment_month")


class SchemaError(ValueError):
    """Unreadable input or a malformed header."""


@dataclass(frozen=True)
class TripRecord:
    user_id: object
    departure: datetime
    origin_cell: tuple[int, int]
    dest_cell: tuple[int, int]
    distance: float
    duration: float
    mode: TravelMode
    is_workday: bool


@dataclass(frozen=True)
class Individual:
    user_id: object
    gender: str
    age_band: str
    income_level: int
    enrollment_month: Optional[int] = None

    @property
    def treated(self) -> bool:
        return self.enrollment_month is not None


@dataclass(frozen=True)
class PanelCell:
    user_id: object
    month: int
    pst: float
    n_trips: int
    dp: int
    avg_duration: float
    avg_distance: float


@dataclass(frozen=True)
class StudyBounds:
    """Study window (calendar months from ``start``) and the planar 500 m grid.

    ``x0``/``y0`` locate the south-west corner of cell (0, 0) in metres; rows
    grow northwards and columns eastwards.
    """

    start: date = date(2022, 12, 1)
    n_months: int = 13
    rows: int = 16
    cols: int = 16
    cell_m: float = 500.0
    x0: float = 0.0
    y0: float = 0.0

    @property
    def end(self) -> date:
        y, m = divmod(self.start.month - 1 + self.n_months, 12)
        return date(self.start.year + y, m + 1, 1)

    def days(self) -> pd.DatetimeIndex:
        return pd.date_range(self.start, self.end, inclusive="left", freq="D")

    def month_index(self, when) -> np.ndarray:
        when = pd.DatetimeIndex(when)
        return np.asarray(
            (when.year - self.start.year) * 12 + (when.month - self.start.month), dtype=np.int64
        )

    def contains_cell(self, row, col) -> np.ndarray:
        row, col = np.asarray(row), np.asarray(col)
        return (row >= 0) & (row < self.rows) & (col >= 0) & (col < self.cols)

    def snap(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Map planar coordinates to the containing cell (row, col)."""
        row = np.floor((np.asarray(y) - self.y0) / self.cell_m).astype(np.int64)
        col = np.floor((np.asarray(x) - self.x0) / self.cell_m).astype(np.int64)
        return row, col

    def centroid(self, row, col) -> tuple[np.ndarray, np.ndarray]:
        x = self.x0 + (np.asarray(col) + 0.5) * self.cell_m
        y = self.y0 + (np.asarray(row) + 0.5) * self.cell_m
        return x, y


# ---------------------------------------------------------------------------
# ingestion

def _read_csv(path, columns) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise SchemaError(f"cannot read {path}: no such file")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise SchemaError(f"cannot parse {path}: {exc}") from exc
    except pd.errors.EmptyDataError as exc:
        raise SchemaError(f"{path} has no header") from exc
    if tuple(frame.columns) != tuple(columns):
        raise SchemaError(
            f"{path.name}: expected header {','.join(columns)}, got {','.join(frame.columns)}"
        )
    return frame


def ingest_trips(path, bounds: StudyBounds) -> tuple[pd.DataFrame, Counter]:
    """Read and validate ``trips.csv``.

    Malformed rows are skipped and counted in the returned report under
    ``missing_field``, ``bad_value``, ``out_of_window``, ``out_of_bounds``,
    ``non_positive_distance`` or ``non_positive_duration``. The first
    applicable reason wins.
    """
    raw = _read_csv(path, TRIP_COLUMNS)
    report: Counter = Counter()
    keep = np.ones(len(raw), dtype=bool)

    def reject(mask, reason):
        mask = mask & keep
        n = int(mask.sum())
        if n:
            report[reason] += n
            keep[mask] = False

    reject((raw.apply(lambda c: c.str.strip() == "")).any(axis=1).to_numpy(), "missing_field")

    departure = pd.to_datetime(raw["departure_iso8601"], errors="coerce").dt.floor("min")
    ints = {c: pd.to_numeric(raw[c], errors="coerce") for c in ("origin_row", "origin_col", "dest_row", "dest_col")}
    distance = pd.to_numeric(raw["distance_km"], errors="coerce")
    duration = pd.to_numeric(raw["duration_min"], errors="coerce")
    mode = raw["mode"].str.strip().str.lower().map(_TOKEN_MODES)
    workday = raw["is_workday"].str.strip().str.lower().map(
        {"1": True, "true": True, "0": False, "false": False}
    )
    bad = departure.isna() | mode.isna() | workday.isna() | distance.isna() | duration.isna()
    for v in ints.values():
        bad |= v.isna() | (v.fillna(0) % 1 != 0)
    reject(bad.to_numpy(), "bad_value")

    dep = departure.fillna(pd.Timestamp(bounds.start))
    in_window = (dep >= pd.Timestamp(bounds.start)) & (dep < pd.Timestamp(bounds.end))
    reject(~in_window.to_numpy(), "out_of_window")
    cells = {c: v.fillna(-1).astype(np.int64).to_numpy() for c, v in ints.items()}
    inside = bounds.contains_cell(cells["origin_row"], cells["origin_col"]) & bounds.contains_cell(
        cells["dest_row"], cells["dest_col"]
    )
    reject(~inside, "out_of_bounds")
    reject(~(distance.fillna(1) > 0).to_numpy(), "non_positive_distance")
    reject(~(duration.fillna(1) > 0).to_numpy(), "non_positive_duration")

    trips = pd.DataFrame(
        {
            "user_id": _maybe_int(raw["user_id"][keep]),
            "departure": dep[keep].to_numpy(),
            "origin_row": cells["origin_row"][keep],
            "origin_col": cells["origin_col"][keep],
            "dest_row": cells["dest_row"][keep],
            "dest_col": cells["dest_col"][keep],
            "distance_km": distance[keep].to_numpy(dtype=float),
            "duration_min": duration[keep].to_numpy(dtype=float),
            "mode": mode[keep].to_numpy(dtype=np.int8),
            "is_workday": workday[keep].to_numpy(dtype=bool),
        }
    )
    return trips.reset_index(drop=True), report


def ingest_users(path, bounds: StudyBounds) -> pd.DataFrame:
    """Read ``users.csv``; any invalid row is a hard error (users are reference data)."""
    raw = _read_csv(path, USER_COLUMNS)
    problems = []
    if not raw["gender"].isin(GENDERS).all():
        problems.append("gender")
    if not raw["age_band"].isin(AGE_BANDS).all():
        problems.append("age_band")
    income = pd.to_numeric(raw["income_level"], errors="coerce")
    if not income.isin(INCOME_LEVELS).all():
        problems.append("income_level")
    given = raw["enrollment_month"].str.strip() != ""
    enrol = pd.to_numeric(raw["enrollment_month"].where(given), errors="coerce")
    if enrol[given].isna().any() or ((enrol < 0) | (enrol >= bounds.n_months)).any():
        problems.append("enrollment_month")
    if raw["user_id"].duplicated().any():
        problems.append("user_id (duplicate)")
    if problems:
        raise SchemaError(f"users.csv: invalid values in {', '.join(problems)}")
    return pd.DataFrame(
        {
            "user_id": _maybe_int(raw["user_id"]),
            "gender": raw["gender"].to_numpy(),
            "age_band": raw["age_band"].to_numpy(),
            "income_level": income.astype(np.int64).to_numpy(),
            "enrollment_month": enrol.astype("Int64").to_numpy(),
        }
    )


def _maybe_int(col: pd.Series) -> np.ndarray:
    as_int = pd.to_numeric(col, errors="coerce")
    if as_int.notna().all() and (as_int % 1 == 0).all():
        return as_int.astype(np.int64).to_numpy()
    return col.to_numpy()


def write_trips_csv(trips: pd.DataFrame, path) -> None:
    out = pd.DataFrame(
        {
            "user_id": trips["user_id"],
            "departure_iso8601": pd.DatetimeIndex(trips["departure"]).strftime("%Y-%m-%dT%H:%M"),
            "origin_row": trips["origin_row"],
            "origin_col": trips["origin_col"],
            "dest_row": trips["dest_row"],
            "dest_col": trips["dest_col"],
            "distance_km": trips["distance_km"].map("{:.3f}".format),
            "duration_min": trips["duration_min"].map("{:.2f}".format),
            "mode": np.asarray(MODE_TOKENS)[trips["mode"].to_numpy()],
            "is_workday": trips["is_workday"].astype(int),
        }
    )
    out.to_csv(path, index=False, lineterminator="\n")


def write_users_csv(users: pd.DataFrame, path) -> None:
    out = users[list(USER_COLUMNS)].copy()
    out["enrollment_month"] = out["enrollment_month"].astype("Int64")
    out.to_csv(path, index=False, lineterminator="\n")


def iter_records(trips: pd.DataFrame) -> Iterator[TripRecord]:
    for row in trips.itertuples(index=False):
        yield TripRecord(
            user_id=row.user_id,
            departure=pd.Timestamp(row.departure).to_pydatetime(),
            origin_cell=(int(row.origin_row), int(row.origin_col)),
            dest_cell=(int(row.dest_row), int(row.dest_col)),
            distance=float(row.distance_km),
            duration=float(row.duration_min),
            mode=TravelMode(int(row.mode)),
            is_workday=bool(row.is_workday),
        )


# ---------------------------------------------------------------------------
# panel

def compute_pst(modes) -> Optional[float]:
    """Share of low-carbon trips; ``None`` when there are no trips."""
    modes = np.asarray([int(m) for m in modes], dtype=np.int64)
    if modes.size == 0:
        return None
    return float(LOW_CARBON[modes].sum() / modes.size)


def build_panel(trips: pd.DataFrame, users: pd.DataFrame, bounds: StudyBounds) -> pd.DataFrame:
    """One row per (user, month) with at least one trip.

    Columns: user_id, month, pst, n_trips, n_low_carbon, dp, avg_duration,
    avg_distance, enrollment_month. Sorted by (user_id, month).
    """
    user_ids = users["user_id"].to_numpy()
    lookup = pd.Index(user_ids)
    if not lookup.is_unique:
        raise ValueError("duplicate user_id in users table")
    codes = lookup.get_indexer(trips["user_id"].to_numpy())
    if (codes < 0).any():
        unknown = trips["user_id"].to_numpy()[codes < 0][0]
        raise KeyError(f"trip references unknown user_id {unknown!r}")
    month = bounds.month_index(trips["departure"])
    if ((month < 0) | (month >= bounds.n_months)).any():
        raise ValueError("trip departure outside the study window")
    return panel_from_arrays(
        codes,
        month,
        trips["mode"].to_numpy(),
        trips["duration_min"].to_numpy(dtype=float),
        trips["distance_km"].to_numpy(dtype=float),
        users,
        bounds.n_months,
    )


def panel_from_arrays(codes, month, mode, duration, distance, users, n_months) -> pd.DataFrame:
    codes = np.asarray(codes, dtype=np.int64)
    key = codes * n_months + np.asarray(month, dtype=np.int64)
    cells, inv = np.unique(key, return_inverse=True)
    n = np.bincount(inv).astype(np.int64)
    low = np.bincount(inv, weights=LOW_CARBON[np.asarray(mode, dtype=np.int64)]).round().astype(np.int64)
    dur = np.bincount(inv, weights=duration) / n
    dist = np.bincount(inv, weights=distance) / n
    ucode, mon = np.divmod(cells, n_months)
    enrol = users["enrollment_month"].astype("Int64").to_numpy(dtype=float, na_value=np.nan)[ucode]
    dp = (~np.isnan(enrol)) & (mon >= np.nan_to_num(enrol, nan=np.inf))
    return pd.DataFrame(
        {
            "user_id": users["user_id"].to_numpy()[ucode],
            "month": mon.astype(np.int64),
            "pst": low / n,
            "n_trips": n,
            "n_low_carbon": low,
            "dp": dp.astype(np.int8),
            "avg_duration": dur,
            "avg_distance": dist,
            "enrollment_month": pd.array(np.where(np.isnan(enrol), pd.NA, enrol), dtype="Int64"),
        }
    )


def event_time(month, enrollment, lo: int = EVENT_MIN, hi: int = EVENT_MAX) -> np.ndarray:
    """Relative month ``t - ST`` with endpoint binning to ``[lo, hi]``."""
    return np.clip(np.asarray(month) - np.asarray(enrollment), lo, hi)
