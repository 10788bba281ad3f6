"""Mode-shift accounting: preferred vs actual modes, car reduction and avoided CO2."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from .. import trip_model as tm

N_MODES = len(tm.MODES)
CAR = int(tm.TravelMode.CAR)

FREQUENCY_BINS = (0, 3, 10, 30, 60, np.inf)
FREQUENCY_LABELS = ("<=3", "3-10", "10-30", "30-60", ">60")
DURATION_BINS = (0, 15, 30, 45, 60, np.inf)
DURATION_LABELS = ("<=15", "15-30", "30-45", "45-60", ">60")


@dataclass(frozen=True)
class EmissionFactorTable:
    """kg CO2 per passenger-km. Defaults are configuration, not measured values."""

    car: float = 0.192
    bus: float = 0.056
    subway: float = 0.035
    bike: float = 0.0
    car_occupancy: float = 1.0

    def __post_init__(self):
        if min(self.car, self.bus, self.subway, self.bike) < 0:
            raise ValueError("emission factors must be non-negative")
        if self.car_occupancy <= 0:
            raise ValueError("car occupancy must be positive")
        if self.bike != 0:
            warnings.warn("non-zero bike emission factor", stacklevel=2)

    def per_mode(self) -> np.ndarray:
        """Effective factor per mode ordinal; the car factor is divided by occupancy."""
        return np.array([self.car / self.car_occupancy, self.bus, self.subway, self.bike])

    @classmethod
    def from_dict(cls, data) -> "EmissionFactorTable":
        return cls(**dict(data))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModeShiftLedger:
    """Daily preferred-by-actual counts and derived indicators.

    Index ``[t, i, j]`` is day ``t``, preferred mode ``i``, actual mode ``j``.
    ``ms`` and ``rct`` hold NaN where their denominator is zero.
    """

    days: pd.DatetimeIndex
    pa: np.ndarray
    co2: np.ndarray
    records: pd.DataFrame
    factors: EmissionFactorTable

    @property
    def p(self) -> np.ndarray:
        return self.pa.sum(axis=2)

    @property
    def pac(self) -> np.ndarray:
        return self.pa[:, CAR, CAR]

    @property
    def pc(self) -> np.ndarray:
        return self.p[:, CAR]

    @property
    def ms(self) -> np.ndarray:
        p = self.p[:, :, None].astype(float)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(p > 0, self.pa / p, np.nan)

    @property
    def rct(self) -> np.ndarray:
        pc = self.pc.astype(float)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(pc > 0, 1 - self.pac / pc, np.nan)

    @property
    def cer(self) -> np.ndarray:
        return self.co2.sum(axis=(1, 2))

    def overall_rct(self) -> float:
        pc = self.pc.sum()
        return float(1 - self.pac.sum() / pc) if pc else float("nan")

    def to_frame(self) -> pd.DataFrame:
        """Long table (day, preferred, actual, count, co2_kg) over non-empty cells."""
        t, i, j = np.nonzero(self.pa)
        return pd.DataFrame(
            {
                "day": self.days[t].strftime("%Y-%m-%d"),
                "preferred": np.asarray(tm.MODE_TOKENS)[i],
                "actual": np.asarray(tm.MODE_TOKENS)[j],
                "count": self.pa[t, i, j],
                "co2_kg": self.co2[t, i, j],
            }
        )

    def daily(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"day": self.days.strftime("%Y-%m-%d"), "pc": self.pc, "pac": self.pac, "rct": self.rct, "cer_kg": self.cer}
        )

    def shifted(self) -> np.ndarray:
        """Mask over records: car preferred, low-carbon mode taken."""
        rec = self.records
        return (rec["preferred"].to_numpy() == CAR) & tm.LOW_CARBON[rec["actual"].to_numpy().astype(np.int64)]

    def summary(self) -> dict:
        shifted = self.shifted()
        return {
            "n_trips": int(len(self.records)),
            "n_days": int(len(self.days)),
            "n_shifted": int(shifted.sum()),
            "car_reduction": self.overall_rct(),
            "total_cer_kg": float(self.cer.sum()),
            "mean_er_per_shifted_trip_kg": float(self.records["er_kg"][shifted].mean()) if shifted.any() else None,
            "emission_factors": self.factors.to_dict(),
        }


def trip_reductions(preferred, actual, distance, factors: EmissionFactorTable) -> np.ndarray:
    """Avoided kg CO2 per trip: non-zero only for car-preferred trips made by a low-carbon mode."""
    preferred = np.asarray(preferred, dtype=np.int64)
    actual = np.asarray(actual, dtype=np.int64)
    ef = factors.per_mode()
    shifted = (preferred == CAR) & tm.LOW_CARBON[actual]
    return np.where(shifted, np.asarray(distance, dtype=float) * (ef[CAR] - ef[actual]), 0.0)


def build_ledger(preferred, actual, trips: pd.DataFrame, factors: EmissionFactorTable = EmissionFactorTable()) -> ModeShiftLedger:
    preferred = np.asarray(preferred, dtype=np.int64)
    actual = np.asarray(actual, dtype=np.int64)
    if not (len(preferred) == len(actual) == len(trips)):
        raise ValueError("preferred, actual and trips must align one-to-one")
    dist = trips["distance_km"].to_numpy(dtype=float)
    if np.isnan(dist).any():
        first = trips.index[np.flatnonzero(np.isnan(dist))[0]]
        raise ValueError(f"trip {first!r}: distance missing")
    day = pd.DatetimeIndex(trips["departure"]).normalize()
    days, t = np.unique(day.to_numpy(), return_inverse=True)
    days = pd.DatetimeIndex(days)
    er = trip_reductions(preferred, actual, dist, factors)
    flat = (t * N_MODES + preferred) * N_MODES + actual
    size = len(days) * N_MODES * N_MODES
    shape = (len(days), N_MODES, N_MODES)
    pa = np.bincount(flat, minlength=size).reshape(shape)
    co2 = np.bincount(flat, weights=er, minlength=size).reshape(shape)
    records = pd.DataFrame(
        {
            "user_id": trips["user_id"].to_numpy(),
            "day": day,
            "preferred": preferred.astype(np.int8),
            "actual": actual.astype(np.int8),
            "distance_km": dist,
            "er_kg": er,
        },
        index=trips.index,
    )
    return ModeShiftLedger(days, pa, co2, records, factors)


def user_activity(panel: pd.DataFrame) -> pd.DataFrame:
    """Average monthly trips and average trip duration per user over active months."""
    active = panel[panel["n_trips"] > 0]
    g = active.assign(total_dur=active["avg_duration"] * active["n_trips"]).groupby("user_id")
    out = pd.DataFrame({"avg_monthly_trips": g["n_trips"].mean(), "avg_duration": g["total_dur"].sum() / g["n_trips"].sum()})
    return out.reset_index()


def segment_carbon_summary(ledger: ModeShiftLedger, users: pd.DataFrame, activity: pd.DataFrame | None = None) -> pd.DataFrame:
    """Mean avoided CO2 and low-carbon-ratio change per shifted trip, by participant segment.

    The ratio change credited to a shifted trip is ``1 / n`` where ``n`` is its
    user's trip count in that month. ``activity`` (see :func:`user_activity`)
    adds frequency and duration segments.
    """
    rec = ledger.records
    if rec.empty:
        raise ValueError("ledger is empty")
    month = rec["day"].dt.to_period("M")
    n_month = rec.groupby([rec["user_id"], month])["er_kg"].transform("size")
    shifted = rec.assign(ratio_change=1.0 / n_month)[ledger.shifted()]
    shifted = shifted.merge(users, on="user_id", how="left")

    dims = {"gender": (shifted["gender"], tm.GENDERS),
            "age_band": (shifted["age_band"], tm.AGE_BANDS),
            "income_level": (shifted["income_level"], tm.INCOME_LEVELS)}
    if activity is not None:
        act = shifted[["user_id"]].merge(activity, on="user_id", how="left")
        dims["frequency"] = (pd.cut(act["avg_monthly_trips"], FREQUENCY_BINS, labels=FREQUENCY_LABELS), FREQUENCY_LABELS)
        dims["duration"] = (pd.cut(act["avg_duration"], DURATION_BINS, labels=DURATION_LABELS), DURATION_LABELS)

    rows = []
    for dim, (values, levels) in dims.items():
        values = pd.Series(np.asarray(values, dtype=object), index=shifted.index)
        for level in levels:
            m = (values == level).to_numpy()
            n = int(m.sum())
            rows.append(
                {
                    "dimension": dim,
                    "segment": str(level),
                    "n_shifted": n,
                    "mean_er_kg": float(shifted["er_kg"][m].mean()) if n else np.nan,
                    "mean_ratio_change": float(shifted["ratio_change"][m].mean()) if n else np.nan,
                }
            )
    return pd.DataFrame(rows)


def citywide_extrapolation(participant_delta, trip_share: float):
    """Scale a participant-level change (fraction or array of fractions) to the whole city.

    Participants' trips are ``trip_share`` of all city trips.
    """
    if not 0 < trip_share <= 1:
        raise ValueError("trip_share must lie in (0, 1]")
    return np.asarray(participant_delta, dtype=float) * trip_share if np.ndim(participant_delta) else participant_delta * trip_share


def annual_reduction_kg(daily_cer_kg, days_per_year: float = 365.0) -> float:
    """Mean daily avoided CO2 times ``days_per_year``."""
    daily = np.asarray(daily_cer_kg, dtype=float)
    if len(daily) < 30:
        raise ValueError(f"need at least 30 days of ledger, got {len(daily)}")
    return float(daily.mean() * days_per_year)


def citywide_summary(ledger: ModeShiftLedger, trip_share: float, days_per_year: float = 365.0) -> dict:
    """Annualised participant CO2 reduction and citywide car-reduction and mode-shift deltas."""
    pa = ledger.pa.sum(axis=0)
    pc = pa[CAR].sum()
    shift = pa[CAR] / pc if pc else np.full(N_MODES, np.nan)
    annual = annual_reduction_kg(ledger.cer, days_per_year)
    rct = ledger.overall_rct()
    return {
        "days_per_year": days_per_year,
        "participant_trip_share": trip_share,
        "annual_co2_kg": annual,
        "annual_co2_t": annual / 1000.0,
        "participant_car_reduction": rct,
        "citywide_car_reduction": citywide_extrapolation(rct, trip_share),
        "citywide_car_to_mode": {
            tm.MODE_TOKENS[m]: float(citywide_extrapolation(shift[m], trip_share)) for m in range(1, N_MODES)
        },
    }
