"""Counting-process data, covariate binning, PED augmentation and Kaplan-Meier.

Game logs arrive as one row per player and game opportunity (played or
missed).  Played rows become counting-process records on the
cumulative-minutes time scale: ``t_start`` is the minutes accumulated before
the game and ``t_stop`` the minutes after it.  Missed games add no minutes,
so absences are excluded from the clock automatically.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, asdict
from typing import Mapping

import numpy as np
import pandas as pd

from .errors import SchemaError, ValidationError

__all__ = [
    "GAMES_COLUMNS",
    "GAP_TYPES",
    "SEASON_PHASES",
    "TIERS",
    "CountingRecord",
    "KmCurve",
    "gap_type",
    "season_phase",
    "bin_covariates",
    "read_games",
    "validate_games",
    "to_counting_process",
    "make_cutpoints",
    "ped_transform",
    "km_fit",
    "km_frame",
    "rate_table",
]

GAMES_COLUMNS = (
    "player_id",
    "game_date",
    "game_index",
    "minutes",
    "rest_days",
    "recent_load_7d",
    "consecutive_games",
    "home",
    "age",
    "bmi",
    "event",
    "played",
)
GAP_TYPES = ("b2b", "short", "normal", "extended")
SEASON_PHASES = ("early", "mid", "late")
TIERS = ("HighUsageStar", "StartingRole", "Rotation", "Reserve")


def gap_type(rest_days) -> str:
    """Game-gap category: back-to-back (<=1), short (2), normal (3), extended (>3)."""
    if rest_days < 0:
        raise ValidationError(f"rest_days must be non-negative, got {rest_days}")
    if rest_days <= 1:
        return "b2b"
    if rest_days <= 2:
        return "short"
    if rest_days <= 3:
        return "normal"
    return "extended"


def season_phase(game_index) -> str:
    """Season phase from the 1-based game index: early 1-27, mid 28-55, late 56+."""
    if game_index < 1:
        raise ValidationError(f"game_index must be >= 1, got {game_index}")
    if game_index <= 27:
        return "early"
    if game_index <= 55:
        return "mid"
    return "late"


@dataclass(frozen=True)
class CountingRecord:
    player_id: str
    t_start: float
    t_stop: float
    event: int
    minutes: float
    rest_days: int
    recent_load_7d: float
    consecutive_games: int
    season_phase: str
    gap_type: str
    home: int
    age: float
    bmi: float
    tier: str | None = None

    def __post_init__(self):
        if not self.t_stop > self.t_start:
            raise ValidationError(f"t_stop ({self.t_stop}) must exceed t_start ({self.t_start})")
        if self.event not in (0, 1):
            raise ValidationError("event must be 0 or 1")
        if self.rest_days < 0:
            raise ValidationError("rest_days must be non-negative")

    def as_dict(self) -> dict:
        return asdict(self)


def bin_covariates(raw):
    """Attach ``gap_type`` and ``season_phase``.

    Accepts a single mapping (returns a dict) or a DataFrame (returns a
    copy).  Applying it to its own output is a no-op.
    """
    if isinstance(raw, pd.DataFrame):
        out = raw.copy()
        rest = out["rest_days"].to_numpy(dtype=float)
        idx = out["game_index"].to_numpy(dtype=float)
        if np.any(rest < 0):
            bad = int(np.nonzero(rest < 0)[0][0])
            raise ValidationError(f"negative rest_days at row {bad + 1}")
        if np.any(idx < 1):
            bad = int(np.nonzero(idx < 1)[0][0])
            raise ValidationError(f"game_index < 1 at row {bad + 1}")
        out["gap_type"] = pd.Categorical(
            np.select([rest <= 1, rest <= 2, rest <= 3], list(GAP_TYPES[:3]), GAP_TYPES[3]),
            categories=GAP_TYPES,
        )
        out["season_phase"] = pd.Categorical(
            np.select([idx <= 27, idx <= 55], list(SEASON_PHASES[:2]), SEASON_PHASES[2]),
            categories=SEASON_PHASES,
        )
        return out
    row = dict(raw)
    row["gap_type"] = gap_type(row["rest_days"])
    row["season_phase"] = season_phase(row["game_index"])
    return row


def validate_games(df: pd.DataFrame) -> pd.DataFrame:
    """Check the game-log schema, collecting every problem with its row number."""
    missing = [c for c in GAMES_COLUMNS if c not in df.columns]
    if missing:
        raise SchemaError([(None, f"missing columns: {', '.join(missing)}")])
    if df.empty:
        raise SchemaError([(None, "no data rows")])
    problems = []
    out = df.copy()
    numeric = [c for c in GAMES_COLUMNS if c not in ("player_id", "game_date")]
    for col in numeric:
        vals = pd.to_numeric(out[col], errors="coerce")
        for r in np.nonzero(vals.isna().to_numpy())[0][:20]:
            problems.append((int(r) + 1, f"{col} is not numeric: {df[col].iloc[r]!r}"))
        out[col] = vals
    dates = pd.to_datetime(out["game_date"], format="ISO8601", errors="coerce")
    for r in np.nonzero(dates.isna().to_numpy())[0][:20]:
        problems.append((int(r) + 1, f"game_date is not ISO-8601: {df['game_date'].iloc[r]!r}"))
    out["game_date"] = dates
    if problems:
        raise SchemaError(problems)

    def flag(mask, msg):
        for r in np.nonzero(np.asarray(mask))[0][:20]:
            problems.append((int(r) + 1, msg))

    flag(~out["event"].isin([0, 1]), "event must be 0 or 1")
    flag(~out["played"].isin([0, 1]), "played must be 0 or 1")
    flag(~out["home"].isin([0, 1]), "home must be 0 or 1")
    flag(out["rest_days"] < 0, "rest_days must be non-negative")
    flag(out["game_index"] < 1, "game_index must be >= 1")
    flag(out["minutes"] < 0, "minutes must be non-negative")
    flag((out["played"] == 1) & (out["minutes"] <= 0), "played game with no minutes")
    flag((out["played"] == 0) & (out["event"] == 1), "event on a missed game")
    if "tier" in out.columns:
        flag(out["tier"].notna() & ~out["tier"].isin(TIERS), f"tier must be one of {TIERS}")
    if problems:
        raise SchemaError(sorted(problems, key=lambda p: p[0]))
    out["player_id"] = out["player_id"].astype(str)
    for col in ("game_index", "rest_days", "consecutive_games", "home", "event", "played"):
        out[col] = out[col].astype(int)
    return out


def read_games(path: str | os.PathLike) -> pd.DataFrame:
    """Read and validate a game-log CSV (lines starting with ``#`` are comments)."""
    df = pd.read_csv(path, comment="#", dtype={"player_id": str})
    return validate_games(df)


def to_counting_process(games: pd.DataFrame) -> pd.DataFrame:
    """Counting-process records from validated game rows (played rows only).

    Rows are ordered by player then game; ``t_start``/``t_stop`` accumulate
    each player's minutes.  ``b2b`` is added as a 0/1 indicator.
    """
    played = games.loc[games["played"] == 1].copy()
    played = played.sort_values(["player_id", "game_date", "game_index"], kind="mergesort")
    played = played.reset_index(drop=True)
    played["t_stop"] = played.groupby("player_id", sort=False)["minutes"].cumsum()
    played["t_start"] = played["t_stop"] - played["minutes"]
    played = bin_covariates(played)
    played["b2b"] = (played["gap_type"] == "b2b").astype(int)
    front = ["player_id", "t_start", "t_stop", "event"]
    return played[front + [c for c in played.columns if c not in front]]


def make_cutpoints(t_stop, event, J: int = 20) -> np.ndarray:
    """Interval boundaries at event-time quantiles.

    Returns ``{0} U {quantile(event times, q/J), q=1..J-1} U {max t_stop}``
    with duplicates collapsed.
    """
    if J < 2:
        raise ValidationError("J must be at least 2")
    t_stop = np.asarray(t_stop, dtype=float)
    event = np.asarray(event).astype(bool)
    if not event.any():
        raise ValidationError("no events: cannot place event-time quantiles")
    tmax = float(t_stop.max())
    qs = np.quantile(t_stop[event], np.arange(1, J) / J)
    qs = qs[(qs > 0) & (qs < tmax)]
    return np.unique(np.r_[0.0, qs, tmax])


def ped_transform(records: pd.DataFrame, cuts) -> pd.DataFrame:
    """Split counting-process records at the cut points.

    Each output row carries ``record`` (row position in ``records``),
    ``interval`` j, its sub-interval ``[t_lo, t_hi]``, ``exposure``,
    ``offset = log(exposure)``, the event flag (only on a record's last row)
    and ``t_mid``, the midpoint of cut interval j.  All other record columns
    are copied through.
    """
    cuts = np.asarray(cuts, dtype=float)
    if cuts.ndim != 1 or cuts.size < 2 or np.any(np.diff(cuts) <= 0):
        raise ValidationError("cut points must be a strictly increasing sequence")
    t0 = records["t_start"].to_numpy(dtype=float)
    t1 = records["t_stop"].to_numpy(dtype=float)
    out_of_range = (t0 < cuts[0]) | (t1 > cuts[-1])
    if np.any(out_of_range):
        r = int(np.nonzero(out_of_range)[0][0])
        raise ValidationError(
            f"record {r} ({t0[r]}, {t1[r]}] lies outside cut range [{cuts[0]}, {cuts[-1]}]"
        )
    j_first = np.searchsorted(cuts, t0, side="right") - 1
    j_last = np.searchsorted(cuts, t1, side="left") - 1
    counts = j_last - j_first + 1
    rec = np.repeat(np.arange(len(records)), counts)
    within = np.arange(rec.size) - np.repeat(np.cumsum(counts) - counts, counts)
    j = j_first[rec] + within
    lo = np.maximum(t0[rec], cuts[j])
    hi = np.minimum(t1[rec], cuts[j + 1])
    exposure = hi - lo
    ev = records["event"].to_numpy()[rec] * (j == j_last[rec])

    ped = records.iloc[rec].reset_index(drop=True)
    ped.insert(0, "record", rec)
    ped.insert(1, "interval", j)
    ped["t_lo"] = lo
    ped["t_hi"] = hi
    ped["exposure"] = exposure
    ped["offset"] = np.log(exposure)
    ped["event"] = ev.astype(int)
    ped["t_mid"] = 0.5 * (cuts[j] + cuts[j + 1])
    ped["weight"] = 1.0
    return ped


@dataclass
class KmCurve:
    """Product-limit curve; the first point is ``(0, 1)``."""

    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def at(self, t) -> np.ndarray:
        idx = np.searchsorted(self.times, np.asarray(t, float), side="right") - 1
        return self.survival[np.clip(idx, 0, None)]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"time": self.times, "survival": self.survival, "at_risk": self.at_risk, "events": self.events}
        )


def _km_one(t0, t1, ev) -> KmCurve:
    times = np.unique(t1[ev])
    s0 = np.sort(t0)
    s1 = np.sort(t1)
    # at risk at t: t_start < t <= t_stop
    n = (s1.size - np.searchsorted(s1, times, side="left")) - (
        s0.size - np.searchsorted(s0, times, side="left")
    )
    d = np.searchsorted(np.sort(t1[ev]), times, side="right") - np.searchsorted(
        np.sort(t1[ev]), times, side="left"
    )
    surv = np.cumprod(1.0 - d / n)
    n0 = int(np.sum((t0 <= 0) & (t1 > 0)))
    return KmCurve(
        times=np.r_[0.0, times],
        survival=np.r_[1.0, surv],
        at_risk=np.r_[n0, n].astype(int),
        events=np.r_[0, d].astype(int),
    )


def km_fit(t_start, t_stop, event, strata=None) -> dict[str, KmCurve]:
    """Kaplan-Meier curves with delayed entry, one per stratum.

    Returns ``{"all": curve}`` when ``strata`` is ``None``.
    """
    t0 = np.asarray(t_start, float)
    t1 = np.asarray(t_stop, float)
    ev = np.asarray(event).astype(bool)
    if t0.size == 0:
        raise ValidationError("no records")
    if strata is None:
        return {"all": _km_one(t0, t1, ev)}
    strata = np.asarray(strata)
    out = {}
    for s in pd.unique(strata):
        m = strata == s
        out[str(s)] = _km_one(t0[m], t1[m], ev[m])
    return out


def km_frame(curves: Mapping[str, KmCurve], name: str = "stratum") -> pd.DataFrame:
    frames = [c.to_frame().assign(**{name: k}) for k, c in curves.items()]
    df = pd.concat(frames, ignore_index=True)
    return df[[name, "time", "survival", "at_risk", "events"]]


def rate_table(records: pd.DataFrame, by: str | None = None) -> pd.DataFrame:
    """Observations, events, per-game rate (%) and events per 1000 minutes."""
    def summarize(g):
        minutes = float((g["t_stop"] - g["t_start"]).sum())
        ev = int(g["event"].sum())
        return pd.Series(
            {
                "obs": len(g),
                "players": g["player_id"].nunique(),
                "events": ev,
                "rate_pct": 100.0 * ev / len(g),
                "per_1000_min": 1000.0 * ev / minutes,
            }
        )

    if by is None:
        return summarize(records).to_frame().T.assign(group="all").set_index("group")
    return records.groupby(by, observed=True).apply(summarize, include_groups=False)
