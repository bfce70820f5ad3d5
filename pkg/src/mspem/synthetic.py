"""Small synthetic inputs for examples and tests: game logs and per-player features.

Nothing here is calibrated to real data; the generators only need to
exercise every column of the ingestion schemas.
"""

from __future__ import annotations

import numpy as np
import pandas as pd
from scipy.special import expit

from .survdata import TIERS

__all__ = ["FEATURE_COLUMNS", "generate_games", "generate_player_features"]

FEATURE_COLUMNS = (
    "mean_minutes",
    "fga",
    "rebounds",
    "fouls",
    "games_played",
    "frac_30min",
    "usage_rate",
    "assists",
    "steals",
    "blocks",
    "oreb",
    "fta",
    "ts_pct",
)

_TIER_MINUTES = {"HighUsageStar": 34.0, "StartingRole": 28.0, "Rotation": 20.0, "Reserve": 11.0}


def generate_games(
    n_players: int = 8,
    n_games: int = 25,
    seed: int = 0,
    base_logit: float = -2.0,
    start_date: str = "2024-10-22",
) -> pd.DataFrame:
    """Game-log rows (played and missed) in the ingestion schema, plus ``tier``."""
    rng = np.random.default_rng(seed)
    rows = []
    day0 = pd.Timestamp(start_date)
    for i in range(n_players):
        tier = TIERS[i % len(TIERS)]
        age = int(rng.integers(20, 37))
        bmi = round(float(rng.normal(25.0, 1.5)), 1)
        u = rng.normal(0, 0.3 / np.sqrt(1 - 0.95**2))
        day = day0
        history = []  # (date, minutes) of played games
        streak = 0
        for g in range(1, n_games + 1):
            rest = 3 if g == 1 else int(rng.choice([1, 2, 3, 4], p=[0.2, 0.35, 0.3, 0.15]))
            day = day + pd.Timedelta(days=rest)
            u = 0.95 * u + rng.normal(0, 0.3)
            load7 = sum(m for d, m in history if (day - d).days <= 7)
            b2b = rest <= 1
            played = rng.random() < expit(1.5 + 1.5 * u - 0.4 * b2b)
            minutes = round(float(np.clip(rng.normal(_TIER_MINUTES[tier] + 3 * u, 5), 4, 44)), 1) if played else 0.0
            p_event = expit(base_logit - u + 0.03 * (age - 28) + 0.01 * minutes)
            event = int(played and rng.random() < p_event)
            rows.append(
                {
                    "player_id": f"P{i + 1:03d}",
                    "game_date": day.date().isoformat(),
                    "game_index": g,
                    "minutes": minutes,
                    "rest_days": rest,
                    "recent_load_7d": round(load7, 1),
                    "consecutive_games": streak,
                    "home": int(rng.random() < 0.5),
                    "age": age,
                    "bmi": bmi,
                    "event": event,
                    "played": int(played),
                    "tier": tier,
                }
            )
            if played:
                history.append((day, minutes))
                streak += 1
            else:
                streak = 0
    return pd.DataFrame(rows)


def generate_player_features(n_per_tier: int = 25, seed: int = 0, short_stints: int = 0) -> pd.DataFrame:
    """Four well-separated player archetypes, plus optional players with < 10 games."""
    rng = np.random.default_rng(seed)
    centers = {
        "HighUsageStar": [34, 19, 7, 2.5, 70, 0.8, 0.30, 6, 1.3, 0.8, 1.5, 7, 0.60],
        "StartingRole": [28, 11, 5, 2.3, 65, 0.45, 0.20, 3, 1.0, 0.5, 1.2, 3, 0.57],
        "Rotation": [20, 7, 4, 2.0, 55, 0.1, 0.17, 2, 0.7, 0.4, 0.9, 2, 0.55],
        "Reserve": [10, 3, 2, 1.2, 30, 0.0, 0.15, 0.8, 0.3, 0.2, 0.5, 0.7, 0.50],
    }
    scale = np.array([1.5, 1.0, 0.6, 0.2, 5, 0.05, 0.015, 0.5, 0.1, 0.1, 0.15, 0.5, 0.02])
    parts = []
    for name, c in centers.items():
        x = np.asarray(c, float) + rng.normal(size=(n_per_tier, len(c))) * scale
        parts.append(pd.DataFrame(x, columns=FEATURE_COLUMNS).assign(true_tier=name))
    df = pd.concat(parts, ignore_index=True)
    if short_stints:
        x = np.asarray(centers["StartingRole"], float) + rng.normal(size=(short_stints, 13)) * scale
        extra = pd.DataFrame(x, columns=FEATURE_COLUMNS).assign(true_tier="Reserve")
        extra["games_played"] = rng.integers(1, 10, short_stints)
        df = pd.concat([df, extra], ignore_index=True)
    df["games_played"] = np.maximum(np.round(df["games_played"]), 0).astype(int)
    df["frac_30min"] = df["frac_30min"].clip(0, 1)
    df.insert(0, "player_id", [f"P{i + 1:03d}" for i in range(len(df))])
    return df
