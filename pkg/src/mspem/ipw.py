"""Selection model, inverse-probability and overlap weights, balance diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import PositivityError, ValidationError
from .glm import BINOMIAL, FitResult, GlmSpec, fit_glm

__all__ = [
    "SELECTION_COVARIATES",
    "SelectionFit",
    "WeightSet",
    "BalanceReport",
    "selection_frame",
    "fit_selection",
    "stabilized_weights",
    "overlap_weights",
    "arm_weights",
    "effective_sample_size",
    "balance_report",
]

# consecutive_games is post-treatment and deliberately left out
SELECTION_COVARIATES = ("age", "bmi", "recent_load_7d", "rest_days", "b2b")
DEFAULT_TRUNCATION = (1.0, 99.0)


@dataclass
class SelectionFit:
    fit: FitResult
    pi_hat: np.ndarray
    pi_bar: float
    covariates: tuple

    def odds_ratios(self) -> pd.Series:
        return np.exp(self.fit.coef_series())


@dataclass
class WeightSet:
    """Weights for the rows they were computed on.

    ``raw`` is the untruncated weight; ``weights`` the value actually used.
    """

    scheme: str
    pi_hat: np.ndarray
    raw: np.ndarray
    weights: np.ndarray
    pi_bar: float | None = None
    bounds: tuple | None = None

    @property
    def ess(self) -> float:
        return effective_sample_size(self.weights)

    def summary(self) -> dict:
        w = self.weights
        return {
            "scheme": self.scheme,
            "n": int(w.size),
            "mean": float(w.mean()),
            "min": float(w.min()),
            "max": float(w.max()),
            "ess": self.ess,
            "ess_pct": 100.0 * self.ess / w.size,
            "pi_bar": self.pi_bar,
            "bounds": None if self.bounds is None else [float(b) for b in self.bounds],
        }


@dataclass
class BalanceReport:
    table: pd.DataFrame
    ess: float
    n: int
    meta: dict = field(default_factory=dict)

    @property
    def ess_pct(self) -> float:
        return 100.0 * self.ess / self.n

    def to_csv(self, path) -> None:
        cols = ["covariate", "mean_played", "mean_rested", "smd_before", "smd_after"]
        self.table[cols].to_csv(path, index=False, float_format="%.6g")


def selection_frame(games: pd.DataFrame) -> pd.DataFrame:
    """All opportunities (played and rested) with the selection covariates."""
    out = games.copy()
    if "b2b" not in out:
        out["b2b"] = (out["rest_days"] <= 1).astype(int)
    out["A"] = out["played"].astype(int)
    return out


def fit_selection(rows: pd.DataFrame, covariates=SELECTION_COVARIATES, treatment: str = "A") -> SelectionFit:
    """Unpenalized logistic model for ``Pr(A = 1 | x)`` with an intercept."""
    missing = [c for c in (*covariates, treatment) if c not in rows]
    if missing:
        raise ValidationError(f"selection rows lack columns {missing}")
    a = rows[treatment].to_numpy(dtype=float)
    if a.min() == a.max():
        raise ValidationError("selection data contain a single class; both played and rested rows are needed")
    X = np.column_stack([np.ones(len(rows)), rows[list(covariates)].to_numpy(dtype=float)])
    fit = fit_glm(GlmSpec(BINOMIAL, X, a, names=["intercept", *covariates]))
    pi = 1.0 / (1.0 + np.exp(-(X @ fit.coef)))
    return SelectionFit(fit, pi, float(a.mean()), tuple(covariates))


def _check_pi(pi_hat, row_ids=None) -> np.ndarray:
    p = np.asarray(pi_hat, dtype=float)
    bad = np.nonzero(~((p > 0) & (p < 1)))[0]
    if bad.size:
        i = bad[0]
        label = i if row_ids is None else np.asarray(row_ids)[i]
        raise PositivityError(f"propensity {float(p[i])!r} outside (0, 1) at row {label}")
    return p


def _truncate(w: np.ndarray, truncation) -> tuple[np.ndarray, tuple | None]:
    if truncation is None:
        return w.copy(), None
    lo_pct, hi_pct = truncation
    if not 0 <= lo_pct <= hi_pct <= 100:
        raise ValidationError(f"bad truncation percentiles {truncation}")
    lo, hi = np.percentile(w, [lo_pct, hi_pct])
    return np.clip(w, lo, hi), (float(lo), float(hi))


def stabilized_weights(pi_hat, pi_bar: float, truncation=DEFAULT_TRUNCATION, row_ids=None) -> WeightSet:
    """``pi_bar / pi_hat`` for played rows, clamped to percentiles of itself."""
    p = _check_pi(pi_hat, row_ids)
    if not 0 < pi_bar < 1:
        raise ValidationError(f"pi_bar must lie in (0, 1), got {pi_bar}")
    raw = pi_bar / p
    w, bounds = _truncate(raw, truncation)
    return WeightSet("stabilized", p, raw, w, float(pi_bar), bounds)


def overlap_weights(pi_hat, A) -> WeightSet:
    p = _check_pi(pi_hat)
    a = np.asarray(A).astype(int)
    w = np.where(a == 1, 1.0 - p, p)
    return WeightSet("overlap", p, w, w.copy())


def arm_weights(pi_hat, A, scheme: str = "stabilized", pi_bar: float | None = None, truncation=DEFAULT_TRUNCATION) -> np.ndarray:
    """Weights for both arms, used for balance checks.

    Stabilized rested rows get ``(1 - pi_bar) / (1 - pi_hat)``, truncated
    at the same percentile levels within their arm.
    """
    p = _check_pi(pi_hat)
    a = np.asarray(A).astype(int)
    if scheme == "overlap":
        return overlap_weights(p, a).weights
    if scheme != "stabilized":
        raise ValidationError(f"unknown weighting scheme {scheme!r}")
    pi_bar = float(a.mean()) if pi_bar is None else pi_bar
    w = np.empty_like(p)
    played = a == 1
    w[played] = stabilized_weights(p[played], pi_bar, truncation).weights
    w[~played] = _truncate((1.0 - pi_bar) / (1.0 - p[~played]), truncation)[0]
    return w


def effective_sample_size(w) -> float:
    w = np.asarray(w, dtype=float)
    return float(w.sum() ** 2 / np.sum(w**2))


def _wmoments(x, w):
    m = np.average(x, weights=w)
    return m, np.average((x - m) ** 2, weights=w)


def _smd(x1, w1, x0, w0):
    m1, v1 = _wmoments(x1, w1)
    m0, v0 = _wmoments(x0, w0)
    sd = np.sqrt((v1 + v0) / 2.0)
    if sd <= 1e-12 * max(1.0, abs(m1), abs(m0)):
        return np.nan
    return abs(m1 - m0) / sd


def balance_report(rows: pd.DataFrame, weights, covariates=SELECTION_COVARIATES, treatment: str = "A") -> BalanceReport:
    """SMDs before and after weighting; ESS over played rows.

    ``weights`` covers every row (both arms), e.g. from :func:`arm_weights`.
    A covariate with zero pooled SD gets a missing SMD and ``flag = True``.
    """
    a = rows[treatment].to_numpy().astype(int)
    w = np.asarray(weights, dtype=float)
    if w.shape != a.shape:
        raise ValidationError("weights must cover every selection row")
    if np.any(w < 0):
        raise ValidationError("weights must be non-negative")
    played = a == 1
    if played.all() or not played.any():
        raise ValidationError("balance needs both played and rested rows")
    out = []
    for c in covariates:
        x = rows[c].to_numpy(dtype=float)
        x1, x0 = x[played], x[~played]
        before = _smd(x1, np.ones_like(x1), x0, np.ones_like(x0))
        after = _smd(x1, w[played], x0, w[~played])
        out.append(
            {
                "covariate": c,
                "mean_played": x1.mean(),
                "mean_rested": x0.mean(),
                "smd_before": before,
                "smd_after": after,
                "flag": bool(np.isnan(before) or np.isnan(after)),
            }
        )
    wp = w[played]
    meta = {"rested_arm_weighted": True, "pooled_sd": "sqrt((var_played + var_rested) / 2)"}
    return BalanceReport(pd.DataFrame(out), effective_sample_size(wp), int(played.sum()), meta)
