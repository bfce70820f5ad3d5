"""Weighted cumulative exposure: lag histories, spline features, weight functions.

With ``B`` the ``L x K`` matrix of lag-basis values at lags ``1..L`` and
``m`` a game's minutes history (lag 1 first), the feature vector is
``z = B' m``; for coefficients ``gamma`` the exposure ``gamma' z`` equals
``sum_l w(l) m_l`` with ``w = B gamma``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .basis import SplineBasis, eval_basis, uniform_basis
from .errors import ValidationError

__all__ = [
    "DEFAULT_LAGS",
    "DEFAULT_LAG_BASES",
    "WeightFunction",
    "lag_basis",
    "lag_matrix",
    "lag_history",
    "build_lag_features",
    "eval_weight_function",
    "true_weight",
]

DEFAULT_LAGS = 10
DEFAULT_LAG_BASES = 5


def lag_basis(L: int = DEFAULT_LAGS, K: int = DEFAULT_LAG_BASES, degree: int = 3) -> SplineBasis:
    """Clamped spline basis over the lag domain ``[1, L]``."""
    if K == 1:
        return SplineBasis(0, (1.0, float(L)))
    return uniform_basis(1.0, float(L), K, degree=min(degree, K - 1))


def lag_matrix(basis: SplineBasis, L: int) -> np.ndarray:
    return eval_basis(basis, np.arange(1, L + 1, dtype=float))


@dataclass(frozen=True)
class WeightFunction:
    gamma: np.ndarray
    basis: SplineBasis

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=float).ravel()
        if g.size != self.basis.num_bases:
            raise ValidationError(f"{g.size} coefficients for {self.basis.num_bases} bases")
        object.__setattr__(self, "gamma", g)

    def __call__(self, lags) -> np.ndarray:
        return eval_weight_function(self, lags)

    def table(self, L: int | None = None) -> pd.DataFrame:
        L = int(self.basis.domain[1]) if L is None else L
        lags = np.arange(1, L + 1)
        return pd.DataFrame({"lag": lags, "w": self(lags)})


def eval_weight_function(wf: WeightFunction, lags) -> np.ndarray:
    """``w(l) = sum_k gamma_k B_k(l)``; out-of-domain lags raise ``DomainError``."""
    return eval_basis(wf.basis, lags) @ wf.gamma


def true_weight(lags, scale: float = 0.005, rate: float = 0.2) -> np.ndarray:
    """Exponentially decaying reference weight ``scale * exp(-rate * l)``."""
    return scale * np.exp(-rate * np.asarray(lags, dtype=float))


def lag_history(minutes, player_id=None, order=None, L: int = DEFAULT_LAGS) -> np.ndarray:
    """``n x L`` matrix whose column ``l-1`` holds the minutes ``l`` rows earlier.

    Rows must already be grouped by player and sorted by ``order`` within
    each player; histories are zero-padded before a player's first row.

    Raises
    ------
    ValidationError
        If rows are out of order within a player or minutes are negative.
    """
    m = np.asarray(minutes, dtype=float)
    n = m.size
    if np.any(m < 0):
        raise ValidationError("minutes must be non-negative")
    pid = np.zeros(n, dtype=int) if player_id is None else pd.factorize(np.asarray(player_id))[0]
    starts = np.r_[True, pid[1:] != pid[:-1]]
    # each player must appear as one contiguous block
    if np.unique(pid[starts]).size != starts.sum():
        raise ValidationError("rows are not grouped by player")
    if order is not None:
        o = np.asarray(order)
        same = ~starts[1:]
        if np.any(same & ~(o[1:] > o[:-1])):
            raise ValidationError("rows are not ordered by game within player")
    block_start = np.maximum.accumulate(np.where(starts, np.arange(n), 0))
    pos = np.arange(n) - block_start
    H = np.zeros((n, L))
    for lag in range(1, L + 1):
        ok = pos >= lag
        H[ok, lag - 1] = m[np.nonzero(ok)[0] - lag]
    return H


def build_lag_features(minutes, player_id=None, order=None, basis: SplineBasis | None = None, L: int = DEFAULT_LAGS) -> np.ndarray:
    """WCE feature matrix ``Z = H B`` of shape ``n x K``."""
    basis = lag_basis(L) if basis is None else basis
    return lag_history(minutes, player_id, order, L) @ lag_matrix(basis, L)
