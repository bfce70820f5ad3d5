"""Andersen-Gill Cox regression on counting-process records.

Risk sets use ``(start, stop]`` semantics and tied event times are handled
with the Breslow approximation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from .errors import ConvergenceError, SeparationError, ValidationError

__all__ = [
    "CoxFit",
    "EvalueReport",
    "cox_fit",
    "cox_partial_loglik",
    "schoenfeld_test",
    "evalue",
    "evalue_report",
]

_Z95 = 1.959963984540054
# |beta * sd(x)| beyond this is treated as a diverging (monotone) likelihood
_SEPARATION_SCALE = 12.0


@dataclass
class CoxFit:
    names: list
    coef: np.ndarray
    se: np.ndarray
    loglik: float
    n_events: int
    n_records: int
    converged: bool
    n_iter: int
    cov: np.ndarray
    active: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def hr(self) -> np.ndarray:
        return np.exp(self.coef)

    @property
    def ci(self) -> np.ndarray:
        return np.column_stack([np.exp(self.coef - _Z95 * self.se), np.exp(self.coef + _Z95 * self.se)])

    @property
    def pvalues(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return 2 * stats.norm.sf(np.abs(self.coef / self.se))

    def table(self) -> pd.DataFrame:
        ci = self.ci
        return pd.DataFrame(
            {
                "covariate": self.names,
                "coef": self.coef,
                "se": self.se,
                "hr": self.hr,
                "ci_low": ci[:, 0],
                "ci_high": ci[:, 1],
                "p": self.pvalues,
            }
        )


class _RiskSets:
    """Sorted-index bookkeeping for sums over ``{i: start_i < t <= stop_i}``."""

    def __init__(self, start, stop, event):
        self.start, self.stop = start, stop
        ev = event.astype(bool)
        self.times, self.d = np.unique(stop[ev], return_counts=True)
        self.ev_idx = np.nonzero(ev)[0]
        self.ev_time = np.searchsorted(self.times, stop[ev])
        self.by_stop = np.argsort(stop, kind="stable")
        self.by_start = np.argsort(start, kind="stable")
        self.stop_pos = np.searchsorted(stop[self.by_stop], self.times, "left")
        self.start_pos = np.searchsorted(start[self.by_start], self.times, "left")

    def sums(self, v: np.ndarray) -> np.ndarray:
        """Per event time, sum of ``v`` (rows along axis 0) over the risk set."""

        def suffix(order, pos):
            c = np.concatenate([np.cumsum(v[order][::-1], axis=0)[::-1], np.zeros((1,) + v.shape[1:])])
            return c[pos]

        return suffix(self.by_stop, self.stop_pos) - suffix(self.by_start, self.start_pos)


def _pieces(rs: _RiskSets, X: np.ndarray, beta: np.ndarray, need_info: bool = True):
    eta = X @ beta
    c = eta.max() if eta.size else 0.0
    r = np.exp(eta - c)
    s0 = rs.sums(r)
    s1 = rs.sums(r[:, None] * X)
    if np.any(s0 <= 0):
        raise ValidationError("empty risk set at an event time")
    xbar = s1 / s0[:, None]
    ll = eta[rs.ev_idx].sum() - np.sum(rs.d * (np.log(s0) + c))
    score = X[rs.ev_idx].sum(0) - (rs.d[:, None] * xbar).sum(0)
    if not need_info:
        return ll, score, None, xbar
    s2 = rs.sums(r[:, None, None] * X[:, :, None] * X[:, None, :])
    info = np.einsum("t,tij->ij", rs.d, s2 / s0[:, None, None] - xbar[:, :, None] * xbar[:, None, :])
    return ll, score, info, xbar


def _arrays(records, covariates, start, stop, event):
    if isinstance(records, pd.DataFrame):
        missing = [c for c in (start, stop, event, *covariates) if c not in records]
        if missing:
            raise ValidationError(f"records lack columns {missing}")
        X = records[list(covariates)].to_numpy(dtype=float)
        a = records[start].to_numpy(dtype=float)
        b = records[stop].to_numpy(dtype=float)
        e = records[event].to_numpy(dtype=float)
    else:
        a, b, e, X = records
        a, b, e = (np.asarray(v, dtype=float) for v in (a, b, e))
        X = np.asarray(X, dtype=float).reshape(len(a), -1)
    if np.any(b <= a):
        raise ValidationError("each record needs start < stop")
    if not np.all(np.isin(e, (0, 1))):
        raise ValidationError("event must be 0/1")
    if e.sum() < 1:
        raise ValidationError("no events: the partial likelihood is undefined")
    return a, b, e, X


def cox_partial_loglik(records, covariates, beta, start="t_start", stop="t_stop", event="event") -> float:
    a, b, e, X = _arrays(records, covariates, start, stop, event)
    return float(_pieces(_RiskSets(a, b, e), X, np.asarray(beta, dtype=float), False)[0])


def cox_fit(
    records,
    covariates=(),
    start: str = "t_start",
    stop: str = "t_stop",
    event: str = "event",
    names=None,
    max_iter: int = 50,
    tol: float = 1e-10,
) -> CoxFit:
    """Newton-Raphson maximum of the Breslow partial likelihood.

    ``records`` is either a DataFrame holding ``start``, ``stop``, ``event``
    and the ``covariates`` columns, or a tuple ``(start, stop, event, X)``.
    Constant covariates carry no contrast and are pinned at zero.
    """
    a, b, e, X = _arrays(records, covariates, start, stop, event)
    names = list(names if names is not None else (covariates if len(covariates) else [f"x{j}" for j in range(X.shape[1])]))
    p = X.shape[1]
    sd = X.std(0)
    active = sd > 1e-12 * np.maximum(1.0, np.abs(X).max(0, initial=0.0))
    Xc = (X - X.mean(0))[:, active]
    rs = _RiskSets(a, b, e)
    beta = np.zeros(Xc.shape[1])
    ll, score, info, _ = _pieces(rs, Xc, beta)
    converged, it = Xc.shape[1] == 0, 0
    while not converged and it < max_iter:
        it += 1
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise SeparationError("singular information matrix; covariates may perfectly predict events") from None
        for _ in range(30):
            cand = beta + step
            ll_new, score_new, info_new, _ = _pieces(rs, Xc, cand)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            step = step / 2
        else:
            break
        change = abs(ll_new - ll)
        beta, ll, score, info = cand, ll_new, score_new, info_new
        if np.any(np.abs(beta) * sd[active] > _SEPARATION_SCALE):
            raise SeparationError("monotone partial likelihood: a coefficient diverges")
        converged = change <= tol * (abs(ll) + tol) and np.max(np.abs(score)) < 1e-6
    if not converged and np.max(np.abs(score)) > 1e-6:
        raise ConvergenceError(f"Cox fit did not converge in {max_iter} iterations", [ll])
    coef = np.zeros(p)
    coef[active] = beta
    cov = np.full((p, p), np.nan)
    se = np.full(p, np.nan)
    if active.any():
        inv = np.linalg.inv(info)
        cov[np.ix_(active, active)] = inv
        se[active] = np.sqrt(np.diag(inv))
    return CoxFit(names, coef, se, float(ll), int(e.sum()), len(a), True, it, cov, active, {"ties": "breslow"})


def schoenfeld_test(fit: CoxFit, records, covariates=(), start="t_start", stop="t_stop", event="event") -> pd.DataFrame:
    """Per-covariate proportional-hazards test against identity-transformed time.

    Scaled residuals ``d * r V`` are correlated with the event time; the
    statistic is chi-square with one degree of freedom. Constant covariates
    get a missing statistic and p-value.
    """
    a, b, e, X = _arrays(records, covariates, start, stop, event)
    d = int(e.sum())
    if d < 3:
        raise ValidationError(f"Schoenfeld test needs at least 3 events, got {d}")
    act = fit.active
    Xc = (X - X.mean(0))[:, act]
    rs = _RiskSets(a, b, e)
    _, _, _, xbar = _pieces(rs, Xc, fit.coef[act], need_info=False)
    resid = Xc[rs.ev_idx] - xbar[rs.ev_time]
    V = fit.cov[np.ix_(act, act)]
    scaled = d * resid @ V
    g = b[rs.ev_idx]
    gc = g - g.mean()
    denom = np.sum(gc**2)
    stat = np.full(len(fit.names), np.nan)
    if denom > 0:
        stat[act] = (gc @ scaled) ** 2 / (d * np.diag(V) * denom)
    pv = stats.chi2.sf(stat, 1)
    return pd.DataFrame({"covariate": fit.names, "statistic": stat, "p": pv})


@dataclass(frozen=True)
class EvalueReport:
    hr: float
    evalue_point: float
    evalue_ci: float | None = None


def evalue(hr: float, ci_bound: float | None = None) -> EvalueReport:
    """E-value for a hazard ratio treated as a risk ratio.

    ``ci_bound`` is the confidence limit nearer the null; if it lies on the
    other side of 1 from ``hr`` the interval crosses 1 and its E-value is 1.
    """

    def e_of(rr):
        rr = 1.0 / rr if rr < 1 else rr
        return rr + np.sqrt(rr * (rr - 1.0))

    if not hr > 0 or (ci_bound is not None and not ci_bound > 0):
        raise ValidationError("hazard ratios must be positive")
    point = float(e_of(hr))
    ci = None
    if ci_bound is not None:
        crosses = (hr < 1 <= ci_bound) or (hr > 1 >= ci_bound) or hr == 1
        ci = 1.0 if crosses else float(e_of(ci_bound))
    return EvalueReport(float(hr), point, ci)


def evalue_report(hr: float, ci_low: float, ci_high: float) -> EvalueReport:
    """E-values from an HR and both confidence limits."""
    if not 0 < ci_low <= ci_high:
        raise ValidationError("need 0 < ci_low <= ci_high")
    nearer = ci_high if hr < 1 else ci_low
    return evalue(hr, nearer)
