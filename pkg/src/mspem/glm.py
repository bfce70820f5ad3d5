"""Weighted, offset-aware, ridge-penalized GLMs fitted by IRLS.

Two families are supported: Poisson with log link (the piecewise-exponential
likelihood) and binomial with logit link (the selection model).  The fitted
objective is

    sum_i w_i * loglik_i(beta) - (alpha / 2) * beta' S beta

where ``S`` is a positive semi-definite penalty matrix that is zero on
unpenalized (linear) coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.special import expit, gammaln

from .basis import PenaltyBlock
from .errors import ConvergenceError, SeparationError, SingularSystemError, ValidationError

__all__ = [
    "POISSON",
    "BINOMIAL",
    "DEFAULT_ALPHA_GRID",
    "GlmSpec",
    "FitResult",
    "CvResult",
    "fit_glm",
    "edf",
    "loglik",
    "penalized_loglik",
    "penalized_score",
    "deviance",
    "grouped_cv_alpha",
    "assign_folds",
]

POISSON = "poisson_log"
BINOMIAL = "binomial_logit"
DEFAULT_ALPHA_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0)

# |eta - offset| beyond this means coefficients are running off to infinity
_DIVERGENCE_ETA = 40.0


@dataclass
class GlmSpec:
    """Everything needed to fit one GLM.

    ``penalty`` may be a :class:`PenaltyBlock`, a square matrix or ``None``
    (no penalty).
    """

    family: str
    X: np.ndarray
    y: np.ndarray
    offset: np.ndarray | None = None
    weights: np.ndarray | None = None
    penalty: PenaltyBlock | np.ndarray | None = None
    alpha: float = 0.0
    names: Sequence[str] | None = None

    def __post_init__(self):
        if self.family not in (POISSON, BINOMIAL):
            raise ValidationError(f"unknown family {self.family!r}")
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        n, p = self.X.shape
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.y.size != n:
            raise ValidationError(f"X has {n} rows but y has {self.y.size}")
        if self.offset is None:
            self.offset = np.zeros(n)
        else:
            if self.family == BINOMIAL and np.any(np.asarray(self.offset) != 0):
                raise ValidationError("offsets are only supported for the poisson family")
            self.offset = np.broadcast_to(np.asarray(self.offset, dtype=float), (n,)).copy()
        if self.weights is None:
            self.weights = np.ones(n)
        else:
            self.weights = np.broadcast_to(np.asarray(self.weights, dtype=float), (n,)).copy()
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ValidationError("observation weights must be finite and non-negative")
        if self.alpha < 0:
            raise ValidationError("alpha must be non-negative")
        if self.family == BINOMIAL and np.any((self.y != 0) & (self.y != 1)):
            raise ValidationError("binomial response must be 0/1")
        if self.family == POISSON and np.any(self.y < 0):
            raise ValidationError("poisson response must be non-negative")
        if self.names is not None and len(self.names) != p:
            raise ValidationError(f"{len(self.names)} names for {p} columns")

    @property
    def S(self) -> np.ndarray:
        p = self.X.shape[1]
        if self.penalty is None:
            return np.zeros((p, p))
        S = self.penalty.matrix if isinstance(self.penalty, PenaltyBlock) else np.asarray(self.penalty, float)
        if S.shape != (p, p):
            raise ValidationError(f"penalty is {S.shape}, expected {(p, p)}")
        return S

    def subset(self, rows) -> "GlmSpec":
        return GlmSpec(
            self.family,
            self.X[rows],
            self.y[rows],
            self.offset[rows],
            self.weights[rows],
            self.penalty,
            self.alpha,
            self.names,
        )

    def with_alpha(self, alpha: float) -> "GlmSpec":
        return GlmSpec(self.family, self.X, self.y, self.offset, self.weights, self.penalty, alpha, self.names)


@dataclass
class FitResult:
    coef: np.ndarray
    converged: bool
    n_iter: int
    loglik: float
    penalized_loglik: float
    edf: float
    aic: float
    cov: np.ndarray = field(repr=False)
    trace: list = field(default_factory=list, repr=False)
    names: list | None = None
    alpha: float = 0.0
    family: str = POISSON
    meta: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    def coef_series(self) -> pd.Series:
        names = self.names or [f"x{i}" for i in range(self.coef.size)]
        return pd.Series(self.coef, index=names)

    def to_dict(self) -> dict:
        names = self.names or [f"x{i}" for i in range(self.coef.size)]
        return {
            "family": self.family,
            "alpha": self.alpha,
            "converged": self.converged,
            "iterations": self.n_iter,
            "loglik": self.loglik,
            "penalized_loglik": self.penalized_loglik,
            "edf": self.edf,
            "aic": self.aic,
            "coefficients": {n: float(c) for n, c in zip(names, self.coef)},
            "std_errors": {n: float(s) for n, s in zip(names, self.se)},
            **self.meta,
        }


def _mean(spec: GlmSpec, eta):
    if spec.family == POISSON:
        return np.exp(eta)
    return expit(eta)


def _loglik_eta(spec: GlmSpec, eta) -> float:
    w, y = spec.weights, spec.y
    if spec.family == POISSON:
        return float(np.sum(w * (y * eta - np.exp(eta) - gammaln(y + 1.0))))
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def loglik(spec: GlmSpec, beta) -> float:
    """Weighted, unpenalized log-likelihood."""
    return _loglik_eta(spec, spec.offset + spec.X @ np.asarray(beta, float))


def penalized_loglik(spec: GlmSpec, beta) -> float:
    beta = np.asarray(beta, float)
    return loglik(spec, beta) - 0.5 * spec.alpha * float(beta @ spec.S @ beta)


def penalized_score(spec: GlmSpec, beta) -> np.ndarray:
    """Gradient of :func:`penalized_loglik`."""
    beta = np.asarray(beta, float)
    mu = _mean(spec, spec.offset + spec.X @ beta)
    return spec.X.T @ (spec.weights * (spec.y - mu)) - spec.alpha * (spec.S @ beta)


def deviance(family: str, y, mu, weights=None) -> float:
    y = np.asarray(y, float)
    mu = np.asarray(mu, float)
    w = np.ones_like(y) if weights is None else np.asarray(weights, float)
    if family == POISSON:
        with np.errstate(divide="ignore", invalid="ignore"):
            term = np.where(y > 0, y * np.log(y / mu), 0.0)
        return float(2.0 * np.sum(w * (term - (y - mu))))
    mu = np.clip(mu, 1e-15, 1 - 1e-15)
    return float(-2.0 * np.sum(w * (y * np.log(mu) + (1 - y) * np.log1p(-mu))))


def _variance(spec: GlmSpec, mu):
    return mu if spec.family == POISSON else mu * (1.0 - mu)


def _solve(A, b):
    """Solve ``A x = b`` for symmetric PD ``A``; returns ``(x, A_inverse_fn)``.

    The matrix is Jacobi-equilibrated first so the singularity test is
    insensitive to column scaling.
    """
    diag = np.diag(A).copy()
    if np.any(~np.isfinite(diag)) or np.any(diag <= 0):
        raise SingularSystemError(
            "penalized information matrix is singular (an unpenalized column carries no "
            "information); try a larger alpha or drop the column"
        )
    D = np.sqrt(diag)
    As = A / np.outer(D, D)
    try:
        cf = linalg.cho_factor(As, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise SingularSystemError(
            "penalized information matrix is singular; try a larger alpha or drop collinear columns"
        ) from exc
    if np.min(np.abs(np.diag(cf[0]))) < 1e-7:
        raise SingularSystemError(
            "penalized information matrix is numerically singular; try a larger alpha"
        )
    x = linalg.cho_solve(cf, b / D) / D

    def inverse():
        return linalg.cho_solve(cf, np.eye(A.shape[0])) / np.outer(D, D)

    return x, inverse


def fit_glm(spec: GlmSpec, max_iter: int = 100, tol: float = 1e-9, start=None) -> FitResult:
    """Maximize the penalized (weighted) log-likelihood by IRLS.

    Each iteration solves ``(X'WX + alpha S) beta = X'Wz``; steps that lower
    the objective are halved until they do not.  Convergence is declared when
    the relative change in the penalized log-likelihood drops below ``tol``.

    Raises
    ------
    ConvergenceError
        No convergence within ``max_iter`` iterations (carries the trace).
    SingularSystemError
        The penalized information matrix is not positive definite.
    SeparationError
        The linear predictor diverges (perfect separation or an all-zero
        cell with a free coefficient).
    """
    X, w, off = spec.X, spec.weights, spec.offset
    S = spec.S
    aS = spec.alpha * S

    def objective(beta):
        return penalized_loglik(spec, beta)

    if start is None:
        # standard GLM start: move from a smoothed response, not from beta = 0
        ybar = np.average(spec.y, weights=w) if w.sum() > 0 else 0.5
        if spec.family == POISSON:
            mu0 = (spec.y + max(ybar, 1e-8)) / 2.0
            eta0 = np.log(mu0)
        else:
            mu0 = (spec.y + 0.5) / 2.0
            eta0 = np.log(mu0 / (1 - mu0))
        W0 = w * _variance(spec, mu0)
        beta, _ = _solve(X.T @ (W0[:, None] * X) + aS, X.T @ (W0 * (eta0 - off)))
    else:
        beta = np.asarray(start, float).copy()

    obj = objective(beta)
    trace = [obj]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = off + X @ beta
        mu = _mean(spec, eta)
        var = _variance(spec, mu)
        W = w * var
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(var > 0, eta - off + (spec.y - mu) / var, eta - off)
        A = X.T @ (W[:, None] * X) + aS
        new, _ = _solve(A, X.T @ (W * z))
        step = new - beta
        new_obj = objective(new)
        halvings = 0
        while not (new_obj >= obj - 1e-12 * abs(obj)) and halvings < 40:
            step *= 0.5
            new = beta + step
            new_obj = objective(new)
            halvings += 1
        if halvings == 40:
            # no ascent direction left at machine precision
            converged = True
            break
        if not np.isfinite(new_obj):
            raise ConvergenceError("objective became non-finite", trace)
        change = abs(new_obj - obj) / (abs(new_obj) + 0.1)
        beta, obj = new, new_obj
        trace.append(obj)
        if np.max(np.abs(X @ beta)) > _DIVERGENCE_ETA:
            raise SeparationError(
                "linear predictor diverging; the data are (quasi-)separated or a cell has no events"
            )
        if change < tol:
            converged = True
            break
    if not converged:
        raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations", trace)

    eta = off + X @ beta
    mu = _mean(spec, eta)
    W = w * _variance(spec, mu)
    info = X.T @ (W[:, None] * X)
    A = info + aS
    _, inverse = _solve(A, np.zeros(A.shape[0]))
    A_inv = inverse()
    edf_val = float(np.trace(A_inv @ info))
    ll = _loglik_eta(spec, eta)
    return FitResult(
        coef=beta,
        converged=True,
        n_iter=it,
        loglik=ll,
        penalized_loglik=obj,
        edf=edf_val,
        aic=-2.0 * ll + 2.0 * edf_val,
        cov=A_inv,
        trace=trace,
        names=list(spec.names) if spec.names is not None else None,
        alpha=float(spec.alpha),
        family=spec.family,
        meta={"aic_loglik": "unpenalized", "edf_definition": "trace((X'WX + alpha S)^-1 X'WX)"},
    )


def edf(spec: GlmSpec, fit: FitResult) -> float:
    """Effective degrees of freedom at the fitted coefficients."""
    eta = spec.offset + spec.X @ fit.coef
    W = spec.weights * _variance(spec, _mean(spec, eta))
    info = spec.X.T @ (W[:, None] * spec.X)
    return float(np.trace(np.linalg.solve(info + spec.alpha * spec.S, info)))


def assign_folds(groups, folds: int, seed: int = 0) -> np.ndarray:
    """Fold index per row, keeping every group inside a single fold."""
    groups = np.asarray(groups)
    uniq = pd.unique(groups)
    if uniq.size < folds:
        raise ValidationError(f"{uniq.size} groups cannot fill {folds} folds")
    order = np.random.default_rng(seed).permutation(uniq.size)
    fold_of_group = np.empty(uniq.size, dtype=int)
    for f, idx in enumerate(np.array_split(order, folds)):
        fold_of_group[idx] = f
    lookup = dict(zip(uniq.tolist(), fold_of_group.tolist()))
    return np.array([lookup[g] for g in groups.tolist()], dtype=int)


@dataclass
class CvResult:
    alpha: float
    table: pd.DataFrame
    fold_of_row: np.ndarray = field(repr=False)


def grouped_cv_alpha(
    spec: GlmSpec,
    groups,
    folds: int = 5,
    grid: Sequence[float] = DEFAULT_ALPHA_GRID,
    seed: int = 0,
    tie_rtol: float = 1e-9,
) -> CvResult:
    """Choose the ridge penalty by grouped K-fold cross-validation.

    Groups (players) are shuffled with ``seed`` and dealt into ``folds``
    folds.  For each alpha the held-out deviance per unit weight is averaged
    over folds; the minimizer wins and near-ties go to the larger alpha.
    """
    grid = sorted(float(a) for a in grid)
    if not grid:
        raise ValidationError("alpha grid is empty")
    fold_of_row = assign_folds(groups, folds, seed)
    rows = []
    for a in grid:
        devs = []
        for f in range(folds):
            test = fold_of_row == f
            fit = fit_glm(spec.subset(~test).with_alpha(a))
            held = spec.subset(test)
            mu = _mean(held, held.offset + held.X @ fit.coef)
            devs.append(deviance(spec.family, held.y, mu, held.weights) / held.weights.sum())
        rows.append({"alpha": a, "mean_deviance": float(np.mean(devs)), **{f"fold_{f}": d for f, d in enumerate(devs)}})
    table = pd.DataFrame(rows)
    best = table["mean_deviance"].min()
    ok = table["mean_deviance"] <= best + tie_rtol * abs(best)
    chosen = float(table.loc[ok, "alpha"].max())
    return CvResult(chosen, table, fold_of_row)
