"""Piecewise-exponential additive model with a WCE term, naive or IPW-weighted.

Three designs share one column layout::

    intercept | f0(t) | f1(rest) | f2(t, rest) | gamma (WCE) | linear

``pamm`` uses f0, f1, f2 and linear terms; ``pamm_wce`` (default) uses f0,
the WCE block and linear terms; ``combined`` uses everything.  Smooth and
WCE blocks carry a ridge penalty, the intercept and linear terms do not.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .basis import SplineBasis, eval_basis, ridge_penalty, tensor_basis, uniform_basis
from .errors import ValidationError
from .glm import DEFAULT_ALPHA_GRID, POISSON, FitResult, GlmSpec, fit_glm, grouped_cv_alpha
from .ipw import WeightSet, effective_sample_size
from .survdata import make_cutpoints, ped_transform
from .wce import DEFAULT_LAG_BASES, DEFAULT_LAGS, WeightFunction, lag_basis, lag_history, lag_matrix

__all__ = [
    "DESIGNS",
    "DEFAULT_LINEAR",
    "ModelDesign",
    "MspemFit",
    "ComparisonResult",
    "build_design",
    "fit_mspem",
    "predict_eta",
    "hazard_surface",
    "attenuation",
    "compare",
    "comparison_table",
    "calibration_deciles",
    "aic_table",
]

DESIGNS = ("pamm", "pamm_wce", "combined")
DEFAULT_LINEAR = ("age", "bmi", "home", "recent_load_7d")
_BLOCKS = {
    "pamm": ("intercept", "f0", "f1", "f2", "linear"),
    "pamm_wce": ("intercept", "f0", "wce", "linear"),
    "combined": ("intercept", "f0", "f1", "f2", "wce", "linear"),
}
_PENALIZED = {"intercept": False, "f0": True, "f1": True, "f2": True, "wce": True, "linear": False}
_WCE_COLS_PREFIX = "z_wce_"


@dataclass
class ModelDesign:
    kind: str
    ped: pd.DataFrame
    X: np.ndarray
    names: list
    blocks: dict
    bases: dict
    linear: tuple
    cuts: np.ndarray
    L: int
    reference: dict

    @property
    def penalty(self):
        sizes = [self.blocks[b].stop - self.blocks[b].start for b in self.blocks]
        return ridge_penalty(sizes, [_PENALIZED[b] for b in self.blocks])

    @property
    def y(self) -> np.ndarray:
        return self.ped["event"].to_numpy(dtype=float)

    @property
    def offset(self) -> np.ndarray:
        return self.ped["offset"].to_numpy(dtype=float)

    @property
    def groups(self) -> np.ndarray:
        return self.ped["player_id"].to_numpy()

    def glm_spec(self, weights=None, alpha: float = 1.0) -> GlmSpec:
        return GlmSpec(POISSON, self.X, self.y, self.offset, weights, self.penalty, alpha, list(self.names))

    def broadcast(self, record_weights) -> np.ndarray:
        """Per-record (per-game) weights copied onto each PED row of that game."""
        w = np.asarray(record_weights, dtype=float)
        n_rec = int(self.ped["record"].max()) + 1
        if w.shape != (n_rec,):
            raise ValidationError(f"expected {n_rec} per-game weights, got shape {w.shape}")
        return w[self.ped["record"].to_numpy()]


def _wce_features(records: pd.DataFrame, basis: SplineBasis, L: int) -> np.ndarray:
    H = lag_history(records["minutes"], records["player_id"], records["t_stop"], L)
    return H @ lag_matrix(basis, L)


def _matrix(frame: pd.DataFrame, kind: str, bases: dict, linear, L: int) -> tuple[np.ndarray, list, dict]:
    cols, names, blocks, at = [], [], {}, 0

    def add(block, M, labels):
        nonlocal at
        cols.append(M)
        names.extend(labels)
        blocks[block] = slice(at, at + M.shape[1])
        at += M.shape[1]

    t = frame["t_mid"].to_numpy(dtype=float)
    for block in _BLOCKS[kind]:
        if block == "intercept":
            add(block, np.ones((len(frame), 1)), ["intercept"])
        elif block == "f0":
            add(block, eval_basis(bases["f0"], t), [f"f0_{k}" for k in range(bases["f0"].num_bases)])
        elif block == "f1":
            add(block, eval_basis(bases["f1"], frame["rest_days"]), [f"f1_{k}" for k in range(bases["f1"].num_bases)])
        elif block == "f2":
            bu, bv = bases["f2"]
            M = tensor_basis(bu, bv, t, frame["rest_days"].to_numpy(dtype=float))
            add(block, M, [f"f2_{a}_{b}" for a in range(bu.num_bases) for b in range(bv.num_bases)])
        elif block == "wce":
            K = bases["wce"].num_bases
            add(block, frame[[f"{_WCE_COLS_PREFIX}{k}" for k in range(K)]].to_numpy(dtype=float), [f"gamma_{k}" for k in range(K)])
        elif block == "linear" and linear:
            add(block, frame[list(linear)].to_numpy(dtype=float), list(linear))
    return np.column_stack(cols), names, blocks


def _reference(frame: pd.DataFrame, cols) -> dict:
    ref = {}
    for c in cols:
        v = frame[c].to_numpy(dtype=float)
        if np.all(np.isin(v, (0.0, 1.0))):
            ref[c] = float(pd.Series(v).mode().iloc[0])
        else:
            ref[c] = float(np.median(v))
    return ref


def build_design(
    records: pd.DataFrame,
    kind: str = "pamm_wce",
    cuts=None,
    J: int = 20,
    linear=DEFAULT_LINEAR,
    L: int = DEFAULT_LAGS,
    K: int = DEFAULT_LAG_BASES,
    f0_bases: int = 8,
    f1_bases: int = 6,
    f2_bases: tuple = (4, 4),
) -> ModelDesign:
    """Counting-process records (played games, ordered per player) to a PED design."""
    if kind not in DESIGNS:
        raise ValidationError(f"unknown design {kind!r}; choose from {DESIGNS}")
    linear = tuple(linear)
    need = ["player_id", "t_start", "t_stop", "event", "minutes", "rest_days", *linear]
    missing = [c for c in need if c not in records]
    if missing:
        raise ValidationError(f"records lack columns {missing}")
    records = records.reset_index(drop=True)
    if cuts is None:
        cuts = make_cutpoints(records["t_stop"], records["event"], J)
    cuts = np.asarray(cuts, dtype=float)

    bases = {"f0": uniform_basis(0.0, float(cuts[-1]), f0_bases)}
    r = records["rest_days"].to_numpy(dtype=float)
    r_lo, r_hi = float(r.min()), float(r.max())
    if r_hi <= r_lo:
        r_hi = r_lo + 1.0
    bases["f1"] = uniform_basis(r_lo, r_hi, f1_bases)
    bases["f2"] = (uniform_basis(0.0, float(cuts[-1]), f2_bases[0]), uniform_basis(r_lo, r_hi, f2_bases[1]))
    bases["wce"] = lag_basis(L, K)

    frame = records.copy()
    Z = _wce_features(records, bases["wce"], L)
    for k in range(Z.shape[1]):
        frame[f"{_WCE_COLS_PREFIX}{k}"] = Z[:, k]
    ped = ped_transform(frame, cuts)
    X, names, blocks = _matrix(ped, kind, bases, linear, L)
    ref_cols = ["rest_days", *linear, *[f"{_WCE_COLS_PREFIX}{k}" for k in range(Z.shape[1])]]
    reference = _reference(frame, dict.fromkeys(ref_cols))  # ordered, de-duplicated
    return ModelDesign(kind, ped, X, names, blocks, bases, linear, cuts, L, reference)


@dataclass
class MspemFit:
    design: ModelDesign
    fit: FitResult
    weight_function: WeightFunction | None
    alpha_source: str
    cv_table: pd.DataFrame | None = None
    weights: np.ndarray | None = None
    label: str = "naive"

    @property
    def w1(self) -> float:
        return float(self.weight_function([1.0])[0]) if self.weight_function is not None else float("nan")

    def eta(self) -> np.ndarray:
        return self.design.X @ self.fit.coef

    def to_dict(self) -> dict:
        d = self.fit.to_dict()
        d.update(
            design=self.design.kind,
            label=self.label,
            alpha_source=self.alpha_source,
            linear=list(self.design.linear),
            cuts=[float(c) for c in self.design.cuts],
            w1=None if self.weight_function is None else self.w1,
        )
        if self.cv_table is not None:
            d["cv"] = self.cv_table.to_dict(orient="records")
        return d


def _record_weights(design: ModelDesign, weights) -> np.ndarray | None:
    if weights is None:
        return None
    if isinstance(weights, WeightSet):
        weights = weights.weights
    return design.broadcast(weights)


def fit_mspem(
    design: ModelDesign,
    weights=None,
    alpha="cv",
    folds: int = 5,
    grid=DEFAULT_ALPHA_GRID,
    seed: int = 0,
    label: str | None = None,
) -> MspemFit:
    """Weighted penalized Poisson fit of the PED design.

    ``weights`` holds one value per game (record) or is a ``WeightSet`` over
    those games; each game's weight multiplies all of its PED rows.
    ``alpha`` is a number or ``"cv"`` for grouped cross-validation by player.
    """
    w = _record_weights(design, weights)
    cv_table = None
    if isinstance(alpha, str):
        if alpha != "cv":
            raise ValidationError(f"alpha must be a number or 'cv', got {alpha!r}")
        cv = grouped_cv_alpha(design.glm_spec(w), design.groups, folds=folds, grid=grid, seed=seed)
        alpha_val, source, cv_table = cv.alpha, "cv", cv.table
    else:
        alpha_val, source = float(alpha), "fixed"
    fit = fit_glm(design.glm_spec(w, alpha_val))
    wf = None
    if "wce" in design.blocks:
        wf = WeightFunction(fit.coef[design.blocks["wce"]], design.bases["wce"])
    if isinstance(weights, WeightSet):
        weights = weights.weights
    label = label or ("naive" if weights is None else "ipw")
    rec_w = None if weights is None else np.asarray(weights, dtype=float)
    return MspemFit(design, fit, wf, source, cv_table, rec_w, label)


def predict_eta(mfit: MspemFit, frame: pd.DataFrame) -> np.ndarray:
    """Linear predictor (log-hazard, no offset) for rows with ``t_mid``,
    ``rest_days``, the linear covariates and the WCE feature columns."""
    d = mfit.design
    frame = frame.copy()
    for c, v in d.reference.items():
        if c not in frame:
            frame[c] = v
    X, _, _ = _matrix(frame, d.kind, d.bases, d.linear, d.L)
    return X @ mfit.fit.coef


def hazard_surface(mfit: MspemFit, t_grid, rest_grid, reference: dict | None = None) -> tuple[pd.DataFrame, dict]:
    """Log-hazard over a cumulative-minutes x rest-days lattice.

    Other covariates sit at ``reference`` (defaults: medians for continuous
    columns, modes for 0/1 indicators).  Returns the grid and the reference
    vector used.  Points outside the fitted basis domains raise
    ``DomainError``.
    """
    ref = dict(mfit.design.reference)
    ref.update(reference or {})
    T, R = np.meshgrid(np.asarray(t_grid, float), np.asarray(rest_grid, float), indexing="ij")
    frame = pd.DataFrame({"t_mid": T.ravel(), "rest_days": R.ravel()})
    for c, v in ref.items():
        if c != "rest_days":
            frame[c] = v
    out = pd.DataFrame({"t": frame["t_mid"], "rest_days": frame["rest_days"], "log_hazard": predict_eta(mfit, frame)})
    return out, ref


def attenuation(w_naive: float, w_corrected: float) -> float:
    """Percent shrinkage of ``|w|`` at lag 1; NaN when the naive value is 0."""
    if w_naive == 0:
        return float("nan")
    return 100.0 * (1.0 - abs(w_corrected) / abs(w_naive))


@dataclass
class ComparisonResult:
    naive: MspemFit
    corrected: MspemFit
    attenuation_pct: float
    weight_table: pd.DataFrame
    fits: pd.DataFrame = field(default_factory=pd.DataFrame)


def compare(naive: MspemFit, corrected: MspemFit) -> ComparisonResult:
    if naive.design.names != corrected.design.names:
        raise ValidationError("fits use different designs")
    if naive.weight_function is None:
        raise ValidationError("design has no WCE block to compare")
    lags = np.arange(1, naive.design.L + 1)
    table = pd.DataFrame({"lag": lags, "naive_w": naive.weight_function(lags), "corrected_w": corrected.weight_function(lags)})
    return ComparisonResult(naive, corrected, attenuation(naive.w1, corrected.w1), table, aic_table({"naive": naive, "corrected": corrected}))


def comparison_table(naive: MspemFit, corrected: dict) -> pd.DataFrame:
    """One row per method: ``method, w1, attenuation_pct, ess, ess_pct``."""
    n_games = int(naive.design.ped["record"].max()) + 1
    rows = [{"method": "Naive", "w1": naive.w1, "attenuation_pct": float("nan"), "ess": float(n_games), "ess_pct": 100.0}]
    for name, f in corrected.items():
        ess = effective_sample_size(f.weights) if f.weights is not None else float(n_games)
        rows.append({"method": name, "w1": f.w1, "attenuation_pct": attenuation(naive.w1, f.w1), "ess": ess, "ess_pct": 100.0 * ess / n_games})
    return pd.DataFrame(rows)


def calibration_deciles(mfit: MspemFit, bins: int = 10) -> pd.DataFrame:
    """Predicted per-game event probability ``1 - exp(-sum_j mu_ij)`` against
    the observed event rate, by prediction decile.  Tied predictions collapse
    bins rather than erroring."""
    d = mfit.design
    mu = np.exp(d.offset + d.X @ mfit.fit.coef)
    rec = d.ped["record"].to_numpy()
    n_rec = int(rec.max()) + 1
    cum = np.bincount(rec, weights=mu, minlength=n_rec)
    obs = np.bincount(rec, weights=d.y, minlength=n_rec)
    pred = 1.0 - np.exp(-cum)
    if np.unique(pred).size == 1:
        q = np.zeros(n_rec, dtype=int)
    else:
        q = pd.qcut(pred, bins, labels=False, duplicates="drop")
    df = pd.DataFrame({"bin": q, "pred": pred, "obs": obs})
    out = df.groupby("bin").agg(n=("pred", "size"), mean_pred=("pred", "mean"), obs_rate=("obs", "mean")).reset_index()
    return out


def aic_table(fits: dict) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {"model": k, "design": f.design.kind, "alpha": f.fit.alpha, "loglik": f.fit.loglik, "edf": f.fit.edf, "aic": f.fit.aic}
            for k, f in fits.items()
        ]
    )
