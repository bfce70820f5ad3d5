"""Workload tiers: z-score, PCA, k-means with silhouette selection, labeling."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

from .errors import NumericalError, ValidationError
from .survdata import TIERS

__all__ = [
    "ClusteringError",
    "PcaResult",
    "KMeansResult",
    "KSelection",
    "TierAssignment",
    "zscore",
    "pca_reduce",
    "kmeans",
    "silhouette_score",
    "kmeans_silhouette",
    "label_tiers",
    "assign_tiers",
    "read_features",
]

MIN_GAMES = 10


class ClusteringError(NumericalError):
    pass


@dataclass
class PcaResult:
    scores: np.ndarray
    n_components: int
    explained_ratio: np.ndarray
    components: np.ndarray
    kept_columns: list

    @property
    def retained_variance(self) -> float:
        return float(self.explained_ratio[: self.n_components].sum())


def zscore(X, names=None) -> tuple[np.ndarray, list]:
    """Standardize columns; zero-variance columns are dropped with a warning."""
    X = np.asarray(X, dtype=float)
    names = list(range(X.shape[1])) if names is None else list(names)
    sd = X.std(0)
    keep = sd > 1e-12 * np.maximum(1.0, np.abs(X).max(0))
    if not keep.all():
        dropped = [n for n, k in zip(names, keep) if not k]
        warnings.warn(f"dropping zero-variance feature columns: {dropped}", stacklevel=2)
    Z = (X[:, keep] - X[:, keep].mean(0)) / sd[keep]
    return Z, [n for n, k in zip(names, keep) if k]


def pca_reduce(X, variance_target: float = 0.85, names=None, standardize: bool = True) -> PcaResult:
    """Smallest number of principal components reaching ``variance_target``."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValidationError("PCA needs at least 2 rows")
    if not 0 < variance_target <= 1:
        raise ValidationError("variance_target must lie in (0, 1]")
    if standardize:
        Z, kept = zscore(X, names)
    else:
        Z, kept = X - X.mean(0), list(range(X.shape[1])) if names is None else list(names)
    if Z.shape[1] == 0:
        raise ValidationError("no feature column has positive variance")
    _, s, Vt = np.linalg.svd(Z, full_matrices=False)
    var = s**2
    ratio = var / var.sum()
    # tolerance so that exactly-reached targets are not missed by rounding
    k = int(np.searchsorted(np.cumsum(ratio), variance_target - 1e-12) + 1)
    k = min(k, len(ratio))
    return PcaResult(Z @ Vt[:k].T, k, ratio, Vt[:k], kept)


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    trace: list


def _sqdist(X, C):
    return np.maximum((X**2).sum(1)[:, None] - 2 * X @ C.T + (C**2).sum(1)[None, :], 0.0)


def _plusplus(X, k, rng):
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = _sqdist(X, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            return None
        centers.append(X[rng.choice(n, p=d2 / total)])
        d2 = np.minimum(d2, _sqdist(X, centers[-1][None, :])[:, 0])
    return np.array(centers)


def _lloyd(X, C, max_iter, tol):
    trace = []
    for _ in range(max_iter):
        D = _sqdist(X, C)
        labels = D.argmin(1)
        trace.append(float(D[np.arange(len(X)), labels].sum()))
        counts = np.bincount(labels, minlength=len(C))
        if np.any(counts == 0):
            return None
        newC = np.vstack([X[labels == j].mean(0) for j in range(len(C))])
        shift = np.abs(newC - C).max()
        C = newC
        if shift <= tol:
            break
    D = _sqdist(X, C)
    labels = D.argmin(1)
    inertia = float(D[np.arange(len(X)), labels].sum())
    trace.append(inertia)
    if np.any(np.bincount(labels, minlength=len(C)) == 0):
        return None
    return KMeansResult(labels, C, inertia, trace)


def kmeans(X, k: int, seed=0, restarts: int = 10, max_iter: int = 300, tol: float = 1e-10) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeds; best of ``restarts`` by inertia.

    Raises ``ClusteringError`` if every restart ends with an empty cluster.
    """
    X = np.asarray(X, dtype=float)
    if k < 1 or len(X) < k:
        raise ValidationError(f"need at least k={k} rows, got {len(X)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        C = _plusplus(X, k, rng)
        if C is None:
            continue
        res = _lloyd(X, C, max_iter, tol)
        if res is not None and (best is None or res.inertia < best.inertia):
            best = res
    if best is None:
        raise ClusteringError(f"k-means with k={k} produced an empty cluster in every restart (duplicate rows?)")
    return best


def silhouette_score(X, labels) -> float:
    """Mean Euclidean silhouette; singleton clusters score 0."""
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    uniq, lab = np.unique(labels, return_inverse=True)
    if not 2 <= len(uniq) <= len(X) - 1:
        raise ValidationError("silhouette needs 2 <= clusters <= n - 1")
    D = cdist(X, X)
    counts = np.bincount(lab)
    sums = np.stack([D[:, lab == j].sum(1) for j in range(len(uniq))], axis=1)
    own = counts[lab]
    a = sums[np.arange(len(X)), lab] / np.maximum(own - 1, 1)
    mean_other = sums / counts[None, :]
    mean_other[np.arange(len(X)), lab] = np.inf
    b = mean_other.min(1)
    s = np.where(own > 1, (b - a) / np.maximum(np.maximum(a, b), 1e-300), 0.0)
    return float(s.mean())


@dataclass
class KSelection:
    chosen_k: int
    labels: np.ndarray
    table: pd.DataFrame
    fits: dict


def kmeans_silhouette(scores, k_range=range(3, 8), seed=0, restarts: int = 10) -> KSelection:
    """Fit each k and keep the silhouette maximizer (ties go to the smaller k)."""
    scores = np.asarray(scores, dtype=float)
    ks = sorted(int(k) for k in k_range)
    if not ks or ks[0] < 2:
        raise ValidationError("k_range must contain integers >= 2")
    if len(scores) < ks[-1] + 1:
        raise ValidationError(f"need more than {ks[-1]} rows for k up to {ks[-1]}, got {len(scores)}")
    ss = np.random.SeedSequence(seed).spawn(len(ks))
    rows, fits = [], {}
    for k, s in zip(ks, ss):
        res = kmeans(scores, k, np.random.default_rng(s), restarts)
        fits[k] = res
        rows.append({"k": k, "silhouette": silhouette_score(scores, res.labels), "inertia": res.inertia})
    table = pd.DataFrame(rows)
    best = table.silhouette.max()
    chosen = int(table.loc[table.silhouette >= best - 1e-12, "k"].min())
    return KSelection(chosen, fits[chosen].labels, table, fits)


def label_tiers(labels, features: pd.DataFrame, minutes_col="mean_minutes", usage_col="usage_rate") -> pd.Series:
    """Cluster -> tier name by descending centroid mean minutes.

    Ties break on centroid usage rate, then cluster size (both descending).
    Four clusters map onto the named tiers; other counts get ``Tier1..k``.
    """
    labels = np.asarray(labels)
    df = pd.DataFrame({"c": labels, "m": features[minutes_col].to_numpy(float)})
    df["u"] = features[usage_col].to_numpy(float) if usage_col in features else 0.0
    cent = df.groupby("c").agg(m=("m", "mean"), u=("u", "mean"), n=("m", "size"))
    order = cent.sort_values(["m", "u", "n"], ascending=False, kind="mergesort").index
    names = list(TIERS) if len(order) == len(TIERS) else [f"Tier{i + 1}" for i in range(len(order))]
    mapping = dict(zip(order, names))
    return pd.Series([mapping[c] for c in labels], index=features.index, name="tier")


@dataclass
class TierAssignment:
    tiers: pd.DataFrame
    chosen_k: int | None
    silhouette: pd.DataFrame
    pca: PcaResult | None

    def to_csv(self, path) -> None:
        self.tiers[["player_id", "tier"]].to_csv(path, index=False)


def read_features(path) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, comment="#", dtype={"player_id": str})
    except pd.errors.EmptyDataError:
        raise ValidationError(f"{path}: empty feature file") from None
    if df.empty:
        raise ValidationError(f"{path}: no data rows")
    for col in ("player_id", "games_played", "mean_minutes"):
        if col not in df:
            raise ValidationError(f"{path}: missing column {col!r}")
    return df


def assign_tiers(
    features: pd.DataFrame,
    k_range=range(3, 8),
    seed: int = 0,
    variance_target: float = 0.85,
    restarts: int = 10,
    min_games: int = MIN_GAMES,
    exclude=("player_id", "tier", "true_tier"),
) -> TierAssignment:
    """Full pipeline; players with fewer than ``min_games`` games are Reserve."""
    if features.empty:
        raise ValidationError("no players to cluster")
    eligible = features["games_played"].to_numpy() >= min_games
    out = features[["player_id"]].copy()
    out["cluster"] = -1
    out["tier"] = TIERS[-1]
    if not eligible.any():
        return TierAssignment(out, None, pd.DataFrame(columns=["k", "silhouette", "inertia"]), None)
    cols = [c for c in features.columns if c not in exclude and pd.api.types.is_numeric_dtype(features[c])]
    sub = features.loc[eligible]
    pca = pca_reduce(sub[cols].to_numpy(float), variance_target, names=cols)
    sel = kmeans_silhouette(pca.scores, k_range, seed, restarts)
    out.loc[eligible, "cluster"] = sel.labels
    out.loc[eligible, "tier"] = label_tiers(sel.labels, sub).to_numpy()
    return TierAssignment(out, sel.chosen_k, sel.table, pca)
