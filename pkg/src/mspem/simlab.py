"""Healthy-worker survivor simulation and Monte Carlo bias harness.

Per player ``i`` and opportunity ``t`` a latent fitness ``U`` follows a
stationary AR(1).  Participation, minutes and injury all load on ``U``, so
conditioning on played games ties observed workload to latent health.

Random streams: every replication ``r`` of a scenario draws from
``numpy.random.default_rng(SeedSequence(seed).spawn(R)[r])``, and every
panel pre-draws all of its uniforms and normals before the sequential pass.
Results therefore do not depend on worker count or execution order.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit

from .errors import ValidationError
from .glm import BINOMIAL, POISSON, GlmSpec, fit_glm
from .ipw import stabilized_weights
from .wce import lag_basis, lag_matrix, true_weight

__all__ = [
    "ESTIMATORS",
    "ScenarioSpec",
    "SimPanel",
    "BiasReport",
    "table3_scenarios",
    "load_scenarios",
    "save_scenarios",
    "simulate_panel",
    "apply_recurrent_feedback",
    "replication_seeds",
    "fit_replication",
    "run_scenarios",
    "panel_records",
]

ESTIMATORS = ("naive", "ipw_observed", "ipw_misspecified", "ipw_oracle")


@dataclass(frozen=True)
class ScenarioSpec:
    name: str = "Strong"
    N: int = 500
    T: int = 80
    rho: float = 0.95
    sigma_u: float = 0.3
    alpha_u: float = 2.0
    gamma_u: float = 3.0
    w_scale: float = 0.005
    w_rate: float = 0.2
    L: int = 10
    K: int = 5
    recurrent: bool = False
    injury_penalty: float = 1.0
    penalty_decay: float = 0.9
    replications: int = 50
    seed: int = 2024
    age_low: int = 20
    age_high: int = 36
    age_center: float = 28.0
    play_intercept: float = 1.5
    play_age: float = -0.03
    minutes_mean: float = 25.0
    minutes_sd: float = 5.0
    minutes_min: float = 10.0
    minutes_max: float = 40.0
    hazard_intercept: float = -3.5
    hazard_u: float = -1.0
    hazard_age: float = 0.03
    load_window: int = 7
    truncation: tuple = (1.0, 99.0)

    def __post_init__(self):
        if not 0 <= self.rho < 1:
            raise ValidationError(f"rho must lie in [0, 1), got {self.rho}")
        if not self.sigma_u > 0:
            raise ValidationError("sigma_u must be positive")
        if self.replications < 1:
            raise ValidationError("replications must be >= 1")
        if self.N < 1 or self.T < 2 or self.L < 1 or self.K < 1:
            raise ValidationError("N, T, L, K must be positive (T >= 2)")
        if self.age_high < self.age_low:
            raise ValidationError("age_high must be >= age_low")
        if not self.minutes_min <= self.minutes_max:
            raise ValidationError("minutes_min must not exceed minutes_max")
        if self.truncation is not None:
            object.__setattr__(self, "truncation", tuple(float(x) for x in self.truncation))

    def replace(self, **kw) -> "ScenarioSpec":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["truncation"] = None if self.truncation is None else list(self.truncation)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**d)


def table3_scenarios(**overrides) -> list[ScenarioSpec]:
    """The four selection-strength settings (None, Weak, Moderate, Strong)."""
    grid = [("None", 0.0, 0.0), ("Weak", 0.5, 1.0), ("Moderate", 1.0, 2.0), ("Strong", 2.0, 3.0)]
    return [ScenarioSpec(name=n, alpha_u=a, gamma_u=g, **overrides) for n, a, g in grid]


def load_scenarios(path) -> list[ScenarioSpec]:
    """JSON file holding one scenario object, a list, or ``{"scenarios": [...]}``."""
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"scenario file is not valid JSON: {exc}") from None
    if isinstance(raw, dict) and "scenarios" in raw:
        defaults = {k: v for k, v in raw.items() if k != "scenarios"}
        raw = [{**defaults, **s} for s in raw["scenarios"]]
    if isinstance(raw, dict):
        raw = [raw]
    if not isinstance(raw, list) or not all(isinstance(s, dict) for s in raw):
        raise ValidationError("scenario file must hold an object or a list of objects")
    try:
        return [ScenarioSpec.from_dict(s) for s in raw]
    except TypeError as exc:
        raise ValidationError(f"bad scenario: {exc}") from None


def save_scenarios(specs, path) -> None:
    with open(path, "w") as fh:
        json.dump({"scenarios": [s.to_dict() for s in specs]}, fh, indent=2)
        fh.write("\n")


@dataclass
class SimPanel:
    """``N x T`` arrays; ``U`` is the effective (post-penalty) fitness."""

    spec: ScenarioSpec
    age: np.ndarray
    U: np.ndarray
    A: np.ndarray
    minutes: np.ndarray
    wce_true: np.ndarray
    Y: np.ndarray
    p_play: np.ndarray
    penalty: np.ndarray
    draws: dict = field(repr=False, default_factory=dict)

    @property
    def event_rate(self) -> float:
        """Injuries per played opportunity."""
        return float(self.Y.sum() / max(self.A.sum(), 1))

    def lag_histories(self) -> np.ndarray:
        """``N x T x L`` minutes at lags 1..L over all opportunities (rested = 0)."""
        return _histories(self.minutes, self.spec.L)


def _histories(m: np.ndarray, L: int) -> np.ndarray:
    N, T = m.shape
    padded = np.concatenate([np.zeros((N, L)), m], axis=1)
    return np.stack([padded[:, L - l : L - l + T] for l in range(1, L + 1)], axis=-1)


def _draw(spec: ScenarioSpec, rng: np.random.Generator) -> dict:
    N, T = spec.N, spec.T
    return {
        "age": rng.integers(spec.age_low, spec.age_high + 1, N).astype(float),
        "u0": rng.normal(0.0, spec.sigma_u / np.sqrt(1 - spec.rho**2), N),
        "eps": rng.normal(0.0, spec.sigma_u, (N, T - 1)),
        "play": rng.random((N, T)),
        "minutes": rng.normal(size=(N, T)),
        "injury": rng.random((N, T)),
    }


def _generate(spec: ScenarioSpec, draws: dict, penalty_scale: float, forced=None) -> SimPanel:
    N, T, L = spec.N, spec.T, spec.L
    age_c = draws["age"] - spec.age_center
    latent = np.empty((N, T))
    latent[:, 0] = draws["u0"]
    for t in range(1, T):
        latent[:, t] = spec.rho * latent[:, t - 1] + draws["eps"][:, t - 1]
    w = true_weight(np.arange(1, L + 1), spec.w_scale, spec.w_rate)
    U = np.empty((N, T))
    A = np.zeros((N, T), dtype=bool)
    m = np.zeros((N, T))
    wce = np.zeros((N, T))
    Y = np.zeros((N, T), dtype=bool)
    pA = np.empty((N, T))
    pen = np.zeros((N, T))
    forced = np.zeros((N, T), dtype=bool) if forced is None else np.asarray(forced, dtype=bool)
    for t in range(T):
        if t > 0:
            pen[:, t] = spec.penalty_decay * (pen[:, t - 1] + penalty_scale * Y[:, t - 1])
        U[:, t] = latent[:, t] - pen[:, t]
        pA[:, t] = expit(spec.play_intercept + spec.alpha_u * U[:, t] + spec.play_age * age_c)
        A[:, t] = draws["play"][:, t] < pA[:, t]
        mins = np.clip(spec.minutes_mean + spec.gamma_u * U[:, t] + spec.minutes_sd * draws["minutes"][:, t], spec.minutes_min, spec.minutes_max)
        m[:, t] = np.where(A[:, t], mins, 0.0)
        k = min(t, L)
        if k:
            wce[:, t] = m[:, t - k : t][:, ::-1] @ w[:k]
        pY = expit(spec.hazard_intercept + spec.hazard_u * U[:, t] + spec.hazard_age * age_c + wce[:, t])
        Y[:, t] = (A[:, t] & (draws["injury"][:, t] < pY)) | forced[:, t]
    return SimPanel(spec, draws["age"], U, A, m, wce, Y, pA, pen, draws)


def simulate_panel(spec: ScenarioSpec, seed=None, forced_injuries=None) -> SimPanel:
    """One panel.  ``seed`` may be an int, a ``SeedSequence`` or a Generator;
    it defaults to ``spec.seed``.  ``forced_injuries`` (``N x T`` bool) sets
    ``Y = 1`` regardless of the draw, for paired what-if comparisons."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(spec.seed if seed is None else seed)
    draws = _draw(spec, rng)
    scale = spec.injury_penalty if spec.recurrent else 0.0
    return _generate(spec, draws, scale, forced_injuries)


def apply_recurrent_feedback(panel: SimPanel, spec: ScenarioSpec | None = None, forced_injuries=None) -> SimPanel:
    """Regenerate ``panel`` from its own draws with injury feedback on ``U``.

    Each injury at ``s`` lowers ``U_t`` for ``t > s`` by
    ``injury_penalty * penalty_decay ** (t - s)``; the penalty enters the
    sequential pass, so later participation, minutes and hazard all see it.
    """
    spec = panel.spec if spec is None else spec
    if not spec.recurrent:
        raise ValidationError("scenario is not recurrent")
    return _generate(spec, panel.draws, spec.injury_penalty, forced_injuries)


def replication_seeds(spec: ScenarioSpec) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(spec.seed).spawn(spec.replications)


def _stabilized(A, p, truncation):
    return stabilized_weights(p[A], A.mean(), truncation).weights


def _propensity(A: np.ndarray, cols: list) -> np.ndarray:
    X = np.column_stack([np.ones(A.size)] + [c.ravel() for c in cols])
    fit = fit_glm(GlmSpec(BINOMIAL, X, A.ravel().astype(float)))
    return expit(X @ fit.coef).reshape(A.shape)


def fit_replication(panel: SimPanel, estimators=ESTIMATORS) -> dict:
    """Per estimator, the fitted weight function at lags 1..L and the age coefficient.

    Outcome model: unit-exposure Poisson on played opportunities with design
    ``[1, age - center, Z]`` where ``Z`` are the B-spline WCE features built
    from all opportunities (rested ones contribute zero minutes).
    """
    unknown = set(estimators) - set(ESTIMATORS)
    if unknown:
        raise ValidationError(f"unknown estimators {sorted(unknown)}; choose from {ESTIMATORS}")
    spec = panel.spec
    A = panel.A
    if A.sum() == 0 or panel.Y.sum() == 0:
        raise ValidationError("panel has no played opportunities or no events")
    B = lag_matrix(lag_basis(spec.L, spec.K), spec.L)
    H = panel.lag_histories()
    age_c = np.broadcast_to((panel.age - spec.age_center)[:, None], A.shape)
    X = np.column_stack([np.ones(A.sum()), age_c[A], (H @ B)[A]])
    y = panel.Y[A].astype(float)
    load = H[:, :, : spec.load_window].sum(-1)

    out = {}
    for est in estimators:
        if est == "naive":
            w = None
        elif est == "ipw_observed":
            w = _stabilized(A, _propensity(A, [age_c, load]), spec.truncation)
        elif est == "ipw_misspecified":
            w = _stabilized(A, _propensity(A, [age_c]), spec.truncation)
        else:
            w = _stabilized(A, panel.p_play, spec.truncation)
        fit = fit_glm(GlmSpec(POISSON, X, y, weights=w))
        out[est] = {"w": B @ fit.coef[2:], "age": float(fit.coef[1])}
    return out


def _one(args):
    spec, ss, estimators = args
    panel = simulate_panel(spec, ss)
    res = fit_replication(panel, estimators)
    return panel.event_rate, res


@dataclass
class BiasReport:
    """Monte Carlo summaries.

    ``replicates``: one row per scenario x replication x estimator with the
    lag-wise estimates.  ``table``: one bias row per scenario.  ``curves``: mean
    estimated weight per lag.
    """

    replicates: pd.DataFrame
    event_rates: pd.DataFrame
    seeds: pd.DataFrame
    specs: list

    def _wcols(self):
        return [c for c in self.replicates.columns if c.startswith("w_")]

    def estimator_summary(self) -> pd.DataFrame:
        rows = []
        for (scen, est), g in self.replicates.groupby(["scenario", "estimator"], sort=False):
            spec = next(s for s in self.specs if s.name == scen)
            wt = true_weight(np.arange(1, spec.L + 1), spec.w_scale, spec.w_rate)
            W = g[self._wcols()].to_numpy()
            rows.append(
                {
                    "scenario": scen,
                    "estimator": est,
                    "bias": float((W - wt).mean()),
                    "mc_se": float((W - wt).mean(1).std(ddof=1) / np.sqrt(len(W))) if len(W) > 1 else float("nan"),
                    "w1": float(W[:, 0].mean()),
                    "frac_w1_negative": float((W[:, 0] < 0).mean()),
                    "age_coef": float(g["age_coef"].mean()),
                    "age_bias": float(g["age_coef"].mean() - spec.hazard_age),
                    "replications": len(W),
                }
            )
        return pd.DataFrame(rows)

    def bias(self, scenario: str, estimator: str) -> float:
        s = self.estimator_summary()
        return float(s.loc[(s.scenario == scenario) & (s.estimator == estimator), "bias"].iloc[0])

    def table(self) -> pd.DataFrame:
        """Scenario, alpha_u, gamma_u, naive_bias, ipw_bias, event_rate_pct."""
        s = self.estimator_summary().set_index(["scenario", "estimator"])["bias"]
        rows = []
        for spec in self.specs:
            er = self.event_rates.loc[self.event_rates.scenario == spec.name, "event_rate"].mean()
            rows.append(
                {
                    "scenario": spec.name,
                    "alpha_u": spec.alpha_u,
                    "gamma_u": spec.gamma_u,
                    "naive_bias": s.get((spec.name, "naive"), np.nan),
                    "ipw_bias": s.get((spec.name, "ipw_observed"), np.nan),
                    "event_rate_pct": 100.0 * er,
                }
            )
        return pd.DataFrame(rows)

    def curves(self) -> pd.DataFrame:
        wc = self._wcols()
        long = self.replicates.melt(id_vars=["scenario", "estimator"], value_vars=wc, var_name="lag", value_name="w_hat")
        long["lag"] = long["lag"].str[2:].astype(int)
        out = long.groupby(["scenario", "estimator", "lag"], sort=False)["w_hat"].mean().reset_index()
        truth = {s.name: s for s in self.specs}
        out["w_true"] = [true_weight(l, truth[s].w_scale, truth[s].w_rate) for s, l in zip(out.scenario, out.lag)]
        return out


def run_scenarios(specs, estimators=ESTIMATORS, workers: int = 1) -> BiasReport:
    """Simulate and fit every replication of every scenario."""
    specs = list(specs)
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValidationError("scenario names must be unique")
    estimators = tuple(estimators)
    if not estimators or set(estimators) - set(ESTIMATORS):
        raise ValidationError(f"estimators must be drawn from {ESTIMATORS}")
    rows, rates, seeds = [], [], []
    for spec in specs:
        ss = replication_seeds(spec)
        jobs = [(spec, s, estimators) for s in ss]
        if workers > 1:
            with ProcessPoolExecutor(workers) as ex:
                results = list(ex.map(_one, jobs))
        else:
            results = [_one(j) for j in jobs]
        for r, (rate, res) in enumerate(results):
            rates.append({"scenario": spec.name, "replication": r, "event_rate": rate})
            seeds.append({"scenario": spec.name, "replication": r, "root_seed": spec.seed, "spawn_key": r, "entropy": str(ss[r].entropy)})
            for est in estimators:
                row = {"scenario": spec.name, "replication": r, "estimator": est, "age_coef": res[est]["age"]}
                row.update({f"w_{l + 1}": v for l, v in enumerate(res[est]["w"])})
                rows.append(row)
    return BiasReport(pd.DataFrame(rows), pd.DataFrame(rates), pd.DataFrame(seeds), specs)


def panel_records(panel: SimPanel) -> pd.DataFrame:
    """Played opportunities as counting-process records on the cumulative-minutes clock."""
    N, T = panel.A.shape
    pid = np.repeat(np.arange(N), T).reshape(N, T)
    cum = np.cumsum(panel.minutes, axis=1)
    A = panel.A
    return pd.DataFrame(
        {
            "player_id": pid[A],
            "opportunity": np.tile(np.arange(T), (N, 1))[A],
            "t_start": (cum - panel.minutes)[A],
            "t_stop": cum[A],
            "event": panel.Y[A].astype(int),
            "minutes": panel.minutes[A],
            "rest_days": np.ones(A.sum()),
            "age": np.broadcast_to(panel.age[:, None], A.shape)[A],
        }
    )
