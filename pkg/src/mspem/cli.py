"""Command-line entry point: ``mspem {simulate,fit,diagnose,cluster}``.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure.
Every CSV starts with ``#`` comment lines carrying the package version, the
seed and a hash of the resolved configuration; JSON outputs carry the same
under ``"_meta"``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from importlib.resources import files
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .cluster import assign_tiers, read_features
from .cox import cox_fit, evalue_report, evalue, schoenfeld_test
from .errors import NumericalError, ValidationError
from .ipw import (
    SELECTION_COVARIATES,
    arm_weights,
    balance_report,
    fit_selection,
    overlap_weights,
    selection_frame,
    stabilized_weights,
)
from .model import (
    DESIGNS,
    aic_table,
    build_design,
    calibration_deciles,
    comparison_table,
    fit_mspem,
    hazard_surface,
)
from .simlab import ESTIMATORS, load_scenarios, run_scenarios
from .survdata import GAP_TYPES, SEASON_PHASES, TIERS, km_fit, km_frame, read_games, to_counting_process

OUT_ENV = "MSPEM_OUT"
_FLOAT = "%.10g"

# option defaults, applied after the config file so that flags > file > defaults
_DEFAULTS = {
    "seed": 0,
    "alpha": "cv",
    "weights": "none",
    "truncate": "1,99",
    "design": "pamm_wce",
    "J": 20,
    "L": 10,
    "K": 5,
    "k_range": "3..7",
    "replications": None,
    "workers": 1,
    "estimators": ",".join(ESTIMATORS),
    "surface_points": 25,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./mspem_out)")
    common.add_argument("--seed", type=int, help="root seed (default 0)")
    common.add_argument("--config", help="JSON file whose keys mirror the long flags; flags win")

    p = _Parser(prog="mspem", description="Selection-corrected workload/injury models.")
    p.add_argument("--version", action="version", version=f"mspem {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="Monte Carlo bias study")
    s.add_argument("--scenario", help="scenario JSON (default: bundled four-scenario file)")
    s.add_argument("--replications", type=int, help="override replications for every scenario")
    s.add_argument("--workers", type=int, help="worker processes (default 1)")
    s.add_argument("--estimators", help=f"comma list from {','.join(ESTIMATORS)}")

    f = sub.add_parser("fit", parents=[common], help="naive and IPW-weighted PED fits")
    f.add_argument("--input", help="game-log CSV")
    f.add_argument("--roster", help="extra game-log rows (typically missed games) for the selection model")
    f.add_argument("--alpha", help="cv or fixed:X")
    f.add_argument("--weights", help="comma list of none|stabilized|overlap|external:PATH")
    f.add_argument("--truncate", help="P1,P99 percentiles or 'none'")
    f.add_argument("--design", choices=DESIGNS)
    f.add_argument("--J", type=int, help="number of baseline intervals")
    f.add_argument("--L", type=int, help="WCE lags")
    f.add_argument("--K", type=int, help="WCE basis size")
    f.add_argument("--surface-points", dest="surface_points", type=int, help="grid points along the minutes axis")

    d = sub.add_parser("diagnose", parents=[common], help="Cox table, Schoenfeld tests, E-values, calibration, KM")
    d.add_argument("--input", help="game-log CSV")
    d.add_argument("--evalues", help="CSV with hr (and optional covariate, ci_low, ci_high) columns")
    d.add_argument("--alpha", help="cv or fixed:X for the calibration fit")
    d.add_argument("--J", type=int)
    d.add_argument("--L", type=int)
    d.add_argument("--K", type=int)

    c = sub.add_parser("cluster", parents=[common], help="workload tiers from per-player features")
    c.add_argument("--input", help="per-player feature CSV")
    c.add_argument("--k-range", dest="k_range", help="inclusive range like 3..7")
    return p


def _resolve(args: argparse.Namespace) -> dict:
    cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ValidationError(f"config file not found: {path}")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise ValidationError("config file must hold a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    known = set(vars(args))
    unknown = set(cfg) - known - {"command"}
    if unknown:
        raise ValidationError(f"unknown config keys for '{args.command}': {sorted(unknown)}")
    out = {}
    for key, val in vars(args).items():
        if key == "config":
            continue
        if val is None:
            val = cfg.get(key, _DEFAULTS.get(key))
        out[key] = val
    out["seed_explicit"] = args.seed is not None or "seed" in cfg
    if out.get("out") is None:
        out["out"] = os.environ.get(OUT_ENV, "mspem_out")
    return out


def _config_hash(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k != "out"}
    return hashlib.sha256(json.dumps(body, sort_keys=True, default=str).encode()).hexdigest()[:16]


class _Writer:
    def __init__(self, cfg: dict):
        self.dir = Path(cfg["out"])
        self.dir.mkdir(parents=True, exist_ok=True)
        self.meta = {"version": __version__, "command": cfg["command"], "seed": cfg["seed"], "config_hash": _config_hash(cfg)}
        self.written = []

    def csv(self, name: str, df: pd.DataFrame, extra: dict | None = None) -> None:
        meta = {**self.meta, **(extra or {})}
        path = self.dir / name
        with open(path, "w", newline="") as fh:
            fh.write(f"# mspem {meta.pop('version')}\n")
            for k, v in meta.items():
                fh.write(f"# {k}: {v}\n")
            df.to_csv(fh, index=False, float_format=_FLOAT, lineterminator="\n")
        self.written.append(path)

    def json(self, name: str, obj: dict) -> None:
        path = self.dir / name
        with open(path, "w") as fh:
            json.dump({"_meta": self.meta, **obj}, fh, indent=2, sort_keys=False, default=_jsonable)
            fh.write("\n")
        self.written.append(path)


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _need_file(path, what):
    if not path:
        raise ValidationError(f"--{what} is required")
    if not Path(path).is_file():
        raise ValidationError(f"{what} file not found: {path}")
    return Path(path)


def _alpha(spec):
    spec = str(spec)
    if spec == "cv":
        return "cv"
    if spec.startswith("fixed:"):
        try:
            a = float(spec[6:])
        except ValueError:
            raise ValidationError(f"bad alpha {spec!r}; use cv or fixed:X") from None
        if not a > 0:
            raise ValidationError("fixed alpha must be positive")
        return a
    raise ValidationError(f"bad alpha {spec!r}; use cv or fixed:X")


def _truncation(spec):
    if spec is None or str(spec).lower() == "none":
        return None
    try:
        lo, hi = (float(x) for x in str(spec).split(","))
    except ValueError:
        raise ValidationError(f"bad truncation {spec!r}; use P1,P99 or none") from None
    if not 0 <= lo < hi <= 100:
        raise ValidationError("truncation percentiles must satisfy 0 <= P1 < P99 <= 100")
    return (lo, hi)


def _k_range(spec):
    try:
        lo, hi = (int(x) for x in str(spec).split(".."))
    except ValueError:
        raise ValidationError(f"bad k range {spec!r}; use e.g. 3..7") from None
    if not 2 <= lo <= hi:
        raise ValidationError("k range must satisfy 2 <= low <= high")
    return range(lo, hi + 1)


def _schemes(spec):
    out = []
    for part in str(spec).split(","):
        part = part.strip()
        if part in ("none", ""):
            continue
        if part in ("stabilized", "overlap"):
            out.append((part, None))
        elif part.startswith("external:"):
            out.append(("external", _need_file(part[9:], "external propensity")))
        else:
            raise ValidationError(f"unknown weight scheme {part!r}")
    return out


# ---------------------------------------------------------------- simulate


def cmd_simulate(cfg: dict) -> list:
    path = cfg.get("scenario") or files("mspem") / "data" / "table3.json"
    if cfg.get("scenario"):
        _need_file(path, "scenario")
    specs = load_scenarios(path)
    over = {}
    if cfg.get("replications") is not None:
        over["replications"] = int(cfg["replications"])
    if cfg.get("seed_explicit"):
        over["seed"] = int(cfg["seed"])
    specs = [s.replace(**over) if over else s for s in specs]
    estimators = tuple(e.strip() for e in str(cfg["estimators"]).split(",") if e.strip())
    rep = run_scenarios(specs, estimators, workers=int(cfg.get("workers") or 1))
    w = _Writer(cfg)
    # without --seed each scenario keeps its own root seed; report those
    w.meta["seed"] = ",".join(dict.fromkeys(str(s.seed) for s in specs))
    w.csv("bias_table.csv", rep.table())
    w.csv("estimators.csv", rep.estimator_summary())
    w.csv("weight_functions.csv", rep.curves())
    w.csv("seeds.csv", rep.seeds)
    return w.written


# ---------------------------------------------------------------- fit


def _selection_rows(games: pd.DataFrame, roster: pd.DataFrame | None) -> pd.DataFrame:
    rows = games
    if roster is not None:
        key = ["player_id", "game_date"]
        extra = roster.merge(games[key], on=key, how="left", indicator=True)
        extra = extra.loc[extra["_merge"] == "left_only"].drop(columns="_merge")
        rows = pd.concat([games, extra], ignore_index=True)
    rows = selection_frame(rows).sort_values(["player_id", "game_date"], kind="mergesort").reset_index(drop=True)
    return rows


def _played_index(sel: pd.DataFrame, records: pd.DataFrame) -> np.ndarray:
    """Row in ``sel`` for each counting-process record."""
    idx = pd.MultiIndex.from_frame(sel[["player_id", "game_date"]])
    pos = idx.get_indexer(pd.MultiIndex.from_frame(records[["player_id", "game_date"]]))
    if np.any(pos < 0):
        raise ValidationError("some played games are missing from the selection rows")
    return pos


def _external_pi(path: Path, sel: pd.DataFrame) -> np.ndarray:
    ext = pd.read_csv(path, comment="#", dtype={"player_id": str})
    need = {"player_id", "game_date", "pi_hat"}
    if not need <= set(ext.columns):
        raise ValidationError(f"{path}: external propensities need columns {sorted(need)}")
    ext["game_date"] = pd.to_datetime(ext["game_date"], format="ISO8601", errors="coerce")
    merged = sel[["player_id", "game_date"]].merge(ext[["player_id", "game_date", "pi_hat"]], how="left", on=["player_id", "game_date"])
    return merged["pi_hat"].to_numpy(dtype=float)


def cmd_fit(cfg: dict) -> list:
    games = read_games(_need_file(cfg.get("input"), "input"))
    roster = read_games(_need_file(cfg["roster"], "roster")) if cfg.get("roster") else None
    alpha = _alpha(cfg["alpha"])
    trunc = _truncation(cfg["truncate"])
    schemes = _schemes(cfg["weights"])
    records = to_counting_process(games)
    design = build_design(records, cfg["design"], J=int(cfg["J"]), L=int(cfg["L"]), K=int(cfg["K"]))
    seed = int(cfg["seed"])
    naive = fit_mspem(design, alpha=alpha, seed=seed, label="naive")
    alpha_used = naive.fit.alpha

    w = _Writer(cfg)
    fits, corrected, balance, weight_meta = {"naive": naive}, {}, [], {}
    sel = sel_fit = None
    if schemes:
        sel = _selection_rows(games, roster)
        pos = _played_index(sel, records)
        sel_fit = fit_selection(sel)
    for scheme, path in schemes:
        A = sel["A"].to_numpy()
        if scheme == "external":
            pi = _external_pi(path, sel)
            label = f"IPW-External({path.stem})"
            if np.isnan(pi[pos]).any():
                raise ValidationError(f"{path}: missing pi_hat for some played games")
        else:
            pi = sel_fit.pi_hat
            label = "Overlap" if scheme == "overlap" else "IPW-Logistic"
        if scheme == "overlap":
            ws = overlap_weights(pi[pos], np.ones(len(pos)))
        else:
            ws = stabilized_weights(pi[pos], sel_fit.pi_bar, trunc, row_ids=pos + 1)
        # same alpha as the naive fit so the two weight functions are comparable
        f = fit_mspem(design, weights=ws, alpha=alpha_used, label=label)
        f.alpha_source = naive.alpha_source
        fits[label] = corrected[label] = f
        weight_meta[label] = ws.summary()
        if not np.isnan(pi).any():
            bw = arm_weights(pi, A, "overlap" if scheme == "overlap" else "stabilized", sel_fit.pi_bar, trunc)
            rep = balance_report(sel, bw, SELECTION_COVARIATES)
            balance.append(rep.table.assign(scheme=label))

    lags = np.arange(1, design.L + 1)
    if naive.weight_function is not None:
        wf = pd.DataFrame({"lag": lags, "naive_w": naive.weight_function(lags)})
        for i, (label, f) in enumerate(corrected.items()):
            wf["corrected_w" if i == 0 else f"{label}_w"] = f.weight_function(lags)
        w.csv("weight_function.csv", wf, {"corrected": next(iter(corrected), "none")})
        w.csv("comparison.csv", comparison_table(naive, corrected), {"alpha": alpha_used})

    t_grid = np.linspace(0.0, float(design.cuts[-1]), int(cfg["surface_points"]))
    r_lo, r_hi = design.bases["f1"].domain
    r_grid = np.arange(np.ceil(r_lo), np.floor(r_hi) + 1)
    for label, f in fits.items():
        surf, ref = hazard_surface(f, t_grid, r_grid)
        name = "surface_naive.csv" if label == "naive" else f"surface_{_slug(label)}.csv"
        w.csv(name, surf, {"reference": json.dumps(ref, sort_keys=True)})
    if balance:
        cols = ["scheme", "covariate", "mean_played", "mean_rested", "smd_before", "smd_after", "flag"]
        w.csv("balance.csv", pd.concat(balance, ignore_index=True)[cols], {"rested_arm_weighted": True})
    w.csv("aic.csv", aic_table(fits))

    bundle = {
        "design": design.kind,
        "alpha": {"mode": "cv" if alpha == "cv" else "fixed", "value": alpha_used},
        "truncation": None if trunc is None else list(trunc),
        "n_games": len(records),
        "n_events": int(records["event"].sum()),
        "fits": {k: f.to_dict() for k, f in fits.items()},
        "weights": weight_meta,
    }
    if sel_fit is not None:
        bundle["selection"] = {
            "pi_bar": sel_fit.pi_bar,
            "odds_ratios": sel_fit.odds_ratios().to_dict(),
            "n_rows": len(sel),
        }
    w.json("fit.json", bundle)
    return w.written


def _slug(label: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in label).strip("_").lower()


# ---------------------------------------------------------------- diagnose


def _cox_covariates(records: pd.DataFrame) -> tuple[pd.DataFrame, list]:
    rec = records.copy()
    names = ["age", "bmi", "home", "recent_load_7d", "consecutive_games"]
    for g in GAP_TYPES[1:]:
        rec[f"gap_{g}"] = (rec["gap_type"] == g).astype(float)
        names.append(f"gap_{g}")
    if "tier" in rec and rec["tier"].notna().any():
        for t in TIERS[:-1]:
            rec[f"tier_{t}"] = (rec["tier"] == t).astype(float)
            names.append(f"tier_{t}")
    for ph in SEASON_PHASES[1:]:
        rec[f"phase_{ph}"] = (rec["season_phase"] == ph).astype(float)
        names.append(f"phase_{ph}")
    return rec, names


def _evalue_table(df: pd.DataFrame) -> pd.DataFrame:
    rows = []
    for i, r in df.reset_index(drop=True).iterrows():
        hr = float(r["hr"])
        if "ci_low" in df and "ci_high" in df and pd.notna(r["ci_low"]) and pd.notna(r["ci_high"]):
            e = evalue_report(hr, float(r["ci_low"]), float(r["ci_high"]))
        else:
            e = evalue(hr)
        rows.append(
            {
                "covariate": r["covariate"] if "covariate" in df else f"row{i + 1}",
                "hr": hr,
                "evalue_point": e.evalue_point,
                "evalue_ci": e.evalue_ci,
            }
        )
    return pd.DataFrame(rows, columns=["covariate", "hr", "evalue_point", "evalue_ci"])


def cmd_diagnose(cfg: dict) -> list:
    if not cfg.get("input") and not cfg.get("evalues"):
        raise ValidationError("diagnose needs --input and/or --evalues")
    w = _Writer(cfg)
    if cfg.get("evalues"):
        ev = pd.read_csv(_need_file(cfg["evalues"], "evalues"), comment="#")
        if "hr" not in ev:
            raise ValidationError("evalues file needs an 'hr' column")
        w.csv("evalues.csv", _evalue_table(ev))
    if not cfg.get("input"):
        return w.written
    games = read_games(_need_file(cfg["input"], "input"))
    records = to_counting_process(games)
    rec, names = _cox_covariates(records)
    fit = cox_fit(rec, names)
    tab = fit.table()
    w.csv("cox_table.csv", tab[["covariate", "hr", "ci_low", "ci_high", "p"]], {"ties": "breslow"})
    w.csv("schoenfeld.csv", schoenfeld_test(fit, rec, names), {"time_transform": "identity"})
    if not cfg.get("evalues"):
        ok = tab.loc[np.isfinite(tab["se"])]
        w.csv("evalues.csv", _evalue_table(ok))
    design = build_design(records, "pamm_wce", J=int(cfg["J"]), L=int(cfg["L"]), K=int(cfg["K"]))
    mf = fit_mspem(design, alpha=_alpha(cfg["alpha"]), seed=int(cfg["seed"]))
    w.csv("calibration.csv", calibration_deciles(mf), {"alpha": mf.fit.alpha})
    curves = km_fit(records["t_start"], records["t_stop"], records["event"], strata=records["gap_type"].astype(str))
    w.csv("km_curves.csv", km_frame(curves, "gap_type"))
    return w.written


# ---------------------------------------------------------------- cluster


def cmd_cluster(cfg: dict) -> list:
    feats = read_features(_need_file(cfg.get("input"), "input"))
    kr = _k_range(cfg["k_range"])
    eligible = int((feats["games_played"] >= 10).sum())
    if 0 < eligible <= kr[-1]:
        raise ValidationError(f"need more than {kr[-1]} players with >= 10 games, got {eligible}")
    res = assign_tiers(feats, kr, seed=int(cfg["seed"]))
    w = _Writer(cfg)
    extra = {"chosen_k": res.chosen_k, "pca_components": None if res.pca is None else res.pca.n_components}
    w.csv("tiers.csv", res.tiers[["player_id", "tier", "cluster"]], extra)
    w.csv("silhouette.csv", res.silhouette, extra)
    return w.written


_COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "diagnose": cmd_diagnose, "cluster": cmd_cluster}


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:  # usage errors exit 1, --help/--version exit 0
        return int(exc.code or 0)
    try:
        cfg = _resolve(args)
        written = _COMMANDS[args.command](cfg)
    except ValidationError as exc:
        print(f"mspem {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, pd.errors.EmptyDataError, pd.errors.ParserError) as exc:
        print(f"mspem {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"mspem {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 2
    for p in written:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
