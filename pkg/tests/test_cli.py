import json
import subprocess
import sys
from importlib.resources import files

import numpy as np
import pandas as pd
import pytest

from mspem.cli import main
from mspem.synthetic import generate_games, generate_player_features

GAMES = str(files("mspem") / "data" / "games_fixture.csv")
FEATURES = str(files("mspem") / "data" / "features_fixture.csv")


def read(path):
    return pd.read_csv(path, comment="#")


def header(path):
    with open(path) as fh:
        return [line.rstrip("\n") for line in fh if line.startswith("#")]


def run(*argv):
    return main([str(a) for a in argv])


# ---------------------------------------------------------------- fit


@pytest.fixture(scope="module")
def fit_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    assert run("fit", "--input", GAMES, "--weights", "stabilized,overlap", "--alpha", "fixed:0.1", "--out", out) == 0
    return out


def test_fit_writes_bundle(fit_dir):
    names = {p.name for p in fit_dir.iterdir()}
    assert {"fit.json", "weight_function.csv", "surface_naive.csv", "balance.csv", "comparison.csv", "aic.csv"} <= names
    assert "surface_ipw_logistic.csv" in names and "surface_overlap.csv" in names


def test_fixed_alpha_recorded(fit_dir):
    bundle = json.loads((fit_dir / "fit.json").read_text())
    assert bundle["alpha"] == {"mode": "fixed", "value": 0.1}
    assert all(f["alpha"] == 0.1 for f in bundle["fits"].values())
    assert "# alpha: 0.1" in header(fit_dir / "comparison.csv")


def test_metadata_header_on_every_csv(fit_dir):
    for p in fit_dir.glob("*.csv"):
        h = header(p)
        assert h[0] == "# mspem 0.1.0"
        assert h[1] == "# command: fit"
        assert h[2] == "# seed: 0"
        assert h[3].startswith("# config_hash: ") and len(h[3].split(": ")[1]) == 16
    meta = json.loads((fit_dir / "fit.json").read_text())["_meta"]
    assert set(meta) == {"version", "command", "seed", "config_hash"}


def test_comparison_layout(fit_dir):
    comp = read(fit_dir / "comparison.csv")
    assert list(comp.columns) == ["method", "w1", "attenuation_pct", "ess", "ess_pct"]
    assert list(comp["method"]) == ["Naive", "IPW-Logistic", "Overlap"]
    assert np.isnan(comp["attenuation_pct"].iloc[0])
    assert (comp["ess_pct"].iloc[1:] <= 100 + 1e-9).all()


def test_balance_layout(fit_dir):
    bal = read(fit_dir / "balance.csv")
    assert list(bal.columns) == ["scheme", "covariate", "mean_played", "mean_rested", "smd_before", "smd_after", "flag"]
    assert set(bal["scheme"]) == {"IPW-Logistic", "Overlap"}
    # overlap weights balance the selection-model covariates exactly
    ov = bal[bal.scheme == "Overlap"]
    assert np.abs(ov["smd_after"]).max() < 1e-6


def test_weight_function_and_surface(fit_dir):
    wf = read(fit_dir / "weight_function.csv")
    assert list(wf["lag"]) == list(range(1, 11))
    assert {"naive_w", "corrected_w"} <= set(wf.columns)
    surf = read(fit_dir / "surface_naive.csv")
    assert list(surf.columns) == ["t", "rest_days", "log_hazard"]
    assert np.isfinite(surf["log_hazard"]).all()


def test_weights_none_gives_naive_only(tmp_path):
    assert run("fit", "--input", GAMES, "--alpha", "fixed:1", "--out", tmp_path) == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert "balance.csv" not in names
    assert not any(n.startswith("surface_") and n != "surface_naive.csv" for n in names)
    comp = read(tmp_path / "comparison.csv")
    assert list(comp["method"]) == ["Naive"]
    assert list(json.loads((tmp_path / "fit.json").read_text())["fits"]) == ["naive"]


def test_rerun_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run("fit", "--input", GAMES, "--weights", "stabilized", "--seed", 5, "--out", d) == 0
    for p in a.iterdir():
        assert p.read_bytes() == (b / p.name).read_bytes(), p.name


def test_external_propensities(tmp_path):
    games = read(GAMES)
    # the marginal play rate as every row's propensity makes each weight exactly 1
    ext = games[["player_id", "game_date"]].assign(pi_hat=games["played"].mean())
    path = tmp_path / "rf_scores.csv"
    ext.to_csv(path, index=False)
    out = tmp_path / "out"
    assert run("fit", "--input", GAMES, "--weights", f"external:{path}", "--alpha", "fixed:0.1", "--out", out) == 0
    comp = read(out / "comparison.csv")
    assert list(comp["method"]) == ["Naive", "IPW-External(rf_scores)"]
    assert comp["w1"].iloc[1] == pytest.approx(comp["w1"].iloc[0], rel=1e-8)
    assert comp["ess_pct"].iloc[1] == pytest.approx(100.0)


def test_positivity_error_is_surfaced_verbatim(tmp_path, capsys):
    games = read(GAMES)
    ext = games[["player_id", "game_date"]].assign(pi_hat=0.7)
    ext.loc[2, "pi_hat"] = 0.0
    path = tmp_path / "bad.csv"
    ext.to_csv(path, index=False)
    assert run("fit", "--input", GAMES, "--weights", f"external:{path}", "--out", tmp_path / "o") == 2
    err = capsys.readouterr().err
    assert "propensity 0.0 outside (0, 1) at row 3" in err


def test_schema_error_lists_rows(tmp_path, capsys):
    games = read(GAMES)
    games.loc[4, "minutes"] = -3.0
    games.loc[9, "event"] = 7
    path = tmp_path / "bad.csv"
    games.to_csv(path, index=False)
    assert run("fit", "--input", path, "--out", tmp_path / "o") == 1
    err = capsys.readouterr().err
    assert "row 5" in err and "row 10" in err


@pytest.mark.parametrize(
    "argv",
    [
        ["fit", "--input", "does_not_exist.csv"],
        ["fit", "--input", GAMES, "--alpha", "fixed:-1"],
        ["fit", "--input", GAMES, "--alpha", "bogus"],
        ["fit", "--input", GAMES, "--weights", "magic"],
        ["fit", "--input", GAMES, "--truncate", "99,1"],
        ["fit"],
        ["diagnose"],
        ["cluster", "--input", FEATURES, "--k-range", "1..3"],
        ["fit", "--no-such-flag"],
    ],
)
def test_validation_exit_code(argv, tmp_path, capsys):
    assert run(*argv, "--out", tmp_path) == 1
    assert capsys.readouterr().err


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"input": GAMES, "alpha": "fixed:2.5", "weights": "none", "seed": 9}))
    out = tmp_path / "o"
    assert run("fit", "--config", cfg, "--alpha", "fixed:0.5", "--out", out) == 0
    bundle = json.loads((out / "fit.json").read_text())
    assert bundle["alpha"]["value"] == 0.5
    assert bundle["_meta"]["seed"] == 9


def test_config_unknown_key(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"input": GAMES, "colour": "blue"}))
    assert run("fit", "--config", cfg, "--out", tmp_path / "o") == 1


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("MSPEM_OUT", str(tmp_path / "envout"))
    assert run("diagnose", "--input", GAMES, "--alpha", "fixed:1") == 0
    assert (tmp_path / "envout" / "cox_table.csv").is_file()


def test_console_module_entry(tmp_path):
    r = subprocess.run(
        [sys.executable, "-m", "mspem.cli", "cluster", "--input", FEATURES, "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert r.returncode == 0, r.stderr
    assert "tiers.csv" in r.stdout


# ---------------------------------------------------------------- diagnose


@pytest.fixture(scope="module")
def diag_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("diag")
    assert run("diagnose", "--input", GAMES, "--alpha", "fixed:1", "--out", out) == 0
    return out


def test_cox_table_layout(diag_dir):
    tab = read(diag_dir / "cox_table.csv")
    assert list(tab.columns) == ["covariate", "hr", "ci_low", "ci_high", "p"]
    assert {"age", "bmi", "home", "recent_load_7d", "gap_short", "gap_extended"} <= set(tab["covariate"])
    ok = tab.dropna()
    assert ((ok.ci_low <= ok.hr) & (ok.hr <= ok.ci_high)).all()
    assert ((ok.p >= 0) & (ok.p <= 1)).all()


def test_schoenfeld_and_calibration(diag_dir):
    sch = read(diag_dir / "schoenfeld.csv")
    assert list(sch.columns) == ["covariate", "statistic", "p"]
    cal = read(diag_dir / "calibration.csv")
    assert list(cal.columns) == ["bin", "n", "mean_pred", "obs_rate"]
    # one calibration unit per played game
    assert cal["n"].sum() == (read(GAMES)["played"] == 1).sum()
    assert ((cal.mean_pred > 0) & (cal.mean_pred < 1)).all()


def test_km_curves_monotone(diag_dir):
    km = read(diag_dir / "km_curves.csv")
    assert "gap_type" in km
    for _, g in km.groupby("gap_type"):
        s = g.sort_values("time")["survival"].to_numpy()
        assert np.all(np.diff(s) <= 1e-12)
        assert ((s >= 0) & (s <= 1)).all()


def test_evalues_from_hr_column(tmp_path):
    src = tmp_path / "hr.csv"
    pd.DataFrame({"hr": [0.831, 0.993, 1.0]}).to_csv(src, index=False)
    assert run("diagnose", "--evalues", src, "--out", tmp_path / "o") == 0
    ev = read(tmp_path / "o" / "evalues.csv")
    assert list(ev.columns) == ["covariate", "hr", "evalue_point", "evalue_ci"]
    assert list(ev["evalue_point"].round(2)) == [1.70, 1.09, 1.0]


def test_evalues_with_intervals(tmp_path):
    src = tmp_path / "hr.csv"
    pd.DataFrame(
        {"covariate": ["a", "b"], "hr": [0.5, 1.3], "ci_low": [0.3, 0.9], "ci_high": [0.8, 1.8]}
    ).to_csv(src, index=False)
    assert run("diagnose", "--evalues", src, "--out", tmp_path / "o") == 0
    ev = read(tmp_path / "o" / "evalues.csv")
    # CI bound nearest the null: 0.8 -> 1/0.8 = 1.25, E = 1.25 + sqrt(1.25 * 0.25)
    assert ev["evalue_ci"].iloc[0] == pytest.approx(1.25 + np.sqrt(1.25 * 0.25))
    assert ev["evalue_ci"].iloc[1] == 1.0


# ---------------------------------------------------------------- cluster


def test_cluster_four_blobs(tmp_path):
    feats = generate_player_features(n_per_tier=20, seed=4).drop(columns="true_tier")
    src = tmp_path / "f.csv"
    feats.to_csv(src, index=False)
    out = tmp_path / "o"
    assert run("cluster", "--input", src, "--k-range", "3..7", "--out", out) == 0
    tiers = read(out / "tiers.csv")
    assert "# chosen_k: 4" in header(out / "tiers.csv")
    assert set(tiers["tier"]) == {"HighUsageStar", "StartingRole", "Rotation", "Reserve"}
    sil = read(out / "silhouette.csv")
    assert list(sil["k"]) == [3, 4, 5, 6, 7]


def test_cluster_all_short_players_are_reserve(tmp_path):
    feats = generate_player_features(n_per_tier=2, seed=1).drop(columns="true_tier").head(5)
    feats["games_played"] = [1, 3, 5, 7, 9]
    src = tmp_path / "f.csv"
    feats.to_csv(src, index=False)
    assert run("cluster", "--input", src, "--out", tmp_path / "o") == 0
    tiers = read(tmp_path / "o" / "tiers.csv")
    assert (tiers["tier"] == "Reserve").all() and len(tiers) == 5


def test_cluster_too_few_rows(tmp_path, capsys):
    feats = generate_player_features(n_per_tier=1, seed=1).drop(columns="true_tier")
    src = tmp_path / "f.csv"
    feats.to_csv(src, index=False)
    assert run("cluster", "--input", src, "--k-range", "3..7", "--out", tmp_path / "o") == 1
    assert "need more than 7" in capsys.readouterr().err


def test_cluster_empty_file(tmp_path):
    src = tmp_path / "empty.csv"
    src.write_text("")
    assert run("cluster", "--input", src, "--out", tmp_path / "o") == 1
    src.write_text("player_id,mean_minutes,games_played\n")
    assert run("cluster", "--input", src, "--out", tmp_path / "o") == 1


def test_cluster_tier_output_round_trips_into_ingestion(tmp_path):
    # tiers.csv is consumable as a player_id,tier lookup
    assert run("cluster", "--input", FEATURES, "--out", tmp_path) == 0
    tiers = pd.read_csv(tmp_path / "tiers.csv", comment="#", dtype={"player_id": str})
    assert tiers["player_id"].is_unique
    assert set(tiers["tier"]) <= {"HighUsageStar", "StartingRole", "Rotation", "Reserve"}


# ---------------------------------------------------------------- simulate


def _small_scenarios(path, reps=1):
    path.write_text(
        json.dumps(
            {
                "N": 60,
                "T": 30,
                "replications": reps,
                "scenarios": [{"name": "None", "alpha_u": 0, "gamma_u": 0}, {"name": "Strong"}],
            }
        )
    )
    return path


def test_simulate_single_replication(tmp_path):
    scen = _small_scenarios(tmp_path / "s.json")
    out = tmp_path / "o"
    assert run("simulate", "--scenario", scen, "--estimators", "naive,ipw_observed", "--out", out) == 0
    # "None" is a scenario name here, not a missing value
    tab = pd.read_csv(out / "bias_table.csv", comment="#", keep_default_na=False)
    assert list(tab.columns) == ["scenario", "alpha_u", "gamma_u", "naive_bias", "ipw_bias", "event_rate_pct"]
    assert list(tab["scenario"]) == ["None", "Strong"]
    assert np.isfinite(tab[["naive_bias", "ipw_bias"]].to_numpy()).all()
    seeds = read(out / "seeds.csv")
    assert len(seeds) == 2
    assert "# seed: 2024" in header(out / "bias_table.csv")
    assert (out / "weight_functions.csv").is_file()


def test_simulate_rerun_identical_and_seed_sensitive(tmp_path):
    scen = _small_scenarios(tmp_path / "s.json", reps=2)
    dirs = [tmp_path / d for d in ("a", "b", "c")]
    seeds = [11, 11, 12]
    for d, s in zip(dirs, seeds):
        assert run("simulate", "--scenario", scen, "--estimators", "naive", "--seed", s, "--out", d) == 0
    for p in dirs[0].iterdir():
        assert p.read_bytes() == (dirs[1] / p.name).read_bytes()
    assert (dirs[0] / "bias_table.csv").read_bytes() != (dirs[2] / "bias_table.csv").read_bytes()


def test_simulate_invalid_scenario(tmp_path):
    bad = tmp_path / "s.json"
    bad.write_text(json.dumps({"scenarios": [{"name": "x", "N": -4}]}))
    assert run("simulate", "--scenario", bad, "--out", tmp_path / "o") == 1
    bad.write_text("{not json")
    assert run("simulate", "--scenario", bad, "--out", tmp_path / "o") == 1


def test_bundled_scenarios_give_four_rows():
    from mspem.simlab import load_scenarios

    specs = load_scenarios(files("mspem") / "data" / "table3.json")
    assert [s.name for s in specs] == ["None", "Weak", "Moderate", "Strong"]
    assert all(s.N == 500 and s.T == 80 and s.replications == 50 for s in specs)


def test_generated_games_round_trip(tmp_path):
    g = generate_games(n_players=4, n_games=30, seed=8).drop(columns="tier")
    src = tmp_path / "g.csv"
    g.to_csv(src, index=False)
    assert run("fit", "--input", src, "--alpha", "fixed:1", "--design", "pamm", "--out", tmp_path / "o") == 0
