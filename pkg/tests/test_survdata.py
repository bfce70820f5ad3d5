import io

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mspem.errors import SchemaError, ValidationError
from mspem.survdata import (
    CountingRecord,
    bin_covariates,
    gap_type,
    km_fit,
    make_cutpoints,
    ped_transform,
    read_games,
    season_phase,
    to_counting_process,
)


@pytest.mark.parametrize("rest, expected", [(0, "b2b"), (1, "b2b"), (2, "short"), (3, "normal"), (4, "extended"), (40, "extended")])
def test_gap_type_bins(rest, expected):
    assert gap_type(rest) == expected


@pytest.mark.parametrize("idx, expected", [(1, "early"), (27, "early"), (28, "mid"), (55, "mid"), (56, "late"), (82, "late")])
def test_season_phase_bins(idx, expected):
    assert season_phase(idx) == expected


def test_bin_covariates_rejects_negative_rest():
    with pytest.raises(ValidationError):
        bin_covariates({"rest_days": -1, "game_index": 3})


def test_bin_covariates_idempotent_on_frame():
    df = pd.DataFrame({"rest_days": [0, 2, 3, 7], "game_index": [1, 28, 55, 80]})
    once = bin_covariates(df)
    twice = bin_covariates(once)
    pd.testing.assert_frame_equal(once, twice)
    assert list(once["gap_type"]) == ["b2b", "short", "normal", "extended"]
    assert list(once["season_phase"]) == ["early", "mid", "mid", "late"]


def test_counting_record_invariants():
    with pytest.raises(ValidationError):
        CountingRecord("p", 10.0, 10.0, 0, 0.0, 1, 0.0, 1, "early", "b2b", 0, 25.0, 24.0)


def test_cutpoints_median():
    np.testing.assert_allclose(make_cutpoints([10, 20, 30, 40], [1, 1, 1, 1], J=2), [0, 25, 40])


def test_cutpoints_dedup():
    np.testing.assert_allclose(make_cutpoints([30, 30, 30, 50], [1, 1, 1, 0], J=2), [0, 30, 50])


def test_cutpoints_twenty_intervals():
    rng = np.random.default_rng(0)
    t = rng.uniform(1, 5000, 2000)
    e = rng.random(2000) < 0.1
    assert make_cutpoints(t, e, J=20).size == 21


def test_cutpoints_need_events():
    with pytest.raises(ValidationError):
        make_cutpoints([1, 2], [0, 0])


def _records(rows):
    return pd.DataFrame(rows, columns=["player_id", "t_start", "t_stop", "event"])


def test_ped_split_definitional():
    ped = ped_transform(_records([("a", 0.0, 100.0, 1)]), [0, 50, 100])
    assert list(ped["exposure"]) == [50, 50]
    assert list(ped["event"]) == [0, 1]
    np.testing.assert_allclose(ped["offset"], np.log(50))
    assert list(ped["t_mid"]) == [25, 75]


def test_ped_single_row():
    ped = ped_transform(_records([("a", 0.0, 30.0, 0)]), [0, 50, 100])
    assert list(ped["exposure"]) == [30] and list(ped["event"]) == [0]


def test_ped_tie_with_cut_puts_event_on_row_ending_there():
    ped = ped_transform(_records([("a", 20.0, 50.0, 1)]), [0, 50, 100])
    assert list(ped["interval"]) == [0] and list(ped["event"]) == [1]


def test_ped_out_of_range():
    with pytest.raises(ValidationError):
        ped_transform(_records([("a", 0.0, 120.0, 0)]), [0, 50, 100])


def test_ped_exposure_conservation_random():
    rng = np.random.default_rng(42)
    t0 = rng.uniform(0, 900, 1000)
    t1 = t0 + rng.uniform(0.01, 100, 1000)
    recs = _records({"player_id": "x", "t_start": t0, "t_stop": t1, "event": rng.integers(0, 2, 1000)})
    cuts = np.r_[0, np.sort(rng.uniform(1, 999, 19)), 1000.0]
    ped = ped_transform(recs, cuts)
    tot = ped.groupby("record")["exposure"].sum().to_numpy()
    assert np.max(np.abs(tot - (t1 - t0))) < 1e-9
    assert ped["event"].sum() == recs["event"].sum()
    assert (ped["exposure"] > 0).all()


@given(
    st.lists(st.tuples(st.floats(0, 99), st.floats(0.001, 50), st.booleans()), min_size=1, max_size=30),
    st.lists(st.floats(0.5, 149.5), max_size=10),
)
@settings(max_examples=100, deadline=None)
def test_ped_properties(rows, inner):
    recs = _records([("p", a, a + d, int(e)) for a, d, e in rows])
    cuts = np.unique(np.r_[0.0, inner, 150.0])
    ped = ped_transform(recs, cuts)
    tot = ped.groupby("record")["exposure"].sum().to_numpy()
    np.testing.assert_allclose(tot, recs["t_stop"] - recs["t_start"], atol=1e-9)
    last = ped.groupby("record").tail(1)
    assert (ped.drop(last.index)["event"] == 0).all()
    assert ped["event"].sum() == recs["event"].sum()


def test_km_no_events():
    c = km_fit([0, 0], [5, 7], [0, 0])["all"]
    np.testing.assert_array_equal(c.survival, [1.0])


def test_km_three_subject_fixture():
    c = km_fit([0, 0, 0], [1, 2, 3], [1, 1, 0])["all"]
    assert c.at(1.0) == pytest.approx(2 / 3)
    assert c.at(2.0) == pytest.approx(1 / 3)
    assert c.at(0.5) == 1.0


def test_km_delayed_entry_respected():
    # subject 3 enters at 1.5: not at risk at t=1, at risk at t=2
    c = km_fit([0, 0, 1.5], [1, 2, 3], [1, 1, 0])["all"]
    assert c.at(1.0) == pytest.approx(1 / 2)
    assert c.at(2.0) == pytest.approx(0.25)


def test_km_all_events_distinct_is_empirical_survival():
    rng = np.random.default_rng(1)
    t = rng.permutation(np.arange(1, 51)).astype(float)
    c = km_fit(np.zeros(50), t, np.ones(50))["all"]
    grid = np.arange(0, 51)
    np.testing.assert_allclose(c.at(grid), 1 - grid / 50, atol=1e-12)


def test_km_stratified_monotone():
    rng = np.random.default_rng(3)
    t1 = rng.exponential(10, 300)
    curves = km_fit(np.zeros(300), t1, rng.random(300) < 0.7, strata=rng.choice(["a", "b"], 300))
    for c in curves.values():
        assert np.all(np.diff(c.survival) <= 0) and c.survival[0] == 1.0


CSV = """player_id,game_date,game_index,minutes,rest_days,recent_load_7d,consecutive_games,home,age,bmi,event,played
p1,2023-10-25,1,30,3,0,1,1,25,24,0,1
p1,2023-10-27,2,20,2,30,2,0,25,24,1,1
p1,2023-10-29,3,0,2,50,0,1,25,24,0,0
p1,2023-10-30,4,25,1,50,1,0,25,24,0,1
p2,2023-10-25,1,10,3,0,1,1,30,26,0,1
"""


def test_counting_process_construction():
    cp = to_counting_process(read_games(io.StringIO(CSV)))
    p1 = cp[cp.player_id == "p1"]
    assert list(p1["t_start"]) == [0, 30, 50]
    assert list(p1["t_stop"]) == [30, 50, 75]
    assert list(p1["gap_type"]) == ["normal", "short", "b2b"]
    assert list(p1["b2b"]) == [0, 0, 1]


def test_schema_errors_list_rows():
    bad = CSV.replace("p1,2023-10-27,2,20,2,30", "p1,2023-10-27,2,20,-2,30").replace("2023-10-30", "yesterday")
    with pytest.raises(SchemaError) as info:
        read_games(io.StringIO(bad))
    rows = [r for r, _ in info.value.problems]
    assert 4 in rows
    with pytest.raises(SchemaError, match="missing columns"):
        read_games(io.StringIO("player_id,minutes\np,1\n"))
