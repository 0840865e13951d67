import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from msmpam.errors import CutsDoNotCover, EmptyDataset, NonMonotoneExplicitCuts
from msmpam.events import StateDiagram, TransitionRecord, validate_dataset
from msmpam.ped import (
    CutPoints,
    augment_multistate,
    make_cuts,
    prediction_frame,
    read_ped_csv,
    to_ped,
    transform_episode,
)

ID = StateDiagram.illness_death()
CUTS = CutPoints((0.0, 1.0, 2.0, 3.0))


def ds_of(*recs):
    return validate_dataset([TransitionRecord(*r) for r in recs], ID)


def test_explicit_cuts():
    assert make_cuts(ds_of((1, 0, 1, 0.0, 2.5)), ("explicit", [0, 1, 2, 3])).cuts == (0, 1, 2, 3)


def test_unique_event_time_cuts():
    ds = ds_of((1, 0, 1, 0.0, 0.5), (2, 0, 3, 0.0, 2.5), (3, 0, "cens", 0.0, 4.0))
    assert make_cuts(ds).cuts == (0.0, 0.5, 2.5, 4.0)


def test_quantile_cuts_uniform(rng):
    t = rng.uniform(0, 10, 4000)
    df = pd.DataFrame({"subject_id": np.arange(len(t)), "from_state": 0, "to_state": 1, "t_entry": 0.0, "t_exit": t})
    c = np.asarray(make_cuts(df, "quantiles:4").cuts)
    # oracle: empirical quantiles of the same sample
    assert np.allclose(c[1:4], np.quantile(t, [0.25, 0.5, 0.75]))
    assert np.allclose(c, [0, 2.5, 5, 7.5, 10], atol=0.3)


def test_cuts_validation():
    with pytest.raises(NonMonotoneExplicitCuts):
        CutPoints((0.0, 2.0, 1.0))
    with pytest.raises(EmptyDataset):
        make_cuts(pd.DataFrame(columns=["t_exit", "to_state"]))


def test_transform_episode_event():
    rows = transform_episode(TransitionRecord(1, 0, 1, 0.0, 2.5), CUTS)
    assert [(r[3], r[5]) for r in rows] == [(1.0, 0), (1.0, 0), (0.5, 1)]
    assert all(r[4] == np.log(r[3]) for r in rows)


def test_transform_episode_left_truncated():
    rows = transform_episode(TransitionRecord(1, 1, "cens", 1.2, 2.5), CUTS)
    assert [r[0] for r in rows] == [2, 3]
    assert np.allclose([r[3] for r in rows], [0.8, 0.5])
    assert [r[5] for r in rows] == [0, 0]


def test_event_at_cut_is_in_closing_interval():
    rows = transform_episode(TransitionRecord(1, 0, 1, 0.0, 2.0), CutPoints((0.0, 1.0, 2.0)))
    assert [(r[3], r[5]) for r in rows] == [(1.0, 0), (1.0, 1)]


def test_cuts_do_not_cover():
    with pytest.raises(CutsDoNotCover):
        transform_episode(TransitionRecord(1, 0, 1, 0.0, 3.5), CUTS)


def test_augment_onset():
    ped = augment_multistate(ds_of((1, 0, 1, 0.0, 2.0), (1, 1, "cens", 2.0, 3.0)), CUTS)
    g = ped.frame[ped.frame["episode"] == 0]
    assert sorted(g["transition"].unique()) == ["0->1", "0->3"]
    ev = g[g["status"] == 1]
    assert len(ev) == 1 and ev["transition"].iloc[0] == "0->1" and ev["tend"].iloc[0] == 2.0
    cens = ped.frame[ped.frame["episode"] == 1]
    assert sorted(cens["transition"].unique()) == ["1->2", "1->3"] and cens["status"].sum() == 0


def test_augment_four_groups_left_truncated():
    ped = to_ped(ds_of((1, 0, 1, 0.0, 2.0), (1, 1, 3, 2.0, 5.0)), CutPoints(tuple(range(7))))
    f = ped.frame
    assert f.groupby(["episode", "transition"], observed=True).ngroups == 4
    assert f.loc[f["from_state"] == 1, "tstart"].min() == 2.0


def test_timescales_and_helpers():
    ped = to_ped(ds_of((1, 0, 1, 0.0, 2.0), (1, 1, 3, 2.0, 5.0)), CutPoints(tuple(range(7))))
    f = ped.frame
    r = f[(f["transition"] == "1->2") & (f["tend"] == 5.0)].iloc[0]
    assert (r["t1"], r["t_entry_1"], r["trans_after_1"]) == (3.0, 2.0, "progression")
    r = f[f["transition"] == "0->1"].iloc[0]
    assert (r["t1"], r["t_entry_1"], r["trans_after_1"]) == (0.0, 0.0, "none")
    r = f[f["transition"] == "1->3"].iloc[0]
    assert r["trans_after_1"] == "1->3" and r["trans_after_1_exact"] == "1->3"
    assert set(f["trans_after_0"].cat.categories) >= {"none", "progression", "0->3"}


def test_ped_properties_on_simulated(ssts_small, ssts_small_ped):
    f = ssts_small_ped.frame
    assert (f["y"] > 0).all()
    assert np.array_equal(f["offset"].to_numpy(), np.log(f["y"].to_numpy()))
    # exposure per (episode, transition) copy reproduces the episode length
    ep = ssts_small.frame.assign(episode=ssts_small.frame.groupby("subject_id").cumcount())
    length = (ep["t_exit"] - ep["t_entry"]).to_numpy()
    tot = f.groupby(["subject_id", "episode", "transition"], observed=True)["y"].sum()
    idx = pd.MultiIndex.from_frame(ep[["subject_id", "episode"]])
    per_ep = pd.Series(length, index=idx)
    lhs = tot.droplevel("transition")
    assert np.max(np.abs(lhs.to_numpy() - per_ep.reindex(lhs.index).to_numpy())) < 1e-12
    # events per subject equal observed transitions
    n_obs = (ssts_small.frame["to_state"] >= 0).groupby(ssts_small.frame["subject_id"]).sum()
    assert f.groupby("subject_id")["status"].sum().equals(n_obs.astype(f["status"].dtype))
    # helper 'none' exactly on rows from states before the chain position
    assert ((f["trans_after_1"] == "none") == (f["from_state"] == 0)).all()
    assert (f.loc[f["from_state"] == 0, ["t1", "t_entry_1"]] == 0).all().all()


def test_ped_csv_roundtrip(tmp_path, ssts_small_ped):
    p = tmp_path / "p.csv"
    ssts_small_ped.to_csv(p)
    back = read_ped_csv(p)
    pd.testing.assert_frame_equal(back.frame, ssts_small_ped.frame, check_dtype=False)
    assert back.cuts == ssts_small_ped.cuts


def test_prediction_frame_columns():
    nd = prediction_frame(ID, "1->2", [3.0, 4.0], {1: 2.0}, {"x1": 1.0})
    assert nd["t1"].tolist() == [1.0, 2.0]
    assert (nd["trans_after_1"] == "progression").all()


@settings(max_examples=60, deadline=None)
@given(
    entry=st.floats(0.0, 4.0, allow_nan=False),
    length=st.floats(1e-3, 5.0, allow_nan=False),
    step=st.sampled_from([0.25, 0.5, 1.0, 1.5]),
    event=st.booleans(),
)
def test_tiling_property(entry, length, step, event):
    exit_ = entry + length
    cuts = CutPoints.grid(float(np.ceil(exit_ / step) * step + step), step)
    rows = transform_episode(TransitionRecord(1, 0, 1 if event else "cens", entry, exit_), cuts)
    ys = np.array([r[3] for r in rows])
    assert np.all(ys > 0)
    assert abs(ys.sum() - length) < 1e-12
    assert sum(r[5] for r in rows) == int(event) and (rows[-1][5] == int(event))
    # rows are contiguous
    assert all(abs(a[2] - b[1]) == 0 for a, b in zip(rows[:-1], rows[1:]))
