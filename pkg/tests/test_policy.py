import numpy as np
import pytest

from conftest import SMALL_LAYOUT, small_world
from seqret.core import Layout
from seqret.exceptions import InputError, SeqretError
from seqret.nested import NestedConfig, fit_stage1, prepare_sample
from seqret.policy import (
    PolicyTransform,
    decompose_simulation,
    instrument_derivative,
    predict_stage1,
    simulate_policy,
)


def fd_probe(s1, df, cs, f, rows, h=1e-6):
    up, dn = df.iloc[rows].copy(), df.iloc[rows].copy()
    up[f"ee_{f}"] += h
    dn[f"ee_{f}"] -= h
    a = s1.bachelors.index(f)
    return (predict_stage1(s1, up, cs)[:, a] - predict_stage1(s1, dn, cs)[:, a]) / (2 * h)


@pytest.fixture(scope="module")
def gender_world():
    df, truth, cs = small_world(seed=6, n=8000, gender_instrument_effect=1.5, gender_instrument_field=2)
    extra = Layout.from_list(truth["stage1_extra"])
    s = prepare_sample(df, cs, Layout.from_list(SMALL_LAYOUT), extra)
    s1 = fit_stage1(s, NestedConfig(layout=s.layout, stage1_extra=s.stage1_extra, baseline_bachelor=1))
    return df, cs, s1


class TestInvariants:
    def test_identity_zero(self, world3):
        df, _, cs, _, fit = world3
        rep = simulate_policy(fit.stage1, df, PolicyTransform.parse("identity"), cs)
        assert np.max(np.abs(rep.table["delta_pp"])) <= 1e-12

    def test_set_to_current_is_identity(self, world3):
        df, _, cs, _, fit = world3
        d = df.copy()
        d["ee_2"] = 0.5
        rep = simulate_policy(fit.stage1, d, PolicyTransform.parse("set:2=0.5"), cs)
        assert np.max(np.abs(rep.table["delta_pp"])) <= 1e-12

    @pytest.mark.parametrize("text", ["min", "one", "set:1=0.2"])
    def test_shares_sum_to_one(self, world3, text):
        df, _, cs, _, fit = world3
        rep = simulate_policy(fit.stage1, df, PolicyTransform.parse(text), cs)
        assert abs(rep.table["counterfactual"].sum() - 1) < 1e-12
        assert abs(rep.table["baseline"].sum() - 1) < 1e-12
        assert abs(rep.table["delta_pp"].sum()) < 1e-10

    def test_subgroup_weighted_deltas(self, world3):
        df, _, cs, _, fit = world3
        rep = decompose_simulation(simulate_policy(fit.stage1, df, PolicyTransform.parse("min"), cs), df,
                                   ["gender", "hs_grade_pos", "cohort_year"])
        agg = rep.table.set_index("field")["delta_pp"]
        for key, t in rep.subgroups.items():
            w = t["n"] / len(df)
            recon = (t["delta_pp"] * w).groupby(t["field"]).sum()
            assert np.max(np.abs(recon - agg)) <= 1e-12

    def test_low_n_flag(self, world3):
        df, _, cs, _, fit = world3
        d = df.copy()
        d.loc[d.index[:10], "parent_highrank"] = 7
        rep = decompose_simulation(simulate_policy(fit.stage1, d, PolicyTransform.parse("min"), cs), d,
                                   ["parent_highrank"])
        t = rep.subgroups["parent_highrank"]
        assert t.loc[t["group"] == 7, "low_n"].all()
        assert not t.loc[t["group"] != 7, "low_n"].any()

    def test_relative_both_ways(self, world3):
        df, _, cs, _, fit = world3
        t = simulate_policy(fit.stage1, df, PolicyTransform.parse("one"), cs).table
        np.testing.assert_allclose(t["delta_rel"], 100 * (t["counterfactual"] - t["baseline"]) / t["baseline"])
        np.testing.assert_allclose(t["delta_rel_observed"], 100 * (t["counterfactual"] - t["baseline"]) / t["observed"])


class TestDirection:
    def test_fd_probe(self, world3):
        df, _, cs, _, fit = world3
        rows = np.random.default_rng(0).choice(len(df), 20, replace=False)
        for f in cs.codes:
            an = instrument_derivative(fit.stage1, df.iloc[rows], cs, f)
            np.testing.assert_allclose(an, fd_probe(fit.stage1, df, cs, f, rows), atol=1e-7)

    def test_fd_probe_with_interaction(self, gender_world):
        df, cs, s1 = gender_world
        rows = np.random.default_rng(1).choice(len(df), 20, replace=False)
        an = instrument_derivative(s1, df.iloc[rows], cs, 2)
        np.testing.assert_allclose(an, fd_probe(s1, df, cs, 2, rows), atol=1e-7)

    def test_gender_interaction_sign(self, gender_world):
        df, cs, s1 = gender_world
        # planted +1.5 on gender x ee_2 in field 2's utility
        coef = s1.mnl.coefficients.ravel()[s1.mnl.index(1, "gender:ee_2")]
        assert coef > 0
        d = instrument_derivative(s1, df, cs, 2)
        g = df["gender"].to_numpy() == 1
        assert d[g].mean() > d[~g].mean()


class TestTransforms:
    def test_parse(self, world3):
        cs = world3[2]
        assert PolicyTransform.parse("min").kind == "min"
        assert PolicyTransform.parse("one") == PolicyTransform("value", 1.0)
        assert PolicyTransform.parse("set:2=0.3") == PolicyTransform("field", 0.3, 2)
        assert PolicyTransform.parse(f"set:{cs.label(2)}=0.3", cs).field == 2

    @pytest.mark.parametrize("bad", ["max", "set:2", "set:2=abc", "set:x=0.1"])
    def test_parse_errors(self, bad):
        with pytest.raises(InputError):
            PolicyTransform.parse(bad)

    def test_value_out_of_range(self, world3):
        df, _, cs, _, _ = world3
        with pytest.raises(SeqretError):
            PolicyTransform("field", 1.5, 2).apply(df, cs)

    def test_unknown_field(self, world3):
        df, _, cs, _, _ = world3
        with pytest.raises(SeqretError):
            PolicyTransform("field", 0.5, 9).apply(df, cs)

    def test_out_of_support_flag(self, world3):
        df, _, cs, _, _ = world3
        d = df.copy()
        d["ee_1"] = d["ee_1"].clip(upper=0.8)
        _, flagged = PolicyTransform.parse("set:1=0.95").apply(d, cs)
        assert flagged == [1]
        _, flagged = PolicyTransform.parse("min").apply(d, cs)
        assert flagged == []

    def test_min_sets_observed_minimum(self, world3):
        df, _, cs, _, _ = world3
        new, _ = PolicyTransform.parse("min").apply(df, cs)
        for f in cs.codes:
            assert (new[f"ee_{f}"] == df[f"ee_{f}"].min()).all()
