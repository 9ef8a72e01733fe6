import numpy as np
import pytest

import targets as pv
from conftest import fitted, table
from oracles import direct_observed_mle
from mselink.em import (
    EMError,
    EMOptions,
    ModelError,
    compatibility,
    e_step,
    fit_em,
    margin,
    observed_deviance,
    odds_ratio,
    prepare,
    saturated_loglik,
)
from mselink.formula import CellSpace, parse
from mselink.ingest import VariableSchema, make_table
from mselink.loglin import fit_poisson

AC = VariableSchema.from_letters("AC")


def cell(space, **values):
    return space.index_of(values)


class TestEStep:
    def test_two_cell_proportional_split(self):
        t = make_table(AC, [((1, 1, "-", 0), 100)])
        sp = CellSpace(AC.variables)
        ms = compatibility(t, sp)
        mu = np.zeros(len(sp))
        mu[cell(sp, A=1, C=1, a=0, c=0)] = 75
        mu[cell(sp, A=1, C=1, a=1, c=0)] = 25
        ct = e_step(ms, mu)
        assert ct.distribution(0) == {cell(sp, A=1, C=1, a=0, c=0): 75.0, cell(sp, A=1, C=1, a=1, c=0): 25.0}

    def test_complete_pattern_keeps_its_cell(self):
        t = make_table(AC, [((1, 0, 1, "x"), 40)])
        sp = CellSpace(AC.variables)
        ct = e_step(compatibility(t, sp), np.ones(len(sp)))
        # c is undefined for C out, so both c values are compatible
        assert set(ct.distribution(0)) == {cell(sp, A=1, C=0, a=1, c=0), cell(sp, A=1, C=0, a=1, c=1)}
        assert ct.total == pytest.approx(40)

    def test_fully_recorded_pattern_goes_to_one_cell(self):
        t = make_table(AC, [((1, 1, 1, 0), 9)])
        sp = CellSpace(AC.variables)
        ct = e_step(compatibility(t, sp), np.ones(len(sp)))
        assert ct.distribution(0) == {cell(sp, A=1, C=1, a=1, c=0): 9.0}

    def test_item_missing_row_of_table2(self, s1_fit):
        sp = s1_fit.structure.space
        i = [k for k, p in enumerate(table("s1").patterns.tolist()) if p == [1, 1, -1, 0]][0]
        d = s1_fit.completed.distribution(i)
        assert sum(d.values()) == pytest.approx(16_512)
        mu = s1_fit.fitted
        j0, j1 = cell(sp, A=1, C=1, a=0, c=0), cell(sp, A=1, C=1, a=1, c=0)
        assert d[j0] / d[j1] == pytest.approx(mu[j0] / mu[j1])

    def test_mass_conservation(self, s1_fit):
        assert s1_fit.completed.total == pytest.approx(4_377_300, rel=1e-12)


class TestTwoRegisters:
    def test_completed_table(self, s1_fit):
        sp = s1_fit.structure.space
        full = s1_fit.completed.counts
        for (A, C, a, c), v in pv.TABLE2_FITTED.items():
            if A or C:
                assert full[cell(sp, A=A, C=C, a=a, c=c)] == pytest.approx(v, abs=0.5)

    def test_parameters(self, s1_fit):
        for lab, v in pv.TABLE3.items():
            assert s1_fit.fit.coef(lab) == pytest.approx(v, abs=0.01)
        assert np.exp(s1_fit.fit.coef("a:c")) == pytest.approx(377.9, abs=0.1)

    @pytest.mark.parametrize("fixed", [dict(A=1, C=1), dict(A=1, C=0), dict(A=0, C=1)])
    def test_odds_ratio_identical_in_imputed_subtables(self, s1_fit, fixed):
        r = odds_ratio(s1_fit.completed.counts, s1_fit.structure.space, "a", "c", fixed)
        assert r == pytest.approx(np.exp(s1_fit.fit.coef("a:c")), rel=1e-6)

    def test_fixed_point_preserves_completed_margins(self, s1_fit):
        sp = s1_fit.structure.space
        for t in s1_fit.fit.design.terms:
            if t:
                names = sorted(t, key=sp.variables.index)
                assert np.allclose(margin(s1_fit.completed.counts, sp, names), margin(s1_fit.fitted, sp, names), rtol=1e-8)

    def test_saturated_observable_model_has_zero_deviance(self, s1_fit):
        assert s1_fit.deviance == pytest.approx(0.0, abs=1e-4)

    def test_matches_direct_likelihood_maximisation(self, s1_fit):
        # independent BFGS on the observed-pattern likelihood
        t = table("s1")
        pats = np.where(t.patterns < 0, -1, t.patterns)
        _, _, mu = direct_observed_mle(pats, t.counts, list(AC.variables), ["A", "C"], [set("Ac"), set("ac"), set("Ca")])
        assert s1_fit.fitted[~s1_fit.structure.structural].sum() == pytest.approx(4_377_300, rel=1e-10)
        oracle_unlisted = mu[:4].sum()  # A=0, C=0 are the first four cells
        assert oracle_unlisted == pytest.approx(6_274.7415, abs=0.01)
        ours = s1_fit.fit.predicted()[s1_fit.structure.structural].sum()
        assert ours == pytest.approx(oracle_unlisted, abs=0.05)


class TestThreeRegisters:
    def test_parameters(self):
        r = fitted("s2")
        for lab, v in pv.TABLE5.items():
            assert r.fit.coef(lab) == pytest.approx(v, abs=0.01), lab

    def test_unlisted_matches_frozen_oracle(self):
        # value derived by direct maximisation in tests/oracles.py
        r = fitted("s2")
        assert r.fit.predicted()[r.structure.structural].sum() == pytest.approx(40_867.568, abs=0.05)


class TestFourRegisters:
    def test_restricted_model_deviance(self):
        assert fitted("s3").deviance == pytest.approx(pv.S3_DEVIANCE, abs=1.0)

    def test_saturated_loglik_is_an_upper_bound(self):
        r = fitted("s3")
        assert saturated_loglik(r.structure) >= r.loglik
        assert observed_deviance(r.structure, r.fitted) == pytest.approx(r.deviance)

    def test_spot_parameters(self):
        r = fitted("s3")
        for lab, v in pv.TABLES6_SPOT.items():
            assert r.fit.coef(lab) == pytest.approx(v, abs=0.02), lab


def test_structural_missingness_only_converges_and_conserves_mass():
    t = make_table(AC, [((1, 1, 0, 0), 50), ((1, 1, 1, 1), 30), ((1, 1, 0, 1), 4), ((1, 1, 1, 0), 6),
                        ((1, 0, 0, "x"), 20), ((1, 0, 1, "x"), 10), ((0, 1, "x", 0), 15), ((0, 1, "x", 1), 5)])
    r = fit_em(t, parse("[Ac][ac][Ca]", AC))
    assert r.converged and r.completed.total == pytest.approx(140)


def test_complete_data_reduces_to_one_poisson_fit():
    t = make_table(AC, [((1, 1, 0, 0), 50), ((1, 1, 1, 1), 30), ((1, 1, 0, 1), 4), ((1, 1, 1, 0), 6)])
    f = parse("[Ac][Ca][ac]", AC)
    r = fit_em(t, f)
    design, _ = prepare(t, f)
    direct = fit_poisson(design, r.completed.counts)
    assert np.allclose(r.fitted, direct.fitted, rtol=1e-8)
    assert r.iterations <= 2


def test_inestimable_model_is_rejected():
    with pytest.raises(ModelError, match="inestimable term AC"):
        fit_em(table("s1"), parse("[AC]", AC))


def test_history_is_monotone(s1_fit):
    h = np.array(s1_fit.history)
    assert np.all(np.diff(h) >= -1e-8)


def test_nonconvergence_is_reported():
    r = fit_em(table("s1"), parse(pv.S1_MODEL, AC), EMOptions(max_iter=2))
    assert not r.converged and r.iterations == 2


def test_em_error_is_a_runtime_error():
    assert issubclass(EMError, RuntimeError)
