import numpy as np
import pytest

import targets as pv
from conftest import latent_fit, table
from oracles import direct_lc_mle
from mselink.em import ModelError
from mselink.formula import parse
from mselink.ingest import VariableSchema
from mselink.latent import (
    IdentifiabilityError,
    LatentSpec,
    check_identified,
    fit_lc_margins,
    lc_em_step,
    maori_at_least_k,
    min_indicators,
)
from mselink.sim import SimSpec, complete_margin, generate

ABCD = VariableSchema.from_letters("ABCD")
ETH = ["a", "b", "c", "d"]


def table7():
    arr = np.zeros((2, 2, 2, 2))
    for k, v in pv.TABLE7.items():
        arr[k] = v
    return arr


class TestIdentifiability:
    @pytest.mark.parametrize("k, m", [(2, 3), (3, 5), (4, 5), (5, 7)])
    def test_min_indicators(self, k, m):
        assert min_indicators(k) == m

    def test_three_classes_on_four_indicators(self):
        with pytest.raises(IdentifiabilityError, match="not identified with 4"):
            check_identified(4, 3)

    def test_one_class(self):
        with pytest.raises(IdentifiabilityError):
            check_identified(4, 1)


class TestTwoStage:
    def test_table8_first_panel(self):
        fit = fit_lc_margins(table7(), names=ETH)
        assert fit.class_sizes[1] == pytest.approx(0.173, abs=0.003)
        for v in ETH:
            assert fit.conditionals[v] == pytest.approx(pv.TABLE8_TWO_STAGE[v], abs=0.005)
        assert fit.df == 7

    def test_matches_direct_maximisation(self):
        fit = fit_lc_margins(table7(), names=ETH)
        sizes, cond = direct_lc_mle(table7(), seed=0, starts=5)
        assert fit.class_sizes == pytest.approx(sizes, abs=1e-4)
        for j, v in enumerate(ETH):
            assert fit.conditionals[v] == pytest.approx(cond[:, j], abs=1e-4)

    def test_separable_mixture(self):
        arr = np.zeros(16)
        arr[0], arr[15] = 700, 300
        fit = fit_lc_margins(arr)
        assert fit.class_sizes == pytest.approx([0.7, 0.3], abs=1e-6)
        for c in fit.conditionals.values():
            assert c == pytest.approx([0, 1], abs=1e-6)

    def test_recovers_a_known_mixture(self):
        err = {"A": [[0.99, 0.01], [0.06, 0.94]], "B": [[0.98, 0.02], [0.05, 0.95]],
               "C": [[0.995, 0.005], [0.15, 0.85]], "D": [[0.985, 0.015], [0.04, 0.96]]}
        spec = SimSpec(1_000_000, 0.17, {r: 1.0 for r in "ABCD"}, error=err, seed=5)
        t, truth = generate(spec)
        fit = fit_lc_margins(complete_margin(t, ETH), names=ETH)
        assert fit.class_sizes[1] == pytest.approx(truth.class_sizes[1], abs=0.01)
        for r, v in zip("ABCD", ETH):
            assert fit.conditionals[v] == pytest.approx([err[r][0][1], err[r][1][1]], abs=0.01)

    def test_margin_size_checked(self):
        with pytest.raises(ValueError, match="2\\^m"):
            fit_lc_margins(np.ones(6))

    def test_em_step_keeps_a_distribution(self):
        pats = np.indices((2,) * 4).reshape(4, -1).T.astype(float)
        s, c, _ = lc_em_step(table7().ravel(), np.array([0.5, 0.5]), np.full((2, 4), 0.3) + [[0], [0.4]], pats)
        assert s.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all((c >= 0) & (c <= 1))


class TestAtLeastK:
    def test_at_least_two(self):
        assert maori_at_least_k(table7(), 2) == pytest.approx(pv.AT_LEAST_TWO, abs=5)

    def test_all_four(self):
        assert maori_at_least_k(table7(), 4) == pytest.approx(550_697)

    def test_zero_is_everyone(self):
        assert maori_at_least_k(table7(), 0) == pytest.approx(table7().sum())

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            maori_at_least_k(table7(), 5)


class TestSpec:
    def test_lcmse_formula(self):
        spec = LatentSpec.lcmse(ABCD)
        want = parse(pv.LCMSE_MODEL, ABCD, latent=("X",))
        assert set(spec.formula(ABCD).maximal_terms) == set(want.maximal_terms)

    def test_from_formula_roundtrip(self):
        spec = LatentSpec.from_formula(pv.LATENT_XY_MODEL, ABCD)
        assert spec.loadings == {"X": tuple(ETH), "Y": ("A", "B", "C", "D")}
        assert spec.interaction

    def test_missing_ethnicity_loading(self):
        spec = LatentSpec.from_formula("[ABCd][ABDc][ACDb][BCDa][aX][bX][cX]", ABCD)
        with pytest.raises(ModelError, match="do not load on X"):
            spec.formula(ABCD)

    def test_two_ethnicities_in_one_term(self):
        spec = LatentSpec.from_formula("[ABcd][aX][bX][cX][dX]", ABCD)
        with pytest.raises(ModelError, match="joins two ethnicity"):
            spec.formula(ABCD)

    def test_three_classes_rejected(self):
        spec = LatentSpec.from_formula(pv.LCMSE_MODEL, ABCD, classes=3)
        with pytest.raises(IdentifiabilityError):
            spec.formula(ABCD)

    def test_latent_with_two_observed(self):
        with pytest.raises(ModelError, match="more than one observed"):
            LatentSpec.from_formula("[abX]", ABCD)


class TestIntegrated:
    def test_table8_second_panel(self):
        fit = latent_fit(pv.LCMSE_MODEL).fit
        assert fit.class_sizes == pytest.approx(pv.TABLE8_LCMSE["size"], abs=0.005)
        for v in ETH:
            assert fit.conditionals[v] == pytest.approx(pv.TABLE8_LCMSE[v], abs=0.01)

    def test_deviance_and_population(self):
        fit = latent_fit(pv.LCMSE_MODEL).fit
        assert fit.deviance == pytest.approx(pv.LCMSE_DEVIANCE, rel=0.01)
        assert round(fit.normed_deviance, 1) == 2.5
        assert fit.N_hat == pytest.approx(pv.LCMSE_N_HAT, rel=0.003)

    def test_margins_sum_over_classes(self):
        r = latent_fit(pv.LCMSE_MODEL)
        assert sum(r.report.joint.values()) == pytest.approx(r.report.N_hat, rel=1e-12)
        assert r.fit.class_sizes.sum() == pytest.approx(1.0, abs=1e-12)

    def test_latent_y(self):
        fit = latent_fit(pv.LATENT_Y_MODEL).fit
        assert fit.deviance == pytest.approx(pv.LATENT_Y_DEVIANCE, rel=0.01)
        assert "Y" in fit.secondary

    def test_latent_xy(self):
        fit = latent_fit(pv.LATENT_XY_MODEL).fit
        assert fit.normed_deviance == pytest.approx(pv.LATENT_XY_NORMED, abs=1)

    def test_history_is_monotone(self):
        h = np.array(latent_fit(pv.LCMSE_MODEL).em.history)
        assert np.all(np.diff(h) >= -1e-8 * np.abs(h[1:]))

    def test_n_observed(self):
        assert latent_fit(pv.LCMSE_MODEL).report.n_observed == table("s3").n
