import math

import numpy as np
import pytest

import targets as pv
from conftest import table
from mselink.bootstrap import (
    BootstrapConfig,
    BootstrapError,
    percentile_interval,
    replicate_rng,
    resample,
    run,
    summary,
)
from mselink.latent import LatentSpec
from mselink.sim import SimSpec, generate


@pytest.fixture(scope="module")
def small():
    t, truth = generate(SimSpec(20_000, 0.2, {"A": 0.7, "C": 0.6}, item_missing={"A": 0.02}, seed=11))
    return t, truth


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(replicates=0), dict(level=1.0), dict(level=0), dict(seed=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            BootstrapConfig(**kw)


class TestPercentiles:
    def test_rank_rule(self):
        v = np.arange(1, 2001, dtype=float)[::-1]
        assert percentile_interval(v, 0.95) == (50.0, 1950.0)

    def test_small_r(self):
        assert percentile_interval(np.array([3.0, 1.0, 2.0]), 0.5) == (1.0, 3.0)

    def test_single_value(self):
        assert percentile_interval(np.array([7.0]), 0.95) == (7.0, 7.0)

    def test_empty(self):
        with pytest.raises(BootstrapError):
            percentile_interval(np.array([]), 0.95)


class TestResample:
    def test_total_is_rounded_estimate(self, small):
        t, _ = small
        for i, n_un in enumerate([1234.4, 1234.5, 1235.5, 0]):
            rng = replicate_rng(0, i)
            weights = np.append(t.counts, n_un)
            size = int(np.rint(weights.sum()))
            draw = np.asarray(rng.multinomial(size, weights / weights.sum()))
            again = resample(t, n_un, replicate_rng(0, i))
            assert again.n == draw[:-1].sum()
            assert draw.sum() == size

    def test_patterns_unchanged(self, small):
        t, _ = small
        r = resample(t, 500.0, replicate_rng(3, 0))
        assert np.array_equal(r.patterns, t.patterns)

    def test_streams_are_independent_of_order(self):
        a = [replicate_rng(9, i).random() for i in range(5)]
        b = [replicate_rng(9, i).random() for i in reversed(range(5))][::-1]
        assert a == b


class TestRun:
    def test_same_seed_same_result(self, small):
        t, _ = small
        a = run(t, "[Ac][ac][Ca]", BootstrapConfig(replicates=30, seed=4))
        b = run(t, "[Ac][ac][Ca]", BootstrapConfig(replicates=30, seed=4))
        for k in a.values:
            assert np.array_equal(a.values[k], b.values[k])
        assert summary(a) == summary(b)

    def test_different_seed_differs(self, small):
        t, _ = small
        a = run(t, "[Ac][ac][Ca]", BootstrapConfig(replicates=10, seed=4, statistics=("N_hat",)))
        b = run(t, "[Ac][ac][Ca]", BootstrapConfig(replicates=10, seed=5, statistics=("N_hat",)))
        assert not np.array_equal(a.values["N_hat"], b.values["N_hat"])

    def test_parallel_equals_serial(self, small):
        t, _ = small
        cfg = BootstrapConfig(replicates=12, seed=2, statistics=("N_hat", "A_maori"))
        a = run(t, "[Ac][ac][Ca]", cfg)
        b = run(t, "[Ac][ac][Ca]", cfg, workers=2)
        assert summary(a) == summary(b)

    def test_one_replicate_is_degenerate(self, small):
        t, _ = small
        r = run(t, "[Ac][ac][Ca]", BootstrapConfig(replicates=1, seed=0, statistics=("N_hat",)))
        iv = r.intervals["N_hat"]
        assert iv.lower == iv.upper == r.values["N_hat"][0]

    def test_unknown_statistic(self, small):
        t, _ = small
        with pytest.raises(ValueError, match="unknown statistics"):
            run(t, "[Ac][ac][Ca]", BootstrapConfig(replicates=1, statistics=("bogus",)))

    def test_metadata(self, small):
        t, _ = small
        r = run(t, "[Ac][ac][Ca]", BootstrapConfig(replicates=5, seed=1))
        s = summary(r)
        assert s["converged"] == 5 and s["failed"] == 0 and not s["degraded"]
        assert "ceil" in s["rank_rule"]
        assert set(r.intervals) >= {"N_hat", "n_unobserved", "A_maori", "C_non_maori"}

    def test_progress_callback(self, small):
        t, _ = small
        seen = []
        run(t, "[Ac][ac][Ca]", BootstrapConfig(replicates=3, statistics=("N_hat",)), progress=seen.append)
        assert seen == [1, 2, 3]

    def test_latent_model_refits(self):
        t = table("s3")
        r = run(t, LatentSpec.lcmse(t), BootstrapConfig(replicates=2, seed=1, statistics=("N_hat", "class_2_size")))
        assert r.converged == 2
        assert np.all(np.abs(r.values["class_2_size"] - 0.166) < 0.01)

    def test_two_register_smoke(self):
        r = run(table("s1"), pv.S1_MODEL, BootstrapConfig(replicates=200, seed=42, statistics=("N_hat",)))
        iv = r.intervals["N_hat"]
        assert iv.lower < pv.S1_N_HAT < iv.upper


@pytest.mark.slow
def test_coverage_on_synthetic_worlds():
    """Empirical coverage of the 95% interval over 200 simulated worlds."""
    hits = 0
    worlds = 200
    for w in range(worlds):
        t, truth = generate(SimSpec(5_000, 0.2, {"A": 0.7, "C": 0.6}, seed=1_000 + w))
        r = run(t, "[Ac][ac][Ca]", BootstrapConfig(replicates=100, seed=w, statistics=("N_hat",)))
        iv = r.intervals["N_hat"]
        hits += iv.lower <= truth.N_true <= iv.upper
    assert 0.88 <= hits / worlds <= 0.99
