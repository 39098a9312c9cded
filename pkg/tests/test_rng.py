import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from memgap.rng import Stream, derive_seed


class TestStreams:
    def test_same_key_same_draws(self):
        assert np.array_equal(Stream(7, "a", 1).raw(100), Stream(7, "a", 1).raw(100))

    def test_distinct_paths_differ(self):
        a = Stream(7, "a").raw(16)
        assert not np.array_equal(a, Stream(7, "b").raw(16))
        assert not np.array_equal(a, Stream(8, "a").raw(16))
        assert not np.array_equal(Stream(7, 1).raw(16), Stream(7, "1").raw(16))

    def test_spawn_matches_full_path(self):
        assert np.array_equal(Stream(3, "x").spawn("y", 2).normal(10), Stream(3, "x", "y", 2).normal(10))

    @given(k=st.integers(1, 50), extra=st.integers(0, 50))
    @settings(max_examples=30, deadline=None)
    def test_prefix_property(self, k, extra):
        short = Stream(11, "p").normal(k)
        long = Stream(11, "p").normal(k + extra)
        assert np.array_equal(short, long[:k])

    def test_bool_ids_rejected(self):
        with pytest.raises(TypeError):
            Stream(0, True)

    def test_derive_seed_is_64_bit_and_stable(self):
        s = derive_seed(5, "stage", "train")
        assert 0 <= s < 2**64
        assert s == derive_seed(5, "stage", "train")
        assert s != derive_seed(5, "stage", "sample")


class TestDistributions:
    def test_uniform_open_interval(self):
        u = Stream(0, "u").uniform(200_000)
        assert u.min() > 0.0 and u.max() < 1.0
        assert stats.kstest(u, "uniform").pvalue > 1e-3

    def test_normal_moments_and_ks(self):
        z = Stream(0, "n").normal(200_000)
        assert abs(z.mean()) < 0.01 and abs(z.var() - 1) < 0.01
        assert stats.kstest(z, "norm").pvalue > 1e-3

    def test_integers_range(self):
        k = Stream(0, "i").integers(5, 100_000)
        assert k.min() == 0 and k.max() == 4
        assert np.all(np.abs(np.bincount(k) / 1e5 - 0.2) < 0.01)

    @pytest.mark.parametrize("a", [0.3, 0.8, 2.0, 7.5])
    def test_gamma_ks(self, a):
        g = Stream(1, "g").gamma(a, 50_000)
        assert stats.kstest(g, stats.gamma(a).cdf).pvalue > 1e-3

    @pytest.mark.parametrize("a,b", [(0.8, 2.0), (1.0, 1.0), (0.3, 3.0)])
    def test_beta_ks(self, a, b):
        x = Stream(2, "b").beta(a, b, 50_000)
        assert np.all((x > 0) & (x < 1))
        assert stats.kstest(x, stats.beta(a, b).cdf).pvalue > 1e-3
