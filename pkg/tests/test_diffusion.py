import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from memgap.diffusion import (
    Dataset,
    DiffusionSchedule,
    DomainError,
    GaussianMixture,
    alpha_sigma,
    diffused_log_density,
    mixture_log_density,
    perturb,
    regenerate,
    sample_mixture,
)


class TestSchedule:
    def test_t_zero(self, sched):
        assert alpha_sigma(sched, 0.0) == (1.0, 0.0)

    def test_t_ln4(self, sched):
        a, s2 = alpha_sigma(sched, math.log(4.0))
        assert a == pytest.approx(0.5, abs=1e-15)
        assert s2 == pytest.approx(0.75, abs=1e-15)

    def test_t_50(self, sched):
        a, s2 = alpha_sigma(sched, 50.0)
        assert a == pytest.approx(math.exp(-25.0), rel=1e-12)
        assert a == pytest.approx(1.39e-11, rel=1e-2)
        assert abs(s2 - 1.0) < 1e-10

    def test_negative_t_raises(self, sched):
        with pytest.raises(DomainError):
            alpha_sigma(sched, -1e-9)

    @given(t=st.floats(0.0, 200.0))
    @settings(max_examples=200, deadline=None)
    def test_pythagorean_identity(self, t):
        a, s2 = alpha_sigma(DiffusionSchedule(), t)
        assert abs(a * a + s2 - 1.0) <= 4e-16
        # sigma2 rounds to exactly 1.0 once exp(-t) drops below half an ulp
        assert 0.0 < a <= 1.0 and 0.0 <= s2 <= 1.0

    @pytest.mark.parametrize("t0,T", [(0.0, 1.0), (1.0, 1.0), (2.0, 1.0)])
    def test_invalid_bounds(self, t0, T):
        with pytest.raises(DomainError):
            DiffusionSchedule(t0, T)

    def test_check_window(self, sched):
        sched.check(1e-3)
        sched.check(5.0)
        with pytest.raises(DomainError):
            sched.check(5e-4)
        with pytest.raises(DomainError):
            sched.check(5.1)


class TestPerturb:
    def test_t_zero_returns_x0(self, sched):
        x0 = np.array([1.5, -2.0])
        assert np.array_equal(perturb(x0, 0.0, np.array([9.0, 9.0]), sched), x0)

    def test_pure_noise(self, sched):
        out = perturb(np.zeros(3), math.log(4.0), np.array([1.0, 0, 0]), sched)
        assert np.allclose(out, [math.sqrt(0.75), 0, 0], atol=1e-15)

    def test_pure_signal(self, sched):
        assert np.allclose(perturb(np.array([1.0, 0]), math.log(4.0), np.zeros(2), sched), [0.5, 0], atol=1e-15)

    def test_zero_fixed_point(self, sched):
        assert np.array_equal(perturb(np.zeros(4), 1.3, np.zeros(4), sched), np.zeros(4))

    def test_affine(self, sched):
        rs = np.random.default_rng(0)
        x, y, z, w = rs.normal(size=(4, 3))
        t = 0.7
        lhs = perturb(2 * x + 3 * y, t, 2 * z + 3 * w, sched)
        rhs = 2 * perturb(x, t, z, sched) + 3 * perturb(y, t, w, sched)
        assert np.allclose(lhs, rhs, atol=1e-13)

    def test_shape_mismatch(self, sched):
        with pytest.raises(DomainError):
            perturb(np.zeros(2), 0.5, np.zeros(3), sched)


class TestMixture:
    def test_validation(self):
        with pytest.raises(ValueError):
            GaussianMixture(np.zeros((2, 2)), [1.0, 0.0])
        with pytest.raises(ValueError):
            GaussianMixture(np.zeros((2, 2)), [1.0, 1.0, 1.0])

    def test_random_means_law(self):
        gm = GaussianMixture.random(4000, 2, seed=3)
        assert abs(gm.means.var() - 4.0) < 0.2
        assert gm.source["kind"] == "random"

    def test_std_normal_at_mode(self):
        gm = GaussianMixture(np.zeros((1, 1)), 1.0)
        assert mixture_log_density(gm, np.zeros(1)) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)

    def test_symmetric_means(self):
        gm = GaussianMixture(np.array([[1.3, -0.4], [-1.3, 0.4]]), [0.7, 1.9])
        x = np.random.default_rng(1).normal(size=(50, 2)) * 3
        assert np.allclose(mixture_log_density(gm, x), mixture_log_density(gm, -x), atol=1e-13)

    def test_scipy_oracle(self):
        gm = GaussianMixture.random(3, 2, seed=5, comp_var=[0.5, 2.0])
        x = np.random.default_rng(2).normal(size=(20, 2)) * 2
        ref = np.log(np.mean([stats.multivariate_normal(m, np.diag(gm.comp_var)).pdf(x) for m in gm.means], axis=0))
        assert np.allclose(mixture_log_density(gm, x), ref, atol=1e-12)

    def test_density_integrates_to_one(self):
        gm = GaussianMixture(np.array([[-1.7], [2.2]]), [0.6])

        def f(x):
            return math.exp(mixture_log_density(gm, np.array([x])))

        total, _ = integrate.quad(f, -30, 30, epsabs=1e-12, epsrel=1e-12, limit=200)
        assert abs(total - 1.0) < 1e-6
        grid = np.linspace(-20, 20, 400_001)
        vals = np.exp(mixture_log_density(gm, grid[:, None]))
        assert abs(np.trapezoid(vals, grid) - 1.0) < 1e-6

    def test_monotone_far_outside(self):
        gm = GaussianMixture.random(3, 2, seed=4)
        direction = np.array([0.6, 0.8])
        r = np.linspace(20, 60, 50)
        vals = mixture_log_density(gm, r[:, None] * direction)
        assert np.all(np.diff(vals) < 0)

    def test_extreme_points_finite(self):
        gm = GaussianMixture.random(2, 2, seed=0)
        assert np.isfinite(mixture_log_density(gm, np.array([1e3, -1e3])))

    def test_diffused_density_is_stationary_for_std_normal(self, sched):
        gm = GaussianMixture(np.zeros((1, 2)), 1.0)
        x = np.random.default_rng(0).normal(size=(10, 2))
        assert np.allclose(diffused_log_density(gm, x, 0.9, sched), mixture_log_density(gm, x), atol=1e-14)

    def test_json_roundtrip(self):
        gm = GaussianMixture.random(3, 2, seed=9, comp_var=[1.0, 2.0])
        back = GaussianMixture.from_dict(json.loads(json.dumps(gm.to_dict())))
        assert np.array_equal(back.means, gm.means) and np.array_equal(back.comp_var, gm.comp_var)


class TestDataset:
    def test_lln(self):
        gm = GaussianMixture(np.zeros((1, 2)), 1.0)
        ds = sample_mixture(gm, 100_000, seed=0)
        assert np.all(np.abs(ds.samples.mean(axis=0)) < 0.02)
        assert np.all(np.abs(ds.samples.var(axis=0) - 1.0) < 0.05)

    def test_single_row(self, gm4):
        ds = sample_mixture(gm4, 1, seed=0)
        assert ds.samples.shape == (1, 2) and ds.labels.shape == (1,)

    def test_deterministic(self, gm4):
        a, b = sample_mixture(gm4, 50, 3), sample_mixture(gm4, 50, 3)
        assert a.samples.tobytes() == b.samples.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_regenerate_bit_identical(self, gm4):
        ds = sample_mixture(gm4, 40, 12)
        again = regenerate(Dataset.from_json(ds.to_json()))
        assert again.samples.tobytes() == ds.samples.tobytes()

    def test_labels_in_range_and_nested(self, gm4):
        big = sample_mixture(gm4, 100, 2)
        small = sample_mixture(gm4, 30, 2)
        assert big.labels.min() >= 0 and big.labels.max() < gm4.K
        assert np.array_equal(big.samples[:30], small.samples)

    def test_component_membership(self):
        gm = GaussianMixture(np.array([[-50.0, 0.0], [50.0, 0.0]]), 1.0)
        ds = sample_mixture(gm, 200, 0)
        assert np.array_equal(ds.samples[:, 0] > 0, ds.labels == 1)

    def test_csv_header(self, data64):
        lines = data64.to_csv().splitlines()
        assert lines[0] == "x0,x1,label"
        assert len(lines) == 65

    def test_immutable(self, data64):
        with pytest.raises(ValueError):
            data64.samples[0, 0] = 1.0

    def test_bad_n(self, gm4):
        with pytest.raises(ValueError):
            sample_mixture(gm4, 0, 0)
