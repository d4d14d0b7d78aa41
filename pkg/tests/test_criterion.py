from __future__ import annotations

import numpy as np
import pytest
from scipy.integrate import trapezoid

from nfrepop.criterion import (
    FeaturePopulation,
    SignedMeasureGrid,
    boxcar_gaussian_bound,
    boxcar_measure,
    optimal_population,
    represented_function,
    representation_weights,
    sampling_error_bound,
    sampling_error_mc,
    sampling_variance,
    variance_criterion,
)
from nfrepop.errors import ConfigError
from nfrepop.model import FeatureMap


def smooth_measure(n=200):
    return SignedMeasureGrid.from_function(lambda t: np.sin(2 * t) * np.exp(-t**2), -4, 4, n)


def gaussian_V_quadrature(a, height, sigma, n=20001):
    # independent oracle: 2 * int_{1-a}^{1+a} height^2 / rho_N
    t = np.linspace(1 - a, 1 + a, n)
    integrand = height**2 * np.sqrt(2 * np.pi) * sigma * np.exp(t**2 / (2 * sigma**2))
    return 2 * trapezoid(integrand, t)


class TestVariance:
    def test_optimal_equals_squared_mass(self):
        mu = smooth_measure()
        V = variance_criterion(mu, optimal_population(mu))
        assert V == pytest.approx(mu.total_variation() ** 2, rel=1e-12)

    def test_normalized_optimum_is_one(self):
        mu = smooth_measure()
        mu = SignedMeasureGrid(mu.origin, mu.h, mu.values / mu.total_variation())
        assert variance_criterion(mu, optimal_population(mu)) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("sigma", [0.5, 1.0, 2.0])
    def test_lower_bound(self, sigma):
        mu = smooth_measure()
        rho = FeaturePopulation.gaussian(mu, sigma)
        assert variance_criterion(mu, rho) >= mu.total_variation() ** 2

    def test_uniform_measure(self):
        mu = SignedMeasureGrid.from_function(lambda t: np.full_like(t, 3.0), 0.0, 1.0, 50)
        rho = optimal_population(mu)
        np.testing.assert_allclose(rho.rho, 1.0, rtol=1e-12)
        assert rho.C == pytest.approx(3.0)

    def test_sign_flip(self):
        mu = smooth_measure()
        neg = SignedMeasureGrid(mu.origin, mu.h, -mu.values)
        np.testing.assert_array_equal(optimal_population(mu).rho, optimal_population(neg).rho)

    def test_moving_mass_off_support_increases_V(self):
        mu = smooth_measure()
        rho = optimal_population(mu)
        vals = rho.rho.copy()
        dead = np.abs(mu.values) < 1e-6
        vals[dead] += 0.01
        vals /= vals.sum() * mu.h
        worse = FeaturePopulation(mu.origin, mu.h, vals)
        assert variance_criterion(mu, worse) > variance_criterion(mu, rho)

    def test_uncovered_mass_is_infinite(self):
        mu = smooth_measure()
        vals = optimal_population(mu).rho.copy()
        vals[mu.values > 0] = 0.0
        assert variance_criterion(mu, FeaturePopulation(mu.origin, mu.h, vals), check=False) == np.inf

    def test_weights_zero_below_floor(self):
        mu = SignedMeasureGrid(0.0, 1.0, [1.0, 0.0])
        omega, live = representation_weights(mu, FeaturePopulation(0.0, 1.0, [1.0, 0.0]))
        np.testing.assert_array_equal(omega, [1.0, 0.0])
        np.testing.assert_array_equal(live, [True, False])

    def test_layout_mismatch(self):
        mu = smooth_measure()
        with pytest.raises(ValueError):
            variance_criterion(mu, FeaturePopulation(mu.origin + 0.1, mu.h, np.ones(mu.n)))

    def test_zero_measure(self):
        with pytest.raises(ValueError):
            optimal_population(SignedMeasureGrid(0.0, 1.0, np.zeros(4)))

    def test_negative_population(self):
        with pytest.raises(ValueError):
            FeaturePopulation(0.0, 1.0, [0.5, -0.1])

    def test_validate_mass(self):
        with pytest.raises(ValueError):
            FeaturePopulation(0.0, 1.0, [0.5, 0.1]).validate()


class TestBoxcar:
    @pytest.mark.parametrize("a", [0.05, 0.1, 0.2])
    def test_unit_mass_and_support(self, a):
        mu = boxcar_measure(a)
        assert mu.total_variation() == pytest.approx(1.0, abs=1e-12)
        assert np.count_nonzero(mu.values) * mu.h == pytest.approx(4 * a, abs=1e-12)

    def test_symmetric(self):
        mu = boxcar_measure(0.1)
        np.testing.assert_array_equal(mu.values, mu.values[::-1])
        np.testing.assert_allclose(mu.theta, -mu.theta[::-1], atol=1e-12)

    @pytest.mark.parametrize("a", [0.05, 0.1, 0.2])
    def test_optimal_V(self, a):
        mu = boxcar_measure(a)
        rho = optimal_population(mu)
        np.testing.assert_allclose(rho.rho[mu.values > 0], 1 / (4 * a), rtol=1e-12)
        assert variance_criterion(mu, rho) == pytest.approx(1.0, abs=1e-6)

    def test_half_height_variant(self):
        a = 0.1
        mu = boxcar_measure(a, height=1 / (2 * a))
        assert mu.total_variation() == pytest.approx(2.0)
        assert variance_criterion(mu, optimal_population(mu)) == pytest.approx(4.0, abs=1e-6)

    @pytest.mark.parametrize("sigma", [0.5, 1.0, 2.0, 4.0])
    @pytest.mark.parametrize("height", ["unit", "half"])
    def test_gaussian_V_matches_quadrature(self, sigma, height):
        a = 0.1
        H = 1 / (4 * a) if height == "unit" else 1 / (2 * a)
        mu = boxcar_measure(a, height=H)
        V = variance_criterion(mu, FeaturePopulation.gaussian(mu, sigma))
        assert V == pytest.approx(gaussian_V_quadrature(a, H, sigma), rel=1e-4)

    def test_sigma_scan_minimizer_is_one(self):
        # the closed-form minimizer of sigma * exp(1 / (2 sigma^2)) is sigma = 1, not 2
        mu = boxcar_measure(0.1)
        sigmas = np.linspace(0.5, 3.0, 251)
        V = [variance_criterion(mu, FeaturePopulation.gaussian(mu, s)) for s in sigmas]
        assert sigmas[int(np.argmin(V))] == pytest.approx(1.0, abs=0.02)

    @pytest.mark.parametrize("a", [0.05, 0.1, 0.2])
    def test_bound_holds_for_half_height(self, a):
        mu = boxcar_measure(a, height=1 / (2 * a))
        bound = boxcar_gaussian_bound(a)
        for sigma in (0.5, 1.0, 2.0, 4.0):
            assert variance_criterion(mu, FeaturePopulation.gaussian(mu, sigma)) >= bound

    def test_bound_value(self):
        assert boxcar_gaussian_bound(0.1) == pytest.approx(41.3273, abs=1e-4)

    @pytest.mark.parametrize("a", [0.0, 1.0, -0.2, 1.5])
    def test_bad_width(self, a):
        with pytest.raises(ConfigError):
            boxcar_measure(a)

    def test_too_coarse(self):
        with pytest.raises(ConfigError):
            boxcar_measure(0.1, cells_per_box=10)


class TestSamplingError:
    def test_formula(self):
        assert sampling_error_bound(1.0, 1.0, 10) == pytest.approx(0.1)

    def test_halves_with_m(self):
        assert sampling_error_bound(3.0, 2.0, 40) == pytest.approx(sampling_error_bound(3.0, 2.0, 20) / 2)

    @pytest.mark.parametrize("args", [(0.0, 1.0, 1), (1.0, 0.0, 1), (1.0, 1.0, 0)])
    def test_positive(self, args):
        with pytest.raises(ValueError):
            sampling_error_bound(*args)

    @pytest.fixture
    def setup(self):
        X = np.random.default_rng(0).standard_normal((200, 1))
        mu = SignedMeasureGrid.from_function(lambda t: np.sin(2 * t) * np.exp(-t**2), -4, 4, 120)
        return mu, optimal_population(mu), FeatureMap("tanh", normalized=True), X

    def test_mc_matches_exact(self, setup):
        mu, rho, fm, X = setup
        mean, se, errs = sampling_error_mc(mu, rho, fm, X, m=100, n_rep=400, seed=1)
        exact = sampling_variance(mu, rho, fm, X, m=100)
        assert errs.shape == (400,)
        assert abs(mean - exact) <= 3 * se

    def test_mc_below_bound(self, setup):
        mu, rho, fm, X = setup
        mean, se, _ = sampling_error_mc(mu, rho, fm, X, m=100, n_rep=30, seed=2)
        bound = sampling_error_bound(variance_criterion(mu, rho), 1.0, 100)
        assert mean <= bound + 3 * se

    def test_represented_function_linear(self, setup):
        mu, _, fm, X = setup
        f = represented_function(mu, fm, X)
        g = represented_function(SignedMeasureGrid(mu.origin, mu.h, 2 * mu.values), fm, X)
        np.testing.assert_allclose(g, 2 * f, rtol=1e-12)
