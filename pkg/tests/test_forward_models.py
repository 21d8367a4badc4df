"""Tests for the IVIM, NODDI and noise forward models."""

import math

import numpy as np
import pytest

from dmri_metsc.errors import ConfigurationError, ParameterError
from dmri_metsc.forward_models import (
    FOUR_PI,
    SphericalQuadrature,
    add_rician_noise,
    hyp1f1_half,
    hyp1f1_half_closed,
    ivim_signal,
    kappa_from_od,
    log_hyp1f1_half,
    noddi_signal,
    orientation_dispersion,
    rician_mean,
    orthonormal_frame,
    stick_spherical_mean,
    watson_weights,
)
from dmri_metsc.models import AcquisitionScheme, IvimParams, NoddiParams


@pytest.mark.unit
class TestIvimSignal:
    """Tests for the bi-exponential model."""

    def test_b0_equals_s0(self, ivim_full_scheme):
        """Test the b=0 signal is S0."""
        signal = ivim_signal(IvimParams(f=0.2, D=1e-3, Dstar=30e-3, S0=250.0), ivim_full_scheme)

        assert signal[0] == pytest.approx(250.0)

    def test_no_perfusion_is_mono_exponential(self, ivim_full_scheme):
        """Test f = 0 reduces to exp(-b D)."""
        signal = ivim_signal(IvimParams(f=0.0, D=1e-3, Dstar=30e-3), ivim_full_scheme)

        np.testing.assert_allclose(signal, np.exp(-ivim_full_scheme.bvalues * 1e-3), rtol=1e-14)

    def test_signal_decreases_with_b(self, ivim_full_scheme):
        """Test the curve is monotone in b."""
        signal = ivim_signal(IvimParams(f=0.3, D=1.5e-3, Dstar=60e-3), ivim_full_scheme)

        assert np.all(np.diff(signal) < 0)

    def test_rejects_dstar_below_d(self, ivim_full_scheme):
        """Test simulation refuses Dstar <= D."""
        with pytest.raises(ParameterError):
            ivim_signal(IvimParams(f=0.1, D=2e-3, Dstar=1e-3), ivim_full_scheme)


@pytest.mark.unit
class TestWatsonNormalizer:
    """Tests for the confluent hypergeometric normalizer."""

    def test_zero_concentration(self):
        """Test M(1/2, 3/2, 0) = 1."""
        assert hyp1f1_half(0.0) == 1.0

    @pytest.mark.parametrize("kappa", [0.5, 2.0, 10.0, 25.0])
    def test_series_matches_closed_form(self, kappa):
        """Test the series and the Dawson closed form agree."""
        assert hyp1f1_half(kappa) == pytest.approx(hyp1f1_half_closed(kappa), rel=1e-10)

    def test_continuous_at_switch(self):
        """Test no jump where the evaluation switches to the closed form."""
        below = hyp1f1_half(30.0)
        above = hyp1f1_half(30.0 + 1e-9)

        assert above == pytest.approx(below, rel=1e-8)

    def test_log_form_handles_huge_kappa(self):
        """Test the log normalizer stays finite where the normalizer itself overflows."""
        value = log_hyp1f1_half(2000.0)

        assert math.isfinite(value)
        assert value == pytest.approx(2000.0 - math.log(2000.0) - math.log(2.0), rel=1e-6)

    def test_negative_kappa(self):
        """Test negative concentrations are rejected."""
        with pytest.raises(ParameterError):
            hyp1f1_half(-0.1)


@pytest.mark.unit
class TestOrientationDispersion:
    """Tests for the kappa / OD mapping."""

    def test_limits(self):
        """Test OD is one for an isotropic distribution and small for high concentration."""
        assert orientation_dispersion(0.0) == pytest.approx(1.0)
        assert orientation_dispersion(1e6) < 1e-5

    @pytest.mark.parametrize("kappa", [0.1, 1.0, 4.0, 64.0])
    def test_inverse(self, kappa):
        """Test kappa_from_od inverts orientation_dispersion."""
        assert kappa_from_od(orientation_dispersion(kappa)) == pytest.approx(kappa, rel=1e-10)

    def test_od_out_of_range(self):
        """Test OD outside (0, 1] is rejected."""
        with pytest.raises(ParameterError):
            kappa_from_od(0.0)


@pytest.mark.unit
class TestQuadrature:
    """Tests for the spherical quadrature."""

    @pytest.mark.parametrize("kappa", [0.0, 1.0, 16.0, 256.0])
    def test_area_weights_sum_to_four_pi(self, kappa):
        """Test the rule integrates a constant exactly."""
        quad = SphericalQuadrature()
        _, area = quad.watson_nodes(np.array([0.0, 0.0, 1.0]), kappa)

        assert area.sum() == pytest.approx(FOUR_PI, rel=1e-12)

    def test_watson_probabilities(self):
        """Test Watson weights are a probability vector concentrated about the axis."""
        mu = np.array([1.0, 0.0, 0.0])
        points, weights = watson_weights(mu, 32.0, SphericalQuadrature())

        assert weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(weights >= 0)
        assert float(weights @ (points @ mu) ** 2) > 0.9

    def test_unnormalized_fixed_rule_rejected(self):
        """Test a fixed rule whose weights do not sum to 4 pi is refused."""
        quad = SphericalQuadrature.fixed(np.eye(3), np.ones(3))

        with pytest.raises(ConfigurationError):
            quad.check_normalized(np.array([0.0, 0.0, 1.0]), 1.0)

    def test_orthonormal_frame(self):
        """Test the frame is a proper rotation whose last row is the fibre axis."""
        v = np.array([1.0, 2.0, -2.0]) / 3.0
        frame = orthonormal_frame(v)

        np.testing.assert_allclose(frame @ frame.T, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(frame @ v, [0.0, 0.0, 1.0], atol=1e-12)
        assert np.linalg.det(frame) == pytest.approx(1.0)


@pytest.mark.unit
class TestNoddiSignal:
    """Tests for the NODDI forward model."""

    def test_b0_is_one(self, small_noddi_scheme):
        """Test every compartment is one at b = 0."""
        signal = noddi_signal(NoddiParams(v_ic=0.6, v_iso=0.1, kappa=4.0), small_noddi_scheme)

        np.testing.assert_allclose(signal[small_noddi_scheme.b0_mask], 1.0, atol=1e-12)
        assert np.all((signal >= 0) & (signal <= 1))

    def test_isotropic_sticks_match_spherical_mean(self, small_noddi_scheme):
        """Test kappa = 0 sticks reproduce the closed-form powder average."""
        p = NoddiParams(v_ic=1.0, v_iso=0.0, kappa=0.0)
        signal = noddi_signal(p, small_noddi_scheme)
        expected = stick_spherical_mean(small_noddi_scheme.bvalues, p.d_par)

        np.testing.assert_allclose(signal, expected, atol=1e-6)

    def test_free_water_only(self, small_noddi_scheme):
        """Test v_iso = 1 gives the isotropic exponential."""
        p = NoddiParams(v_ic=0.5, v_iso=1.0, kappa=4.0)
        signal = noddi_signal(p, small_noddi_scheme)

        np.testing.assert_allclose(signal, np.exp(-small_noddi_scheme.bvalues * p.d_iso), atol=1e-12)

    def test_concentrated_sticks_reach_the_stick_limit(self, small_noddi_scheme):
        """Test kappa = 1e6 with only sticks gives exp(-b d_par (g.mu)^2)."""
        mu = np.array([0.0, 0.6, 0.8])
        p = NoddiParams(v_ic=1.0, v_iso=0.0, kappa=1e6, mu=mu)
        signal = noddi_signal(p, small_noddi_scheme)
        expected = np.exp(-small_noddi_scheme.bvalues * p.d_par * (small_noddi_scheme.directions @ mu) ** 2)

        np.testing.assert_allclose(signal, expected, atol=1e-3)

    def test_refined_quadrature_agrees(self, small_noddi_scheme):
        """Test doubling the quadrature density changes the signal negligibly."""
        p = NoddiParams(v_ic=0.7, v_iso=0.05, kappa=20.0, mu=[0.0, 0.6, 0.8])
        quad = SphericalQuadrature()
        coarse = noddi_signal(p, small_noddi_scheme, quad)
        fine = noddi_signal(p, small_noddi_scheme, quad.refined())

        np.testing.assert_allclose(coarse, fine, atol=1e-6)

    def test_monte_carlo_cross_check(self, small_noddi_scheme):
        """Test the deterministic rule agrees with a large Monte Carlo rule."""
        p = NoddiParams(v_ic=0.5, v_iso=0.1, kappa=2.0)
        exact = noddi_signal(p, small_noddi_scheme)
        sampled = noddi_signal(p, small_noddi_scheme, SphericalQuadrature.monte_carlo(50_000, seed=3))

        np.testing.assert_allclose(sampled, exact, atol=1e-2)

    def test_rotation_invariance(self, small_noddi_scheme):
        """Test rotating fibre and gradients together leaves the signal unchanged."""
        angle = 0.7
        rotation = np.array(
            [[math.cos(angle), -math.sin(angle), 0.0], [math.sin(angle), math.cos(angle), 0.0], [0.0, 0.0, 1.0]]
        )
        mu = np.array([1.0, 0.0, 0.0])
        p = NoddiParams(v_ic=0.6, v_iso=0.1, kappa=8.0, mu=mu)
        rotated = NoddiParams(v_ic=0.6, v_iso=0.1, kappa=8.0, mu=rotation @ mu)
        base = noddi_signal(p, small_noddi_scheme)
        turned = noddi_signal(
            rotated,
            AcquisitionScheme(small_noddi_scheme.bvalues, small_noddi_scheme.directions @ rotation.T),
        )

        np.testing.assert_allclose(turned, base, atol=1e-6)


@pytest.mark.unit
class TestRicianNoise:
    """Tests for Rician noise."""

    def test_reproducible(self):
        """Test equal seeds give equal noise."""
        signal = np.linspace(0.1, 1.0, 50)

        np.testing.assert_array_equal(add_rician_noise(signal, 20.0, 5), add_rician_noise(signal, 20.0, 5))

    def test_non_negative(self):
        """Test magnitude signals are never negative."""
        noisy = add_rician_noise(np.zeros(1000), 5.0, 0)

        assert np.all(noisy >= 0)

    def test_rejects_non_positive_snr(self):
        """Test SNR must be positive."""
        with pytest.raises(ParameterError):
            add_rician_noise(np.ones(3), 0.0)

    def test_sample_mean_matches_analytic_mean(self):
        """Test the noise floor bias matches the analytic Rician mean."""
        noisy = add_rician_noise(np.full(400_000, 0.3), 10.0, np.random.default_rng(11))

        assert noisy.mean() == pytest.approx(rician_mean(0.3, 0.1), abs=1e-3)

    def test_rician_mean_high_snr_limit(self):
        """Test a strong signal has mean close to nu + sigma^2 / (2 nu)."""
        assert rician_mean(1.0, 0.01) == pytest.approx(1.0 + 0.01**2 / 2.0, rel=1e-8)

    def test_rician_mean_of_pure_noise(self):
        """Test a zero signal has mean sigma * sqrt(pi / 2)."""
        assert rician_mean(0.0, 0.2) == pytest.approx(0.2 * math.sqrt(math.pi / 2.0), rel=1e-12)

