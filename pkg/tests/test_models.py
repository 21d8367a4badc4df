"""Unit tests for data models."""

import numpy as np
import pytest

from dmri_metsc.errors import ParameterError
from dmri_metsc.models import (
    AcquisitionScheme,
    IvimParams,
    ModelKind,
    NoddiParams,
    SparseCode,
    parameter_names,
    to_um2_per_ms,
)


@pytest.mark.unit
class TestModelKind:
    """Tests for ModelKind enum."""

    def test_values(self):
        """Test that ModelKind has expected values."""
        assert ModelKind.IVIM == "ivim"
        assert ModelKind.NODDI == "noddi"

    def test_parameter_names(self):
        """Test parameter names follow map order."""
        assert parameter_names("ivim") == ["f", "D", "Dstar"]
        assert parameter_names(ModelKind.NODDI) == ["v_ic", "v_iso", "od"]


@pytest.mark.unit
class TestAcquisitionScheme:
    """Tests for AcquisitionScheme model."""

    def test_from_bvalues(self):
        """Test building a direction-independent scheme."""
        scheme = AcquisitionScheme.from_bvalues([0, 10, 500])

        assert scheme.n_measurements == 3
        assert scheme.directions.shape == (3, 3)
        assert scheme.b0_mask.tolist() == [True, False, False]

    def test_rejects_mismatched_lengths(self):
        """Test b-value and direction counts must agree."""
        with pytest.raises(ParameterError):
            AcquisitionScheme(np.array([0.0, 1000.0]), np.eye(3))

    def test_rejects_negative_bvalue(self):
        """Test negative b-values are rejected."""
        with pytest.raises(ParameterError):
            AcquisitionScheme.from_bvalues([-5.0, 1000.0])

    def test_rejects_non_unit_direction(self):
        """Test diffusion-weighted rows need unit directions."""
        with pytest.raises(ParameterError, match="unit norm"):
            AcquisitionScheme(np.array([1000.0]), np.array([[1.0, 1.0, 0.0]]))

    def test_b0_rows_may_carry_any_vector(self):
        """Test b=0 rows are exempt from the unit-norm check."""
        scheme = AcquisitionScheme(np.array([0.0, 1000.0]), np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 1.0]]))

        assert scheme.n_measurements == 2

    def test_shells_merge_within_tolerance(self):
        """Test nearby b-values form one shell."""
        scheme = AcquisitionScheme.from_bvalues([0, 995, 1000, 1005, 2000])

        assert scheme.shells() == [995.0, 2000.0]
        assert scheme.shell_index().tolist() == [-1, 0, 0, 0, 1]

    def test_hash_is_stable_and_content_sensitive(self):
        """Test scheme hashes depend only on content."""
        a = AcquisitionScheme.from_bvalues([0, 100, 500])
        b = AcquisitionScheme.from_bvalues([0, 100, 500])
        c = AcquisitionScheme.from_bvalues([0, 100, 600])

        assert a.scheme_hash() == b.scheme_hash()
        assert a.scheme_hash() != c.scheme_hash()
        assert len(a.scheme_hash()) == 16

    def test_subset_keeps_rows(self):
        """Test subset selects measurements in the given order."""
        scheme = AcquisitionScheme.from_bvalues([0, 100, 500])
        sub = scheme.subset(np.array([2, 0]))

        assert sub.bvalues.tolist() == [500.0, 0.0]

    def test_to_dict(self):
        """Test AcquisitionScheme.to_dict() method."""
        data = AcquisitionScheme.from_bvalues([0, 500]).to_dict()

        assert data["bvalues"] == [0.0, 500.0]
        assert data["n_measurements"] == 2
        assert data["shells"] == [500.0]


@pytest.mark.unit
class TestIvimParams:
    """Tests for IvimParams model."""

    def test_validate_accepts_typical_values(self):
        """Test a typical tissue voxel validates."""
        p = IvimParams(f=0.1, D=1e-3, Dstar=20e-3).validate()

        assert p.as_array().tolist() == [0.1, 1e-3, 20e-3]

    def test_f_outside_unit_interval(self):
        """Test f outside [0, 1] is rejected."""
        with pytest.raises(ParameterError):
            IvimParams(f=1.2, D=1e-3, Dstar=20e-3).validate()

    def test_dstar_not_above_d_strict(self):
        """Test Dstar <= D is an error in strict mode."""
        with pytest.raises(ParameterError):
            IvimParams(f=0.1, D=2e-3, Dstar=1e-3).validate(strict=True)

    def test_dstar_not_above_d_lenient(self):
        """Test Dstar <= D only warns outside strict mode."""
        with pytest.warns(RuntimeWarning):
            IvimParams(f=0.1, D=2e-3, Dstar=1e-3).validate(strict=False)

    def test_display_units(self):
        """Test mm^2/s to um^2/ms conversion."""
        assert to_um2_per_ms(1e-3) == pytest.approx(1.0)


@pytest.mark.unit
class TestNoddiParams:
    """Tests for NoddiParams model."""

    def test_od_of_isotropic_watson(self):
        """Test kappa = 0 gives full dispersion."""
        assert NoddiParams(v_ic=0.5, v_iso=0.1, kappa=0.0).od == pytest.approx(1.0)

    def test_rejects_negative_kappa(self):
        """Test bipolar Watson concentrations are rejected."""
        with pytest.raises(ParameterError):
            NoddiParams(v_ic=0.5, v_iso=0.1, kappa=-1.0).validate()

    def test_rejects_non_unit_mu(self):
        """Test the mean orientation must be a unit vector."""
        with pytest.raises(ParameterError):
            NoddiParams(v_ic=0.5, v_iso=0.1, kappa=1.0, mu=[0.0, 0.0, 2.0]).validate()

    def test_to_dict(self):
        """Test NoddiParams.to_dict() method."""
        data = NoddiParams(v_ic=0.5, v_iso=0.1, kappa=1.0).to_dict()

        assert data["mu"] == [0.0, 0.0, 1.0]
        assert data["od"] == pytest.approx(0.5)


@pytest.mark.unit
class TestSparseCode:
    """Tests for SparseCode model."""

    def test_zero_fraction(self):
        """Test the exact-zero fraction."""
        assert SparseCode(np.array([0.0, 1.0, 0.0, 2.0])).zero_fraction == 0.5

    def test_to_dict(self):
        """Test SparseCode.to_dict() method."""
        data = SparseCode(np.array([1.0, 0.0]), iterations=3).to_dict()

        assert data["x"] == [1.0, 0.0]
        assert data["iterations"] == 3
        assert data["converged"] is True
