"""Tests for evaluation tools."""

import json

import pytest

from dmri_metsc.data_io import make_phantom, write_phantom
from dmri_metsc.tools import evaluation_tools


@pytest.fixture
def phantom_files(tmp_path):
    """Volume and truth maps of a small IVIM phantom."""
    return write_phantom(tmp_path / "sim", make_phantom("ivim", (3, 3, 1), snr=30.0, seed=4))


@pytest.mark.unit
class TestEvaluationTools:
    """Tests for evaluation tool functions."""

    @pytest.mark.asyncio
    async def test_handle_evaluate_maps_success(self, tmp_path, phantom_files):
        """Test scoring truth against itself gives zero error and writes the report."""
        truth = str(phantom_files["truth"])

        result = await evaluation_tools.handle_evaluate_maps(
            {"pred": truth, "truth": truth, "out": str(tmp_path / "report")}
        )

        response = json.loads(result)
        assert response["success"] is True
        metrics = response["data"]["metrics"]["pred"]
        assert set(metrics) == {"f", "D", "Dstar"}
        assert all(m["mse"] == 0.0 for m in metrics.values())
        assert (tmp_path / "report" / "report.json").exists()

    @pytest.mark.asyncio
    async def test_handle_evaluate_maps_missing_truth(self, phantom_files):
        """Test handle_evaluate_maps without truth."""
        with pytest.raises(ValueError, match="truth is required"):
            await evaluation_tools.handle_evaluate_maps({"pred": str(phantom_files["truth"])})

    @pytest.mark.asyncio
    async def test_handle_evaluate_maps_missing_file(self, tmp_path, phantom_files):
        """Test a missing prediction file is reported as a parse error."""
        response = json.loads(
            await evaluation_tools.handle_evaluate_maps(
                {"pred": str(tmp_path / "nothing.bin"), "truth": str(phantom_files["truth"])}
            )
        )

        assert response["success"] is False
        assert response["error"] == "ParseError"

    @pytest.mark.asyncio
    async def test_handle_audit_sparsity_missing_weights(self, phantom_files):
        """Test handle_audit_sparsity without weights."""
        with pytest.raises(ValueError, match="weights is required"):
            await evaluation_tools.handle_audit_sparsity({"data": str(phantom_files["volume"])})

    @pytest.mark.asyncio
    async def test_handle_audit_sparsity_missing_checkpoint(self, tmp_path, phantom_files):
        """Test an absent checkpoint comes back as an error response."""
        response = json.loads(
            await evaluation_tools.handle_audit_sparsity(
                {"weights": str(tmp_path / "model.bin"), "data": str(phantom_files["volume"])}
            )
        )

        assert response["success"] is False
        assert response["error"] in {"ParseError", "DataError"}
