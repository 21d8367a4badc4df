"""Shared pytest fixtures for dmri-metsc tests."""

from typing import Callable

import numpy as np
import pytest

from dmri_metsc.data_io import hcp_like_scheme, ivim_scheme
from dmri_metsc.models import AcquisitionScheme
from dmri_metsc.sparse_dict import (
    IvimDictionary,
    NoddiDictionary,
    build_ivim_dictionary,
    build_noddi_dictionary,
)


@pytest.fixture
def ivim_full_scheme() -> AcquisitionScheme:
    """The ten-b-value IVIM acquisition."""
    return ivim_scheme()


@pytest.fixture
def small_noddi_scheme() -> AcquisitionScheme:
    """Two shells with 20 directions each plus two b=0 measurements."""
    return hcp_like_scheme(shells=(1000.0, 2000.0), n_dirs=20, n_b0=2)


@pytest.fixture
def ivim_dictionary(ivim_full_scheme) -> IvimDictionary:
    """Small IVIM dictionary (2 x 20 atoms)."""
    return build_ivim_dictionary(ivim_full_scheme, j=20)


@pytest.fixture
def noddi_dictionary(small_noddi_scheme) -> NoddiDictionary:
    """Small NODDI dictionary (4 v_ic x 4 kappa + 1 isotropic atom)."""
    return build_noddi_dictionary(small_noddi_scheme, j_vic=4, j_kappa=4)


@pytest.fixture
def numeric_gradient() -> Callable:
    """Central finite-difference gradient of a scalar function of an array."""

    def gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
        x = np.array(x, dtype=np.float64)
        grad = np.zeros_like(x)
        for idx in np.ndindex(*x.shape):
            up = x.copy()
            down = x.copy()
            up[idx] += eps
            down[idx] -= eps
            grad[idx] = (fn(up) - fn(down)) / (2.0 * eps)
        return grad

    return gradient


@pytest.fixture
def output_dir(tmp_path, monkeypatch):
    """Point the default output directory at a temporary path."""
    out = tmp_path / "out"
    monkeypatch.setattr("dmri_metsc.config.Config.METSC_OUTPUT_DIR", str(out))
    return out
