"""Data models for diffusion acquisitions and microstructure parameters."""

import hashlib
import warnings
import logging
from dataclasses import dataclass, asdict, field
from enum import Enum
from typing import Dict, List, Optional, Any

import numpy as np

from dmri_metsc.config import Config
from dmri_metsc.errors import ParameterError

logger = logging.getLogger(__name__)

# b-values below this are grouped with b=0 for normalization (s/mm^2)
B0_THRESHOLD = 10.0

# mm^2/s -> um^2/ms
UM2_PER_MS = 1.0e3


class ModelKind(str, Enum):
    """Microstructure model fitted by the toolkit."""

    IVIM = "ivim"
    NODDI = "noddi"


def to_um2_per_ms(value: float) -> float:
    """Convert a diffusivity from mm^2/s to um^2/ms for display."""
    return float(value) * UM2_PER_MS


@dataclass
class AcquisitionScheme:
    """b-values (s/mm^2) and unit gradient directions, one row per measurement."""

    bvalues: np.ndarray
    directions: np.ndarray

    def __post_init__(self) -> None:
        self.bvalues = np.asarray(self.bvalues, dtype=np.float64).reshape(-1)
        dirs = np.asarray(self.directions, dtype=np.float64)
        if dirs.ndim == 1 and dirs.size == 3 and self.bvalues.size != 1:
            dirs = np.tile(dirs, (self.bvalues.size, 1))
        self.directions = dirs.reshape(-1, 3)
        if self.directions.shape[0] != self.bvalues.size:
            raise ParameterError(
                f"scheme has {self.bvalues.size} b-values but {self.directions.shape[0]} directions"
            )
        if np.any(self.bvalues < 0):
            raise ParameterError("b-values must be non-negative")
        norms = np.linalg.norm(self.directions, axis=1)
        weighted = self.bvalues >= B0_THRESHOLD
        bad = weighted & (np.abs(norms - 1.0) > 1e-9)
        if np.any(bad):
            raise ParameterError(
                f"gradient directions must have unit norm; offending rows: {np.flatnonzero(bad).tolist()}"
            )

    @classmethod
    def from_bvalues(cls, bvalues: List[float], direction: Optional[List[float]] = None):
        """Build a direction-independent scheme (IVIM) with one shared direction."""
        direction = direction if direction is not None else [1.0, 0.0, 0.0]
        bvals = np.asarray(bvalues, dtype=np.float64)
        return cls(bvals, np.tile(np.asarray(direction, dtype=np.float64), (bvals.size, 1)))

    @property
    def n_measurements(self) -> int:
        return int(self.bvalues.size)

    @property
    def b0_mask(self) -> np.ndarray:
        """Measurements treated as non-weighted."""
        return self.bvalues < B0_THRESHOLD

    def shells(self, tolerance: float = 50.0) -> List[float]:
        """Distinct diffusion-weighted shell b-values, merged within ``tolerance``."""
        shells: List[float] = []
        for b in np.sort(self.bvalues[~self.b0_mask]):
            if not shells or b - shells[-1] > tolerance:
                shells.append(float(b))
        return shells

    def shell_index(self, tolerance: float = 50.0) -> np.ndarray:
        """Shell number per measurement, -1 for b=0."""
        shells = self.shells(tolerance)
        idx = np.full(self.n_measurements, -1, dtype=np.int64)
        for k, b in enumerate(self.bvalues):
            if b >= B0_THRESHOLD:
                idx[k] = int(np.argmin([abs(b - s) for s in shells]))
        return idx

    def scheme_hash(self) -> str:
        """Stable content hash of the scheme."""
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self.bvalues, dtype="<f8").tobytes())
        digest.update(np.ascontiguousarray(np.round(self.directions, 12), dtype="<f8").tobytes())
        return digest.hexdigest()[:16]

    def subset(self, index: np.ndarray) -> "AcquisitionScheme":
        index = np.asarray(index, dtype=np.int64)
        return AcquisitionScheme(self.bvalues[index], self.directions[index])

    def to_dict(self) -> dict:
        """Convert to dictionary."""
        return {
            "bvalues": self.bvalues.tolist(),
            "directions": self.directions.tolist(),
            "n_measurements": self.n_measurements,
            "shells": self.shells(),
            "hash": self.scheme_hash(),
        }


@dataclass
class IvimParams:
    """Bi-exponential IVIM parameters; diffusivities in mm^2/s."""

    f: float
    D: float
    Dstar: float
    S0: float = 1.0
    # False when an iterative fit stopped on its iteration limit
    converged: bool = True

    def validate(self, strict: bool = True) -> "IvimParams":
        """Check the type invariants.

        With ``strict`` (simulation) ``Dstar <= D`` is an error; otherwise it is only warned.
        """
        if not 0.0 <= self.f <= 1.0:
            raise ParameterError(f"f must lie in [0, 1], got {self.f}")
        if self.D <= 0 or self.Dstar <= 0 or self.S0 <= 0:
            raise ParameterError("D, Dstar and S0 must be positive")
        if self.Dstar <= self.D:
            message = f"Dstar ({self.Dstar}) should exceed D ({self.D})"
            if strict:
                raise ParameterError(message)
            warnings.warn(message, RuntimeWarning, stacklevel=2)
            logger.warning(message)
        return self

    def as_array(self) -> np.ndarray:
        return np.array([self.f, self.D, self.Dstar], dtype=np.float64)

    def to_dict(self) -> dict:
        """Convert to dictionary."""
        return asdict(self)


@dataclass
class NoddiParams:
    """NODDI parameters with fixed diffusivities (mm^2/s)."""

    v_ic: float
    v_iso: float
    kappa: float
    mu: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    d_par: float = field(default_factory=Config.get_default_d_par)
    d_iso: float = field(default_factory=Config.get_default_d_iso)

    def __post_init__(self) -> None:
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(3)

    @property
    def od(self) -> float:
        from dmri_metsc.forward_models import orientation_dispersion

        return orientation_dispersion(self.kappa)

    def validate(self) -> "NoddiParams":
        """Check the type invariants."""
        for name in ("v_ic", "v_iso"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1], got {value}")
        if self.kappa < 0:
            raise ParameterError("kappa must be non-negative (bipolar Watson is not supported)")
        if abs(np.linalg.norm(self.mu) - 1.0) > 1e-9:
            raise ParameterError("mu must be a unit vector")
        if self.d_par <= 0 or self.d_iso <= 0:
            raise ParameterError("diffusivities must be positive")
        return self

    def as_array(self) -> np.ndarray:
        return np.array([self.v_ic, self.v_iso, self.od], dtype=np.float64)

    def to_dict(self) -> dict:
        """Convert to dictionary."""
        data = asdict(self)
        data["mu"] = self.mu.tolist()
        data["od"] = self.od
        return data


@dataclass
class SparseCode:
    """Coefficient vector over dictionary atoms."""

    x: np.ndarray
    normalized: bool = False
    iterations: int = 0
    converged: bool = True

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64).reshape(-1)

    @property
    def zero_fraction(self) -> float:
        return float(np.mean(self.x == 0.0)) if self.x.size else 0.0

    def to_dict(self) -> dict:
        """Convert to dictionary."""
        return {
            "x": self.x.tolist(),
            "normalized": self.normalized,
            "iterations": self.iterations,
            "converged": self.converged,
        }


# Parameter names reported per model, in map order
PARAMETER_NAMES: Dict[ModelKind, List[str]] = {
    ModelKind.IVIM: ["f", "D", "Dstar"],
    ModelKind.NODDI: ["v_ic", "v_iso", "od"],
}


def parameter_names(kind: Any) -> List[str]:
    return PARAMETER_NAMES[ModelKind(kind)]
