"""Dictionaries that linearize IVIM and NODDI, and the maps from sparse codes to parameters.

IVIM atoms are ``[Phi_D | Phi_D*]``: one mono-exponential column per tissue diffusivity,
then one per pseudo-diffusivity. NODDI atoms are ``[Phi_t | Phi_i]``: one column per
``(v_ic, kappa)`` pair at a fixed response orientation, then the isotropic columns.
Parameters are read back as block sums and block barycenters of the normalized code.
"""

import hashlib
import json
import logging
import threading
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
from scipy.interpolate import CubicSpline

from dmri_metsc.config import Config
from dmri_metsc.errors import ConfigurationError, DataError, ParseError, SchemeMismatchError
from dmri_metsc.forward_models import (
    SphericalQuadrature,
    watson_stick_signal,
    watson_weights,
    watson_zeppelin_signal,
)
from dmri_metsc.models import AcquisitionScheme, IvimParams, ModelKind, NoddiParams, SparseCode

logger = logging.getLogger(__name__)

TAU = 1e-10
_Z_AXIS = np.array([0.0, 0.0, 1.0])
_LUT_NODES = 513

DEFAULT_D_RANGE = (0.1e-3, 2.9e-3)
DEFAULT_DSTAR_RANGE = (3e-3, 100e-3)
DEFAULT_VIC_RANGE = (0.05, 0.95)
DEFAULT_KAPPA_RANGE = (0.05, 64.0)


def _check_increasing(name: str, grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64).reshape(-1)
    if grid.size == 0:
        raise ConfigurationError(f"{name} must not be empty")
    if np.any(np.diff(grid) <= 0):
        raise ConfigurationError(f"{name} must be strictly increasing")
    return grid


def _hash_array(*arrays: np.ndarray) -> str:
    digest = hashlib.sha256()
    for array in arrays:
        digest.update(np.ascontiguousarray(array, dtype="<f8").tobytes())
    return digest.hexdigest()[:16]


@dataclass
class IvimDictionary:
    """Mono-exponential atoms over a tissue grid and a pseudo-diffusion grid."""

    d_grid: np.ndarray
    dstar_grid: np.ndarray
    atoms: np.ndarray
    scheme: AcquisitionScheme

    kind = "ivim"

    @property
    def j(self) -> int:
        return int(self.d_grid.size)

    @property
    def n_atoms(self) -> int:
        return int(self.atoms.shape[1])

    @property
    def tissue_block(self) -> slice:
        return slice(0, self.d_grid.size)

    @property
    def perfusion_block(self) -> slice:
        return slice(self.d_grid.size, self.n_atoms)

    def dictionary_hash(self) -> str:
        return _hash_array(self.atoms, self.d_grid, self.dstar_grid)

    def to_dict(self) -> dict:
        """Convert to dictionary (metadata only, atoms excluded)."""
        return {
            "kind": self.kind,
            "d_grid": self.d_grid.tolist(),
            "dstar_grid": self.dstar_grid.tolist(),
            "shape": list(self.atoms.shape),
            "scheme": self.scheme.to_dict(),
            "dictionary_hash": self.dictionary_hash(),
        }


def build_ivim_dictionary(
    scheme: AcquisitionScheme,
    j: int = 300,
    d_range: Tuple[float, float] = DEFAULT_D_RANGE,
    dstar_range: Tuple[float, float] = DEFAULT_DSTAR_RANGE,
    d_grid: Optional[np.ndarray] = None,
    dstar_grid: Optional[np.ndarray] = None,
) -> IvimDictionary:
    """Build the IVIM dictionary: linear D grid, log-spaced D* grid, 2j columns."""
    if d_grid is None:
        if j < 1:
            raise ConfigurationError(f"j must be at least 1, got {j}")
        d_grid = np.linspace(d_range[0], d_range[1], j)
    if dstar_grid is None:
        dstar_grid = np.geomspace(dstar_range[0], dstar_range[1], len(d_grid))
    d_grid = _check_increasing("d_grid", d_grid)
    dstar_grid = _check_increasing("dstar_grid", dstar_grid)
    if d_grid[0] <= 0 or dstar_grid[0] <= 0:
        raise ConfigurationError("diffusivity grids must be positive")
    if d_grid[-1] >= dstar_grid[0]:
        raise ConfigurationError(
            f"tissue and pseudo-diffusion ranges overlap (max D {d_grid[-1]:.3g} >= "
            f"min D* {dstar_grid[0]:.3g}); atoms would be ambiguous"
        )
    grid = np.concatenate([d_grid, dstar_grid])
    atoms = np.exp(-np.outer(scheme.bvalues, grid))
    dictionary = IvimDictionary(d_grid, dstar_grid, atoms, scheme)
    logger.info("Built IVIM dictionary %s (%s)", atoms.shape, dictionary.dictionary_hash())
    return dictionary


def normalize_rows(x: np.ndarray, tau: float = TAU) -> np.ndarray:
    """Row-wise (x + tau) / ||x + tau||_1; keeps the input shape."""
    shifted = np.asarray(x, dtype=np.float64) + tau
    return shifted / shifted.sum(axis=-1, keepdims=True)


def normalize_code(x: np.ndarray, tau: float = TAU) -> SparseCode:
    """(x + tau) / ||x + tau||_1, entries non-negative and summing to one."""
    return SparseCode(normalize_rows(np.asarray(x, dtype=np.float64).reshape(-1), tau), normalized=True)


def _normalized(code: Union[SparseCode, np.ndarray]) -> np.ndarray:
    if isinstance(code, SparseCode):
        return code.x if code.normalized else normalize_code(code.x).x
    return normalize_code(np.clip(np.asarray(code, dtype=np.float64), 0.0, None)).x


def extract_ivim_batch(codes: np.ndarray, dictionary: IvimDictionary) -> Dict[str, np.ndarray]:
    """Vectorized :func:`extract_ivim` over rows of ``codes``."""
    x = normalize_rows(np.clip(np.atleast_2d(codes), 0.0, None))
    tissue = x[:, dictionary.tissue_block]
    perfusion = x[:, dictionary.perfusion_block]
    tissue_mass = tissue.sum(axis=1)
    perfusion_mass = perfusion.sum(axis=1)
    return {
        "f": perfusion_mass,
        "D": tissue @ dictionary.d_grid / tissue_mass,
        "Dstar": perfusion @ dictionary.dstar_grid / perfusion_mass,
    }


def extract_ivim(code: Union[SparseCode, np.ndarray], dictionary: IvimDictionary) -> IvimParams:
    """f as the D*-block mass, D and D* as block barycenters of the grid values."""
    x = _normalized(code)
    tissue = x[dictionary.tissue_block]
    perfusion = x[dictionary.perfusion_block]
    return IvimParams(
        f=float(np.clip(perfusion.sum(), 0.0, 1.0)),
        D=float(tissue @ dictionary.d_grid / tissue.sum()),
        Dstar=float(perfusion @ dictionary.dstar_grid / perfusion.sum()),
    )


@dataclass
class _StickLut:
    """Per-shell cubic splines of stick atoms against |cos(angle to the fibre)|."""

    shell_bvalues: np.ndarray
    splines: list


@dataclass
class NoddiDictionary:
    """Watson-dispersed stick/zeppelin atoms at a fixed orientation plus isotropic atoms."""

    vic_grid: np.ndarray
    kappa_grid: np.ndarray
    iso_grid: np.ndarray
    atom_vic: np.ndarray
    atom_kappa: np.ndarray
    atoms: np.ndarray
    scheme: AcquisitionScheme
    response_orientation: np.ndarray = field(default_factory=lambda: _Z_AXIS.copy())
    d_par: float = field(default_factory=Config.get_default_d_par)
    quad: SphericalQuadrature = field(default_factory=SphericalQuadrature)
    _lut: Optional[_StickLut] = field(default=None, repr=False)
    _scatter_zz: Optional[np.ndarray] = field(default=None, repr=False)
    _lut_lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False, compare=False)

    kind = "noddi"

    @property
    def n_aniso(self) -> int:
        return int(self.atom_vic.size)

    @property
    def n_atoms(self) -> int:
        return int(self.atoms.shape[1])

    @property
    def aniso_block(self) -> slice:
        return slice(0, self.n_aniso)

    @property
    def iso_block(self) -> slice:
        return slice(self.n_aniso, self.n_atoms)

    def dictionary_hash(self) -> str:
        return _hash_array(self.atoms, self.vic_grid, self.kappa_grid, self.iso_grid)

    def _build_lut(self) -> None:
        cos_nodes = np.linspace(0.0, 1.0, _LUT_NODES)
        sin_nodes = np.sqrt(1.0 - cos_nodes**2)
        node_dirs = np.stack([sin_nodes, np.zeros_like(cos_nodes), cos_nodes], axis=1)
        weighted = ~self.scheme.b0_mask
        shell_b = np.unique(self.scheme.bvalues[weighted])
        splines = []
        scatter_zz = np.empty(self.kappa_grid.size)
        for k, kappa in enumerate(self.kappa_grid):
            points, weights = watson_weights(_Z_AXIS, kappa, self.quad)
            scatter_zz[k] = float(weights @ points[:, 2] ** 2)
            per_shell = []
            for b in shell_b:
                values = watson_stick_signal(
                    np.full(_LUT_NODES, b), node_dirs, points, weights, self.d_par
                )
                per_shell.append(CubicSpline(cos_nodes, values))
            splines.append(per_shell)
        self._lut = _StickLut(shell_b, splines)
        self._scatter_zz = scatter_zz

    def atoms_for(self, orientation: np.ndarray) -> np.ndarray:
        """Atoms with the anisotropic response rotated onto ``orientation``."""
        orientation = np.asarray(orientation, dtype=np.float64)
        orientation = orientation / np.linalg.norm(orientation)
        with self._lut_lock:
            if self._lut is None:
                self._build_lut()
        lut, scatter_zz = self._lut, self._scatter_zz
        b = self.scheme.bvalues
        cos = np.abs(self.scheme.directions @ orientation)
        sin2 = 1.0 - cos**2
        out = np.ones_like(self.atoms)
        weighted = np.flatnonzero(~self.scheme.b0_mask)
        shell_of = np.searchsorted(lut.shell_bvalues, b[weighted])
        col = 0
        for k in range(self.kappa_grid.size):
            stick = np.empty(weighted.size)
            for s, b_shell in enumerate(lut.shell_bvalues):
                rows = shell_of == s
                stick[rows] = lut.splines[k][s](cos[weighted][rows])
            # Watson scatter about the axis is diag(a, a, c) with a = (1 - c) / 2
            c = scatter_zz[k]
            proj = (1.0 - c) / 2.0 * sin2[weighted] + c * cos[weighted] ** 2
            for v_ic in self.vic_grid:
                d_perp = self.d_par * (1.0 - v_ic)
                zeppelin = np.exp(-b[weighted] * (d_perp + (self.d_par - d_perp) * proj))
                out[weighted, col] = v_ic * stick + (1.0 - v_ic) * zeppelin
                col += 1
        out[:, self.iso_block] = self.atoms[:, self.iso_block]
        return out

    def to_dict(self) -> dict:
        """Convert to dictionary (metadata only, atoms excluded)."""
        return {
            "kind": self.kind,
            "vic_grid": self.vic_grid.tolist(),
            "kappa_grid": self.kappa_grid.tolist(),
            "iso_grid": self.iso_grid.tolist(),
            "response_orientation": self.response_orientation.tolist(),
            "d_par": self.d_par,
            "quadrature": {"n_polar": self.quad.n_polar, "n_azimuth": self.quad.n_azimuth},
            "shape": list(self.atoms.shape),
            "scheme": self.scheme.to_dict(),
            "dictionary_hash": self.dictionary_hash(),
        }


def build_noddi_dictionary(
    scheme: AcquisitionScheme,
    j_vic: int = 12,
    j_kappa: int = 12,
    i: int = 1,
    response_orientation: Optional[np.ndarray] = None,
    vic_grid: Optional[np.ndarray] = None,
    kappa_grid: Optional[np.ndarray] = None,
    d_par: Optional[float] = None,
    d_iso: Optional[float] = None,
    quad: Optional[SphericalQuadrature] = None,
    stick_limit: bool = False,
) -> NoddiDictionary:
    """Build the NODDI dictionary over the (v_ic, kappa) product grid plus isotropic atoms.

    ``stick_limit`` appends v_ic = 1 to the grid so pure-stick voxels have atoms of their own.
    """
    d_par = d_par if d_par is not None else Config.get_default_d_par()
    d_iso = d_iso if d_iso is not None else Config.get_default_d_iso()
    quad = quad or SphericalQuadrature()
    orientation = np.asarray(
        response_orientation if response_orientation is not None else _Z_AXIS, dtype=np.float64
    )
    orientation = orientation / np.linalg.norm(orientation)
    if vic_grid is None:
        vic_grid = np.linspace(*DEFAULT_VIC_RANGE, j_vic)
    if stick_limit and vic_grid[-1] < 1.0:
        vic_grid = np.append(vic_grid, 1.0)
    if kappa_grid is None:
        kappa_grid = np.geomspace(*DEFAULT_KAPPA_RANGE, j_kappa)
    vic_grid = _check_increasing("vic_grid", vic_grid)
    kappa_grid = _check_increasing("kappa_grid", kappa_grid)
    if i < 1:
        raise ConfigurationError("at least one isotropic atom is required")
    iso_grid = d_iso * np.linspace(1.0 / i, 1.0, i)
    if len(scheme.shells()) < 2:
        message = "single-shell scheme: the isotropic fraction is poorly conditioned"
        warnings.warn(message, RuntimeWarning, stacklevel=2)
        logger.warning(message)

    b = scheme.bvalues
    columns = []
    atom_vic, atom_kappa = [], []
    for kappa in kappa_grid:
        points, weights = watson_weights(orientation, kappa, quad)
        stick = watson_stick_signal(b, scheme.directions, points, weights, d_par)
        for v_ic in vic_grid:
            d_perp = d_par * (1.0 - v_ic)
            zeppelin = watson_zeppelin_signal(b, scheme.directions, points, weights, d_par, d_perp)
            columns.append(v_ic * stick + (1.0 - v_ic) * zeppelin)
            atom_vic.append(v_ic)
            atom_kappa.append(kappa)
    for d in iso_grid:
        columns.append(np.exp(-b * d))
    atoms = np.stack(columns, axis=1)
    dictionary = NoddiDictionary(
        vic_grid=vic_grid,
        kappa_grid=kappa_grid,
        iso_grid=iso_grid,
        atom_vic=np.asarray(atom_vic),
        atom_kappa=np.asarray(atom_kappa),
        atoms=atoms,
        scheme=scheme,
        response_orientation=orientation,
        d_par=d_par,
        quad=quad,
    )
    logger.info("Built NODDI dictionary %s (%s)", atoms.shape, dictionary.dictionary_hash())
    return dictionary


def extract_noddi_batch(codes: np.ndarray, dictionary: NoddiDictionary) -> Dict[str, np.ndarray]:
    """Vectorized :func:`extract_noddi` over rows of ``codes``."""
    x = normalize_rows(np.clip(np.atleast_2d(codes), 0.0, None))
    aniso = x[:, dictionary.aniso_block]
    aniso_mass = aniso.sum(axis=1)
    kappa = aniso @ dictionary.atom_kappa / aniso_mass
    return {
        "v_ic": aniso @ dictionary.atom_vic / aniso_mass,
        "v_iso": x[:, dictionary.iso_block].sum(axis=1),
        "od": 2.0 / np.pi * np.arctan2(1.0, kappa),
        "kappa": kappa,
    }


def extract_noddi(code: Union[SparseCode, np.ndarray], dictionary: NoddiDictionary) -> NoddiParams:
    """v_iso as the isotropic mass; v_ic and kappa as barycenters of the anisotropic block."""
    x = _normalized(code)
    aniso = x[dictionary.aniso_block]
    aniso = aniso / aniso.sum()
    return NoddiParams(
        v_ic=float(np.clip(aniso @ dictionary.atom_vic, 0.0, 1.0)),
        v_iso=float(np.clip(x[dictionary.iso_block].sum(), 0.0, 1.0)),
        kappa=float(aniso @ dictionary.atom_kappa),
        mu=dictionary.response_orientation,
        d_par=dictionary.d_par,
        d_iso=float(dictionary.iso_grid[-1]),
    )


def principal_direction(signal: np.ndarray, scheme: AcquisitionScheme, target_b: float = 1000.0):
    """Fibre orientation from a tensor fit of the shell closest to ``target_b``.

    Fits ``-log(S/S0)/b = g^T D g`` by linear least squares and returns the eigenvector of
    the largest eigenvalue of D.
    """
    signal = np.asarray(signal, dtype=np.float64)
    shells = scheme.shells()
    if not shells:
        return _Z_AXIS.copy()
    shell = min(shells, key=lambda s: abs(s - target_b))
    rows = np.abs(scheme.bvalues - shell) <= 50.0
    s0 = signal[scheme.b0_mask].mean() if np.any(scheme.b0_mask) else 1.0
    g = scheme.directions[rows]
    ratio = np.clip(signal[rows] / max(s0, 1e-12), 1e-6, None)
    adc = -np.log(ratio) / scheme.bvalues[rows]
    design = np.stack(
        [g[:, 0] ** 2, g[:, 1] ** 2, g[:, 2] ** 2, 2 * g[:, 0] * g[:, 1], 2 * g[:, 0] * g[:, 2],
         2 * g[:, 1] * g[:, 2]],
        axis=1,
    )
    coef, *_ = np.linalg.lstsq(design, adc, rcond=None)
    tensor = np.array(
        [[coef[0], coef[3], coef[4]], [coef[3], coef[1], coef[5]], [coef[4], coef[5], coef[2]]]
    )
    eigvals, eigvecs = np.linalg.eigh(tensor)
    direction = eigvecs[:, int(np.argmax(eigvals))]
    return direction if direction[2] >= 0 else -direction


Dictionary = Union[IvimDictionary, NoddiDictionary]


def save_dictionary(dictionary: Dictionary, path: Union[str, Path]) -> Path:
    """Write atoms as little-endian column-major float64 plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = np.asfortranarray(dictionary.atoms, dtype="<f8").tobytes(order="F")
    path.write_bytes(payload)
    sidecar = dictionary.to_dict()
    sidecar["atoms_sha256"] = hashlib.sha256(payload).hexdigest()
    sidecar["scheme_hash"] = dictionary.scheme.scheme_hash()
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))
    logger.info("Wrote %s dictionary to %s", dictionary.kind, path)
    return path


def load_dictionary(
    path: Union[str, Path], scheme: Optional[AcquisitionScheme] = None
) -> Dictionary:
    """Read a dictionary written by :func:`save_dictionary`.

    When ``scheme`` is given its hash must match the one recorded in the sidecar.
    """
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    try:
        meta = json.loads(sidecar_path.read_text())
        payload = path.read_bytes()
    except (OSError, json.JSONDecodeError) as e:
        raise ParseError(f"cannot read dictionary {path}: {e}") from e
    rows, cols = meta["shape"]
    if len(payload) != rows * cols * 8:
        raise DataError(f"dictionary payload has {len(payload)} bytes, expected {rows * cols * 8}")
    if hashlib.sha256(payload).hexdigest() != meta.get("atoms_sha256"):
        raise DataError(f"dictionary payload checksum mismatch for {path}")
    atoms = np.frombuffer(payload, dtype="<f8").reshape((rows, cols), order="F").astype(np.float64)
    stored = AcquisitionScheme(meta["scheme"]["bvalues"], meta["scheme"]["directions"])
    if scheme is not None and scheme.scheme_hash() != stored.scheme_hash():
        raise SchemeMismatchError(
            f"dictionary was built for scheme {stored.scheme_hash()}, got {scheme.scheme_hash()}"
        )
    if meta["kind"] == "ivim":
        return IvimDictionary(
            np.asarray(meta["d_grid"]), np.asarray(meta["dstar_grid"]), atoms, stored
        )
    vic_grid = np.asarray(meta["vic_grid"])
    kappa_grid = np.asarray(meta["kappa_grid"])
    return NoddiDictionary(
        vic_grid=vic_grid,
        kappa_grid=kappa_grid,
        iso_grid=np.asarray(meta["iso_grid"]),
        atom_vic=np.tile(vic_grid, kappa_grid.size),
        atom_kappa=np.repeat(kappa_grid, vic_grid.size),
        atoms=atoms,
        scheme=stored,
        response_orientation=np.asarray(meta["response_orientation"]),
        d_par=float(meta["d_par"]),
        quad=SphericalQuadrature(**meta["quadrature"]),
    )


def build_dictionary(kind: ModelKind, scheme: AcquisitionScheme, size: Optional[int] = None) -> Dictionary:
    """Default dictionary for ``kind``; ``size`` is j for IVIM and j_vic = j_kappa for NODDI."""
    if ModelKind(kind) is ModelKind.IVIM:
        return build_ivim_dictionary(scheme, j=size or 300)
    return build_noddi_dictionary(scheme, j_vic=size or 12, j_kappa=size or 12)
