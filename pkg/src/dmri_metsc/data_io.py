"""Dataset plumbing: gradient tables, raw volumes, patches, phantoms and dataset splits.

Volumes are stored as a raw little-endian float32 payload (row-major, measurements fastest)
next to a JSON sidecar describing dims, scheme, mask and provenance.
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from rapidfuzz import fuzz, process

from dmri_metsc.config import Config
from dmri_metsc.errors import (
    ConfigurationError,
    DataError,
    ParameterError,
    ParseError,
    SchemeMismatchError,
)
from dmri_metsc.forward_models import SphericalQuadrature, add_rician_noise, ivim_signal_array, noddi_signal
from dmri_metsc.models import (
    AcquisitionScheme,
    IvimParams,
    ModelKind,
    NoddiParams,
    parameter_names,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# Tolerance on gradient norms in bvec files before renormalization
BVEC_NORM_TOLERANCE = 1e-3

FULL_IVIM_BVALUES = [0, 10, 20, 50, 80, 100, 150, 200, 300, 500]

BVALUE_PRESETS: Dict[str, List[float]] = {
    "full10": FULL_IVIM_BVALUES,
    "comb1": [20, 50, 150, 300, 500],
    "comb2": [20, 50, 150, 200, 500],
    "comb3": [20, 50, 200, 300, 500],
    "comb4": [20, 100, 150, 300, 500],
    "comb5": [20, 80, 150, 300, 500],
    "b3": [20, 150, 500],
    "b7": [20, 50, 100, 150, 200, 300, 500],
}


def resolve_preset(name: str) -> List[float]:
    """Look up a b-value preset, suggesting close names on a miss."""
    if name in BVALUE_PRESETS:
        return list(BVALUE_PRESETS[name])
    matches = process.extract(name, list(BVALUE_PRESETS), scorer=fuzz.WRatio, limit=3, score_cutoff=50)
    hint = f" Did you mean: {', '.join(m[0] for m in matches)}?" if matches else ""
    raise ConfigurationError(f"unknown b-value preset '{name}'.{hint}")


# ---------------------------------------------------------------------------
# Gradient tables
# ---------------------------------------------------------------------------


def _read_rows(path: PathLike) -> List[Tuple[int, List[float]]]:
    rows = []
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from e
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append((lineno, [float(v) for v in line.split()]))
        except ValueError as e:
            raise ParseError(f"{path}:{lineno}: not a number ({e})") from e
    return rows


def load_scheme(bval_path: PathLike, bvec_path: PathLike) -> AcquisitionScheme:
    """Read a whitespace-separated bval row and a 3-row bvec table.

    Directions within 1e-3 of unit norm are renormalized; b < 10 rows may carry any vector.
    """
    bval_rows = _read_rows(bval_path)
    bvec_rows = _read_rows(bvec_path)
    bvalues = np.array([v for _, values in bval_rows for v in values])
    if len(bvec_rows) != 3:
        raise ParseError(f"{bvec_path}: expected 3 rows of direction components, found {len(bvec_rows)}")
    lengths = {lineno: len(values) for lineno, values in bvec_rows}
    if len(set(lengths.values())) != 1:
        detail = ", ".join(f"line {k}: {v}" for k, v in lengths.items())
        raise ParseError(f"{bvec_path}: rows have different column counts ({detail})")
    directions = np.array([values for _, values in bvec_rows]).T
    if directions.shape[0] != bvalues.size:
        raise ParseError(
            f"{bval_path} lists {bvalues.size} b-values but {bvec_path} has "
            f"{directions.shape[0]} direction columns"
        )
    norms = np.linalg.norm(directions, axis=1)
    weighted = bvalues >= 10.0
    bad = weighted & (np.abs(norms - 1.0) > BVEC_NORM_TOLERANCE)
    if np.any(bad):
        columns = (np.flatnonzero(bad) + 1).tolist()
        raise ParseError(f"{bvec_path}: non-unit gradient directions in column(s) {columns}")
    if np.any(bvalues < 0):
        lineno = bval_rows[0][0] if bval_rows else 1
        raise ParseError(f"{bval_path}:{lineno}: negative b-value")
    renorm = weighted & (np.abs(norms - 1.0) > 1e-12)
    directions[renorm] /= norms[renorm, None]
    return AcquisitionScheme(bvalues, directions)


def write_scheme(scheme: AcquisitionScheme, bval_path: PathLike, bvec_path: PathLike) -> None:
    Path(bval_path).write_text(" ".join(repr(float(b)) for b in scheme.bvalues) + "\n")
    Path(bvec_path).write_text(
        "\n".join(" ".join(repr(float(v)) for v in row) for row in scheme.directions.T) + "\n"
    )


def hemisphere_directions(n: int, rotation_seed: int = 0) -> np.ndarray:
    """Near-uniform directions on the upper hemisphere (Fibonacci lattice), optionally rotated."""
    k = np.arange(n) + 0.5
    z = 1.0 - k / n
    phi = math.pi * (1.0 + math.sqrt(5.0)) * k
    r = np.sqrt(1.0 - z * z)
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    if rotation_seed:
        q, _ = np.linalg.qr(np.random.default_rng(rotation_seed).normal(size=(3, 3)))
        dirs = dirs @ q.T
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def hcp_like_scheme(
    shells: Sequence[float] = (1000.0, 2000.0, 3000.0), n_dirs: int = 90, n_b0: int = 6
) -> AcquisitionScheme:
    """Multi-shell scheme with ``n_dirs`` directions per shell, each shell rotated differently."""
    bvalues = [np.zeros(n_b0)]
    directions = [np.tile([0.0, 0.0, 1.0], (n_b0, 1))]
    for k, b in enumerate(shells):
        bvalues.append(np.full(n_dirs, float(b)))
        directions.append(hemisphere_directions(n_dirs, rotation_seed=k + 1))
    return AcquisitionScheme(np.concatenate(bvalues), np.concatenate(directions))


def ivim_scheme(bvalues: Optional[Sequence[float]] = None) -> AcquisitionScheme:
    return AcquisitionScheme.from_bvalues(list(bvalues or FULL_IVIM_BVALUES))


def _canonical_order(scheme: AcquisitionScheme) -> np.ndarray:
    keys = np.round(np.column_stack([scheme.bvalues, scheme.directions]), 9)
    return np.lexsort(keys.T[::-1])


def farthest_point_subset(directions: np.ndarray, n: int) -> np.ndarray:
    """Greedy farthest-point selection under the antipodal angle, starting from row 0."""
    if n > len(directions):
        raise ConfigurationError(f"cannot select {n} directions out of {len(directions)}")
    chosen = [0]
    closest = np.abs(directions @ directions[0])
    for _ in range(1, n):
        closest[chosen] = np.inf
        nxt = int(np.argmin(closest))
        chosen.append(nxt)
        closest = np.maximum(closest, np.abs(directions @ directions[nxt]))
    return np.array(chosen, dtype=np.int64)


def min_pairwise_angle(directions: np.ndarray) -> float:
    """Smallest angle (radians) between any two axes, antipodes identified."""
    cos = np.abs(directions @ directions.T)
    np.fill_diagonal(cos, 0.0)
    return float(np.arccos(np.clip(cos.max(), 0.0, 1.0)))


def subsample_scheme(
    scheme: AcquisitionScheme,
    bvalues: Optional[Sequence[float]] = None,
    per_shell: Optional[int] = None,
) -> Tuple[AcquisitionScheme, np.ndarray]:
    """Select measurements by b-value set and/or a per-shell direction count.

    Selection runs on the canonically sorted scheme, so the result does not depend on the
    input ordering. Returns the reduced scheme and, per kept measurement, its index in
    ``scheme``.
    """
    order = _canonical_order(scheme)
    b = scheme.bvalues[order]
    keep = np.ones(order.size, dtype=bool)
    if bvalues is not None:
        requested = np.asarray(bvalues, dtype=np.float64)
        present = np.array([np.any(np.isclose(b, r, atol=1.0)) for r in requested])
        if not np.all(present):
            raise ConfigurationError(
                f"b-values {requested[~present].tolist()} are not in the scheme "
                f"(available: {sorted(set(np.round(scheme.bvalues, 3).tolist()))})"
            )
        keep = np.any(np.isclose(b[:, None], requested[None, :], atol=1.0), axis=1)
    if per_shell is not None:
        canonical = scheme.subset(order)
        shell_idx = canonical.shell_index()
        for s in range(len(canonical.shells())):
            rows = np.flatnonzero((shell_idx == s) & keep)
            if rows.size == 0:
                continue
            chosen = rows[farthest_point_subset(canonical.directions[rows], per_shell)]
            keep[rows] = False
            keep[chosen] = True
    index = order[keep]
    return scheme.subset(index), index


def random_direction_subset(
    scheme: AcquisitionScheme, per_shell: int, seed: int = 0
) -> Tuple[AcquisitionScheme, np.ndarray]:
    """Seeded random ``per_shell`` directions from every shell; b=0 measurements are kept."""
    order = _canonical_order(scheme)
    canonical = scheme.subset(order)
    shell_idx = canonical.shell_index()
    rng = np.random.default_rng(seed)
    keep = shell_idx < 0
    for s in range(len(canonical.shells())):
        rows = np.flatnonzero(shell_idx == s)
        if per_shell > rows.size:
            raise ConfigurationError(f"cannot draw {per_shell} directions from a shell of {rows.size}")
        keep[rng.choice(rows, size=per_shell, replace=False)] = True
    index = np.sort(order[keep])
    return scheme.subset(index), index


# ---------------------------------------------------------------------------
# Volumes
# ---------------------------------------------------------------------------


@dataclass
class Volume:
    """H x W x S x C measurements with a mask and the scheme that produced them."""

    data: np.ndarray
    scheme: AcquisitionScheme
    mask: Optional[np.ndarray] = None
    provenance: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise DataError(f"volume must be 4-D (H, W, S, C), got shape {self.data.shape}")
        if self.data.shape[3] != self.scheme.n_measurements:
            raise SchemeMismatchError(
                f"volume has {self.data.shape[3]} measurements, scheme has {self.scheme.n_measurements}"
            )
        if self.mask is None:
            self.mask = np.ones(self.data.shape[:3], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.data.shape[:3]:
            raise DataError(f"mask shape {self.mask.shape} does not match volume {self.data.shape[:3]}")

    @property
    def dims(self) -> Tuple[int, int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    def data_hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.data, dtype="<f4").tobytes()).hexdigest()[:16]


def _sidecar(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def write_volume(path: PathLike, volume: Volume) -> Path:
    """Write payload, mask, gradient table and sidecar next to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(volume.data, dtype="<f4").tobytes())
    mask_path = path.with_name(path.stem + "_mask.bin")
    mask_path.write_bytes(np.ascontiguousarray(volume.mask, dtype=np.uint8).tobytes())
    bval_path = path.with_name(path.stem + ".bval")
    bvec_path = path.with_name(path.stem + ".bvec")
    write_scheme(volume.scheme, bval_path, bvec_path)
    sidecar = {
        "dims": list(volume.dims),
        "dtype": "<f4",
        "order": "row-major, measurements fastest",
        "scheme": {"bval": bval_path.name, "bvec": bvec_path.name, "hash": volume.scheme.scheme_hash()},
        "mask": mask_path.name,
        "units": {"bvalues": "s/mm^2", "signal": "a.u."},
        "provenance": volume.provenance,
        "data_hash": volume.data_hash(),
    }
    _sidecar(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    logger.info("Wrote volume %s to %s", volume.dims, path)
    return path


def _nifti_stem(path: Path) -> Optional[str]:
    for suffix in (".nii.gz", ".nii"):
        if path.name.endswith(suffix):
            return path.name[: -len(suffix)]
    return None


def read_volume(path: PathLike) -> Volume:
    """Read a volume written by ``write_volume``, or a NIfTI series with ``.bval``/``.bvec`` beside it."""
    path = Path(path)
    stem = _nifti_stem(path)
    if stem is not None:
        return load_nifti(path, path.with_name(stem + ".bval"), path.with_name(stem + ".bvec"))
    try:
        meta = json.loads(_sidecar(path).read_text())
        payload = path.read_bytes()
    except (OSError, json.JSONDecodeError) as e:
        raise ParseError(f"cannot read volume {path}: {e}") from e
    dims = tuple(int(d) for d in meta["dims"])
    expected = int(np.prod(dims)) * 4
    if len(payload) != expected:
        raise DataError(f"{path}: payload is {len(payload)} bytes, sidecar dims {dims} need {expected}")
    scheme = load_scheme(path.with_name(meta["scheme"]["bval"]), path.with_name(meta["scheme"]["bvec"]))
    if scheme.n_measurements != dims[3]:
        raise SchemeMismatchError(
            f"{path}: scheme has {scheme.n_measurements} measurements, volume has {dims[3]}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    mask_bytes = path.with_name(meta["mask"]).read_bytes()
    mask = np.frombuffer(mask_bytes, dtype=np.uint8).reshape(dims[:3]).astype(bool)
    return Volume(data, scheme, mask, meta.get("provenance", {}))


@dataclass
class ParameterMaps:
    """H x W x S x 3 parameter maps (float64) with their names."""

    kind: ModelKind
    data: np.ndarray

    @property
    def names(self) -> List[str]:
        return parameter_names(self.kind)


def write_maps(path: PathLike, maps: ParameterMaps, provenance: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(maps.data, dtype="<f8").tobytes())
    sidecar = {
        "dims": list(maps.data.shape),
        "dtype": "<f8",
        "kind": ModelKind(maps.kind).value,
        "parameters": maps.names,
        "units": {"D": "mm^2/s", "Dstar": "mm^2/s"},
        "provenance": provenance or {},
    }
    _sidecar(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def read_maps(path: PathLike) -> ParameterMaps:
    path = Path(path)
    try:
        meta = json.loads(_sidecar(path).read_text())
        payload = path.read_bytes()
    except (OSError, json.JSONDecodeError) as e:
        raise ParseError(f"cannot read parameter maps {path}: {e}") from e
    dims = tuple(int(d) for d in meta["dims"])
    if len(payload) != int(np.prod(dims)) * 8:
        raise DataError(f"{path}: payload size does not match dims {dims}")
    return ParameterMaps(ModelKind(meta["kind"]), np.frombuffer(payload, dtype="<f8").reshape(dims).copy())


def load_nifti(dwi_path: PathLike, bval_path: PathLike, bvec_path: PathLike) -> Volume:
    """Import a 4-D NIfTI series (requires the ``nifti`` extra)."""
    try:
        import nibabel as nib
    except ImportError as e:
        raise ConfigurationError("NIfTI import needs nibabel: pip install 'dmri-metsc[nifti]'") from e
    image = nib.load(str(dwi_path))
    data = np.asarray(image.get_fdata(), dtype=np.float32)
    if data.ndim == 3:
        data = data[:, :, None, :]
    return Volume(data, load_scheme(bval_path, bvec_path), provenance={"source": str(dwi_path)})


# ---------------------------------------------------------------------------
# Patches
# ---------------------------------------------------------------------------


@dataclass
class PatchSample:
    """p x p x C patch normalized by the core voxel's b=0 mean."""

    patch: np.ndarray
    core: Tuple[int, int, int]
    target: Optional[np.ndarray] = None

    @property
    def center(self) -> np.ndarray:
        half = self.patch.shape[0] // 2
        return self.patch[half, half]


@dataclass
class WindowBatch:
    """Windows of N patches per core voxel, shaped (B, N, p*p*C)."""

    windows: np.ndarray
    coords: np.ndarray
    skipped: int = 0
    targets: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.windows.shape[0])

    def subset(self, index: np.ndarray) -> "WindowBatch":
        return WindowBatch(
            self.windows[index],
            self.coords[index],
            0,
            None if self.targets is None else self.targets[index],
        )


def b0_reference(volume: Volume) -> np.ndarray:
    scheme = volume.scheme
    if np.any(scheme.b0_mask):
        return volume.data[..., scheme.b0_mask].astype(np.float64).mean(axis=-1)
    logger.warning("scheme has no b=0 measurement; normalizing by the least-weighted one")
    return volume.data[..., int(np.argmin(scheme.bvalues))].astype(np.float64)


def _core_voxels(volume: Volume, mask: Optional[np.ndarray], step: int):
    mask = volume.mask if mask is None else np.asarray(mask, dtype=bool)
    coords = np.argwhere(mask)
    if step > 1:
        coords = coords[(coords[:, 0] % step == 0) & (coords[:, 1] % step == 0)]
    s0 = b0_reference(volume)
    valid = s0[tuple(coords.T)] > 0
    skipped = int((~valid).sum())
    if skipped:
        logger.warning("Skipped %d masked voxel(s) with non-positive b=0 signal", skipped)
    return coords[valid], s0, skipped


def extract_patches(
    volume: Volume,
    mask: Optional[np.ndarray] = None,
    patch_size: int = 3,
    step: int = 1,
    measurements: Optional[np.ndarray] = None,
) -> Tuple[List[PatchSample], int]:
    """One zero-padded in-slice patch per masked voxel.

    ``measurements`` keeps only those channels after normalization, so a subsampled scheme can
    still be normalized by the full acquisition's b=0 signal.
    """
    batch = extract_windows(volume, mask, patch_size, window=1, step=step, measurements=measurements)
    C = batch.windows.shape[2] // (patch_size * patch_size)
    samples = [
        PatchSample(w[0].reshape(patch_size, patch_size, C), tuple(int(c) for c in xyz))
        for w, xyz in zip(batch.windows, batch.coords)
    ]
    return samples, batch.skipped


def extract_windows(
    volume: Volume,
    mask: Optional[np.ndarray] = None,
    patch_size: int = 3,
    window: int = 3,
    step: int = 1,
    measurements: Optional[np.ndarray] = None,
    targets: Optional[np.ndarray] = None,
) -> WindowBatch:
    """Windows of ``window x window`` overlapping patches around every masked voxel."""
    if patch_size < 1 or patch_size % 2 == 0:
        raise ConfigurationError(f"patch_size must be a positive odd integer, got {patch_size}")
    if window < 1 or window % 2 == 0:
        raise ConfigurationError(f"window must be a positive odd integer, got {window}")
    coords, s0, skipped = _core_voxels(volume, mask, step)
    data = volume.data.astype(np.float64)
    if measurements is not None:
        data = data[..., np.asarray(measurements, dtype=np.int64)]
    H, W, S, C = data.shape
    radius = patch_size // 2 + window // 2
    padded = np.zeros((H + 2 * radius, W + 2 * radius, S, C))
    padded[radius : radius + H, radius : radius + W] = data
    span = patch_size + window - 1
    n_patches = window * window
    out = np.empty((len(coords), n_patches, patch_size * patch_size * C))
    for k, (i, j, s) in enumerate(coords):
        region = padded[i : i + span, j : j + span, s] / s0[i, j, s]
        for w, (di, dj) in enumerate(np.ndindex(window, window)):
            out[k, w] = region[di : di + patch_size, dj : dj + patch_size].reshape(-1)
    picked = None if targets is None else targets[tuple(coords.T)]
    return WindowBatch(out, coords, skipped, picked)


# ---------------------------------------------------------------------------
# Phantoms
# ---------------------------------------------------------------------------

DEFAULT_IVIM_REGIONS = [
    {"f": 0.10, "D": 1.0e-3, "Dstar": 40e-3},
    {"f": 0.25, "D": 1.5e-3, "Dstar": 60e-3},
    {"f": 0.40, "D": 2.0e-3, "Dstar": 80e-3},
]
DEFAULT_NODDI_REGIONS = [
    {"v_ic": 0.6, "v_iso": 0.05, "kappa": 8.0, "mu": [0.0, 0.0, 1.0]},
    {"v_ic": 0.4, "v_iso": 0.15, "kappa": 2.0, "mu": [1.0, 0.0, 0.0]},
    {"v_ic": 0.7, "v_iso": 0.10, "kappa": 16.0, "mu": [0.0, 1.0, 0.0]},
]


@dataclass
class PhantomSpec:
    """Bands of constant parameters along the first axis, optionally modulated smoothly.

    ``smooth`` is the relative amplitude of a slow sinusoidal variation along the second
    axis applied to every scalar parameter.
    """

    regions: List[Dict[str, object]]
    smooth: float = 0.0

    @classmethod
    def default(cls, kind: ModelKind) -> "PhantomSpec":
        regions = DEFAULT_IVIM_REGIONS if ModelKind(kind) is ModelKind.IVIM else DEFAULT_NODDI_REGIONS
        return cls([dict(r) for r in regions], smooth=0.1)

    def to_dict(self) -> dict:
        """Convert to dictionary."""
        return {"regions": self.regions, "smooth": self.smooth}


@dataclass
class Phantom:
    volume: Volume
    truth: ParameterMaps
    spec: PhantomSpec
    snr: Optional[float]
    seed: int


def _voxel_params(kind: ModelKind, spec: PhantomSpec, dims: Tuple[int, int, int]):
    H, W, S = dims
    band = np.minimum(np.arange(H) * len(spec.regions) // max(H, 1), len(spec.regions) - 1)
    modulation = 1.0 + spec.smooth * np.sin(2.0 * math.pi * (np.arange(W) + 0.5) / max(W, 1))
    params = []
    for i, j, s in np.ndindex(H, W, S):
        region = dict(spec.regions[band[i]])
        scalars = ("f", "D", "Dstar") if kind is ModelKind.IVIM else ("v_ic", "v_iso", "kappa")
        for name in scalars:
            region[name] = float(region[name]) * modulation[j]
        try:
            if kind is ModelKind.IVIM:
                p = IvimParams(region["f"], region["D"], region["Dstar"]).validate(strict=True)
            else:
                mu = np.asarray(region.get("mu", [0.0, 0.0, 1.0]), dtype=np.float64)
                p = NoddiParams(region["v_ic"], region["v_iso"], region["kappa"], mu / np.linalg.norm(mu))
                p.validate()
        except ParameterError as e:
            raise ParameterError(f"phantom voxel ({i}, {j}, {s}) is out of the valid box: {e}") from e
        params.append(p)
    return params


def make_phantom(
    kind: Union[str, ModelKind],
    dims: Tuple[int, int, int],
    param_field_spec: Optional[PhantomSpec] = None,
    snr: Optional[float] = 30.0,
    seed: Optional[int] = None,
    scheme: Optional[AcquisitionScheme] = None,
    quad: Optional[SphericalQuadrature] = None,
) -> Phantom:
    """Forward-simulate a phantom; noise for voxel ``k`` comes from the stream (seed, k).

    ``snr=None`` (or infinite) gives noiseless signals.
    """
    kind = ModelKind(kind)
    seed = Config.get_default_seed() if seed is None else seed
    spec = param_field_spec or PhantomSpec.default(kind)
    if scheme is None:
        scheme = ivim_scheme() if kind is ModelKind.IVIM else hcp_like_scheme(shells=(1000.0, 2000.0), n_dirs=30)
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ConfigurationError(f"phantom dims must be three positive extents, got {dims}")
    params = _voxel_params(kind, spec, dims)
    truth = np.array([p.as_array() for p in params])
    if kind is ModelKind.IVIM:
        signals = ivim_signal_array(scheme.bvalues, truth[:, 0], truth[:, 1], truth[:, 2])
    else:
        quad = quad or SphericalQuadrature()
        cache: Dict[Tuple, np.ndarray] = {}
        rows = []
        for p in params:
            key = (p.v_ic, p.v_iso, p.kappa, tuple(p.mu))
            if key not in cache:
                cache[key] = noddi_signal(p, scheme, quad)
            rows.append(cache[key])
        signals = np.array(rows)
    if snr is not None and math.isfinite(snr):
        signals = np.stack(
            [
                add_rician_noise(row, snr, np.random.default_rng([seed, k]))
                for k, row in enumerate(signals)
            ]
        )
    H, W, S = dims
    volume = Volume(
        signals.reshape(H, W, S, -1),
        scheme,
        provenance={"generator": "make_phantom", "kind": kind.value, "snr": snr, "seed": seed, "spec": spec.to_dict()},
    )
    logger.info("Simulated %s phantom %s at SNR %s", kind.value, dims, snr)
    return Phantom(volume, ParameterMaps(kind, truth.reshape(H, W, S, 3)), spec, snr, seed)


def write_phantom(out_dir: PathLike, phantom: Phantom) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return {
        "volume": write_volume(out_dir / "volume.bin", phantom.volume),
        "truth": write_maps(out_dir / "truth.bin", phantom.truth, phantom.volume.provenance),
    }


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def split_dataset(
    subjects: Sequence[str], fractions: Dict[str, float], seed: int = 0
) -> Dict[str, np.ndarray]:
    """Subject-level split: sample indices per partition, no subject in two partitions."""
    if not fractions or abs(sum(fractions.values()) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must sum to 1, got {fractions}")
    if any(v < 0 for v in fractions.values()):
        raise ConfigurationError("split fractions must be non-negative")
    subjects = np.asarray(subjects)
    unique = np.unique(subjects)
    names = [k for k, v in fractions.items() if v > 0]
    if unique.size < len(names):
        raise ConfigurationError(
            f"{unique.size} subject(s) cannot fill {len(names)} partitions at subject level"
        )
    shuffled = np.random.default_rng(seed).permutation(unique)
    counts = [max(1, int(round(fractions[n] * unique.size))) for n in names]
    counts[-1] = unique.size - sum(counts[:-1])
    if counts[-1] < 1:
        raise ConfigurationError(f"fractions {fractions} leave a partition without subjects")
    out: Dict[str, np.ndarray] = {k: np.array([], dtype=np.int64) for k in fractions}
    start = 0
    for name, count in zip(names, counts):
        members = shuffled[start : start + count]
        out[name] = np.flatnonzero(np.isin(subjects, members))
        start += count
    return out


def split_voxels(n: int, val_fraction: float, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Random train/validation voxel indices for single-phantom training."""
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigurationError(f"val_fraction must lie in [0, 1), got {val_fraction}")
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(val_fraction * n))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def subsample_dataset(n: int, size: int, seed: int = 0) -> np.ndarray:
    """Sorted random subset of ``size`` indices out of ``n``."""
    if size > n:
        raise ConfigurationError(f"cannot draw {size} samples from {n}")
    return np.sort(np.random.default_rng(seed).choice(n, size=size, replace=False))
