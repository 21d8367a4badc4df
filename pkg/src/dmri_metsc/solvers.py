"""Non-learned fitting: classic IHT, NNLS, two-step NLLS and a grid-posterior Bayesian fit.

Every solver is pure per voxel. :func:`fit_signals` runs one of them over a batch of voxels
on a thread pool and returns rows in input order.
"""

import functools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np
from rapidfuzz import fuzz, process
from scipy.optimize import nnls

from dmri_metsc.config import Config
from dmri_metsc.data_io import ParameterMaps, Volume, b0_reference
from dmri_metsc.errors import (
    ConfigurationError,
    DivergenceError,
    ParameterError,
    SchemeMismatchError,
    UsageError,
)
from dmri_metsc.forward_models import ivim_signal_array
from dmri_metsc.models import AcquisitionScheme, IvimParams, ModelKind, SparseCode
from dmri_metsc.sparse_dict import (
    Dictionary,
    IvimDictionary,
    NoddiDictionary,
    extract_ivim_batch,
    extract_noddi_batch,
    principal_direction,
)

logger = logging.getLogger(__name__)

# Iterates whose norm grows past this multiple of the first iterate are treated as divergent
DIVERGENCE_FACTOR = 1e3


def spectral_norm_sq(atoms: np.ndarray) -> float:
    """||Phi||_2^2, the largest eigenvalue of Phi^T Phi."""
    return float(np.linalg.norm(np.asarray(atoms, dtype=np.float64), 2) ** 2)


# ---------------------------------------------------------------------------
# Iterative hard thresholding
# ---------------------------------------------------------------------------


@dataclass
class IhtConfig:
    """Classic IHT settings.

    ``step=None`` resolves to ``0.99 / ||Phi||^2``. ``unit_step`` uses the unscaled
    ``W = Phi^T`` iteration, which is allowed to violate the contraction bound.
    """

    lam: float = 0.01
    max_iters: int = 500
    step: Optional[float] = None
    tol: float = 1e-10
    unit_step: bool = False

    def __post_init__(self) -> None:
        if self.lam <= 0:
            raise ParameterError(f"IHT threshold must be positive, got {self.lam}")
        if self.max_iters < 1:
            raise ParameterError("max_iters must be at least 1")

    @classmethod
    def for_dictionary(cls, atoms: np.ndarray, lam_rel: float = 0.01, **kwargs) -> "IhtConfig":
        """Threshold expressed relative to the dictionary: ``lam = lam_rel * 0.99 / ||Phi||``.

        For an orthonormal dictionary this is ``lam_rel`` itself.
        """
        norm = math.sqrt(spectral_norm_sq(atoms))
        return cls(lam=lam_rel * 0.99 / norm, **kwargs)

    def resolve_step(self, atoms: np.ndarray) -> float:
        lipschitz = spectral_norm_sq(atoms)
        if self.unit_step:
            return 1.0
        step = self.step if self.step is not None else 0.99 / lipschitz
        if step <= 0 or step * lipschitz > 1.0 + 1e-12:
            raise ConfigurationError(
                f"IHT step {step:.4g} violates step * ||Phi||^2 <= 1 (||Phi||^2 = {lipschitz:.4g})"
            )
        return step

    def to_dict(self) -> dict:
        """Convert to dictionary."""
        return {
            "lam": self.lam,
            "max_iters": self.max_iters,
            "step": self.step,
            "tol": self.tol,
            "unit_step": self.unit_step,
        }


def _threshold(u: np.ndarray, lam: float) -> np.ndarray:
    return np.where(u >= lam, u, 0.0)


def iht_objective(y: np.ndarray, atoms: np.ndarray, x: np.ndarray, lam: float, step: float):
    """0.5 ||y - Phi x||^2 + lam^2 / (2 step) ||x||_0, non-increasing along IHT iterates."""
    residual = np.atleast_2d(y) - np.atleast_2d(x) @ atoms.T
    support = np.count_nonzero(np.atleast_2d(x), axis=1)
    return 0.5 * np.sum(residual**2, axis=1) + lam**2 / (2.0 * step) * support


def iht_solve_batch(
    signals: np.ndarray, atoms: np.ndarray, cfg: IhtConfig
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """IHT on every row of ``signals``; rows stop independently once they reach ``tol``.

    Returns:
        (codes, iterations per row, converged flag per row)
    """
    y = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    atoms = np.asarray(atoms, dtype=np.float64)
    if y.shape[1] != atoms.shape[0]:
        raise ParameterError(
            f"signals have {y.shape[1]} measurements but the dictionary has {atoms.shape[0]} rows"
        )
    step = cfg.resolve_step(atoms)
    n_voxels, n_atoms = y.shape[0], atoms.shape[1]
    x = np.zeros((n_voxels, n_atoms))
    iterations = np.zeros(n_voxels, dtype=np.int64)
    converged = np.zeros(n_voxels, dtype=bool)
    active = np.ones(n_voxels, dtype=bool)
    first_norm = None
    first_support = None
    for k in range(cfg.max_iters):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        xa = x[rows]
        x_new = _threshold(xa + step * ((y[rows] - xa @ atoms.T) @ atoms), cfg.lam)
        if k == 0:
            first_norm = np.linalg.norm(x_new, axis=1)
            first_support = np.count_nonzero(x_new, axis=1)
        else:
            grown = np.linalg.norm(x_new, axis=1) > DIVERGENCE_FACTOR * first_norm[rows]
            if np.any(grown & (first_norm[rows] > 0)):
                raise DivergenceError(
                    f"IHT diverged after {k + 1} iterations: step {step:.4g} exceeds "
                    f"1/||Phi||^2 = {1.0 / spectral_norm_sq(atoms):.4g}"
                )
        delta = np.linalg.norm(x_new - xa, axis=1)
        x[rows] = x_new
        iterations[rows] = k + 1
        done = delta <= cfg.tol
        converged[rows[done]] = True
        active[rows[done]] = False
    if first_support is not None:
        resurrected = np.count_nonzero(x, axis=1) > first_support
        if np.any(resurrected):
            logger.debug(
                "IHT support grew beyond the first iterate on %d voxel(s)", int(resurrected.sum())
            )
    return x, iterations, converged


def iht_solve(y: np.ndarray, atoms: np.ndarray, cfg: Optional[IhtConfig] = None) -> SparseCode:
    """x <- H(x + step Phi^T (y - Phi x)) with the non-negative hard threshold."""
    cfg = cfg or IhtConfig.for_dictionary(atoms)
    x, iterations, converged = iht_solve_batch(np.asarray(y)[None, :], atoms, cfg)
    return SparseCode(x[0], iterations=int(iterations[0]), converged=bool(converged[0]))


# ---------------------------------------------------------------------------
# Non-negative least squares
# ---------------------------------------------------------------------------


def nnls_fit(y: np.ndarray, atoms: np.ndarray) -> SparseCode:
    """argmin ||y - Phi x|| subject to x >= 0 (Lawson-Hanson active set)."""
    x, _ = nnls(np.asarray(atoms, dtype=np.float64), np.asarray(y, dtype=np.float64))
    return SparseCode(x)


def nnls_kkt_residual(y: np.ndarray, atoms: np.ndarray, x: np.ndarray) -> float:
    """Largest violation of the NNLS optimality conditions at ``x``."""
    grad = atoms.T @ (atoms @ x - y)
    on_support = np.abs(grad[x > 0]).max(initial=0.0)
    off_support = np.clip(-grad[x == 0], 0.0, None).max(initial=0.0)
    return float(max(on_support, off_support))


# ---------------------------------------------------------------------------
# Two-step NLLS
# ---------------------------------------------------------------------------


@dataclass
class LmResult:
    params: np.ndarray
    cost: float
    iterations: int
    converged: bool


def levenberg_marquardt(
    residual: Callable[[np.ndarray], np.ndarray],
    jacobian: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    max_iters: int = 200,
    ftol: float = 1e-15,
    xtol: float = 1e-12,
) -> LmResult:
    """Box-projected Levenberg-Marquardt with multiplicative damping updates.

    A trial step solves ``(J^T J + mu diag(J^T J)) dx = -J^T r`` and is projected into the box;
    it is accepted only when it lowers the cost. The best iterate is always returned.
    """
    x = np.clip(np.asarray(x0, dtype=np.float64), lower, upper)
    r = residual(x)
    cost = float(r @ r)
    mu = 1e-3
    for it in range(1, max_iters + 1):
        J = jacobian(x)
        jtj = J.T @ J
        g = J.T @ r
        if np.max(np.abs(g)) <= 1e-300 or cost == 0.0:
            return LmResult(x, cost, it, True)
        accepted = False
        while mu < 1e16:
            damped = jtj + mu * np.diag(np.maximum(np.diag(jtj), 1e-30))
            try:
                dx = np.linalg.solve(damped, -g)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            trial = np.clip(x + dx, lower, upper)
            r_trial = residual(trial)
            cost_trial = float(r_trial @ r_trial)
            if cost_trial < cost:
                step = np.linalg.norm(trial - x)
                reduction = (cost - cost_trial) / max(cost, 1e-300)
                x, r, cost = trial, r_trial, cost_trial
                mu = max(mu / 10.0, 1e-12)
                accepted = True
                if reduction <= ftol or step <= xtol * (np.linalg.norm(x) + xtol):
                    return LmResult(x, cost, it, True)
                break
            mu *= 10.0
        if not accepted:
            # no downhill step exists within the box at machine precision
            return LmResult(x, cost, it, True)
    return LmResult(x, cost, max_iters, False)


def estimate_s0(y: np.ndarray, scheme: AcquisitionScheme) -> float:
    """Mean of the non-weighted measurements, or the least-weighted one when none exist."""
    y = np.asarray(y, dtype=np.float64)
    b0 = scheme.b0_mask
    if np.any(b0):
        return float(y[b0].mean())
    return float(y[int(np.argmin(scheme.bvalues))])


# Valid IVIM box for fitted parameters (mm^2/s)
IVIM_BOX = {"f": (0.0, 1.0), "D": (1e-5, 5e-3), "Dstar": (1e-3, 0.5)}


def nlls_ivim_two_step(
    y: np.ndarray, scheme: AcquisitionScheme, b_threshold: float = 200.0, s0: Optional[float] = None
) -> IvimParams:
    """Segmented IVIM fit.

    Step one fits ``log S = log A - b D`` on ``b >= b_threshold``; step two refines ``(f, D*)``
    with Levenberg-Marquardt on the full curve, D held fixed and f starting at ``1 - A/S0``.
    Pass ``s0`` when ``y`` is already normalized or the scheme has no b=0 measurement.
    """
    y = np.asarray(y, dtype=np.float64)
    b = scheme.bvalues
    high = b >= b_threshold
    if high.sum() < 2 or (~high).sum() < 2:
        raise ConfigurationError(
            f"two-step NLLS needs >= 2 b-values on each side of {b_threshold:g} s/mm^2, "
            f"got {int((~high).sum())} below and {int(high.sum())} above"
        )
    s0 = estimate_s0(y, scheme) if s0 is None else float(s0)
    if s0 <= 0:
        raise ParameterError("non-positive b=0 signal")
    signal = y / s0
    logs = np.log(np.clip(signal[high], 1e-12, None))
    slope, intercept = np.polyfit(b[high], logs, 1)
    d = float(np.clip(-slope, *IVIM_BOX["D"]))
    f0 = float(np.clip(1.0 - math.exp(intercept), *IVIM_BOX["f"]))
    tissue = np.exp(-b * d)

    def residual(p: np.ndarray) -> np.ndarray:
        return (1.0 - p[0]) * tissue + p[0] * np.exp(-b * p[1]) - signal

    def jacobian(p: np.ndarray) -> np.ndarray:
        perf = np.exp(-b * p[1])
        return np.stack([perf - tissue, -p[0] * b * perf], axis=1)

    lower = np.array([IVIM_BOX["f"][0], max(IVIM_BOX["Dstar"][0], 1.01 * d)])
    upper = np.array([IVIM_BOX["f"][1], IVIM_BOX["Dstar"][1]])
    fit = levenberg_marquardt(residual, jacobian, np.array([f0, max(20e-3, lower[1])]), lower, upper)
    if not fit.converged:
        logger.warning("IVIM LM refinement hit its iteration limit; returning best iterate")
    return IvimParams(
        f=float(fit.params[0]), D=d, Dstar=float(fit.params[1]), S0=s0, converged=fit.converged
    )


# ---------------------------------------------------------------------------
# Grid posterior
# ---------------------------------------------------------------------------


@dataclass
class GridSpec:
    """Lattice for the IVIM posterior: f linear, D and D* log-spaced."""

    n_f: int = 50
    n_d: int = 50
    n_dstar: int = 50
    f_range: Tuple[float, float] = (0.0, 1.0)
    d_range: Tuple[float, float] = (0.1e-3, 3e-3)
    dstar_range: Tuple[float, float] = (3e-3, 0.1)

    def axes(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (
            np.linspace(*self.f_range, self.n_f),
            np.geomspace(*self.d_range, self.n_d),
            np.geomspace(*self.dstar_range, self.n_dstar),
        )

    def to_dict(self) -> dict:
        """Convert to dictionary."""
        return {
            "n": [self.n_f, self.n_d, self.n_dstar],
            "f_range": list(self.f_range),
            "d_range": list(self.d_range),
            "dstar_range": list(self.dstar_range),
        }


@dataclass
class _Lattice:
    f: np.ndarray
    d: np.ndarray
    dstar: np.ndarray
    signals: np.ndarray = field(repr=False)


LATTICE_CACHE_SIZE = 8


@functools.lru_cache(maxsize=LATTICE_CACHE_SIZE)
def _cached_lattice(bvalues: Tuple[float, ...], grid_key: tuple) -> _Lattice:
    f, d, dstar = GridSpec(*grid_key).axes()
    F, Dg, DS = np.meshgrid(f, d, dstar, indexing="ij")
    signals = ivim_signal_array(np.asarray(bvalues), F.ravel(), Dg.ravel(), DS.ravel())
    return _Lattice(F.ravel(), Dg.ravel(), DS.ravel(), signals)


def _lattice(scheme: AcquisitionScheme, grid: GridSpec) -> _Lattice:
    """Lattice signals depend only on the b-values; the last few are kept."""
    grid_key = (
        grid.n_f, grid.n_d, grid.n_dstar, tuple(grid.f_range), tuple(grid.d_range), tuple(grid.dstar_range)
    )
    return _cached_lattice(tuple(float(b) for b in scheme.bvalues), grid_key)


def bayesian_ivim_grid(
    y: np.ndarray,
    scheme: AcquisitionScheme,
    snr_prior: float = 30.0,
    grid_spec: Optional[GridSpec] = None,
    s0: Optional[float] = None,
) -> IvimParams:
    """Posterior mean over the lattice with a Gaussian likelihood, sigma = S0 / SNR."""
    if snr_prior <= 0:
        raise ParameterError("snr_prior must be positive")
    lattice = _lattice(scheme, grid_spec or GridSpec())
    s0 = estimate_s0(y, scheme) if s0 is None else float(s0)
    signal = np.asarray(y, dtype=np.float64) / s0
    sigma = 1.0 / snr_prior
    log_like = -np.sum((lattice.signals - signal) ** 2, axis=1) / (2.0 * sigma * sigma)
    weights = np.exp(log_like - log_like.max())
    total = weights.sum()
    return IvimParams(
        f=float(weights @ lattice.f / total),
        D=float(weights @ lattice.d / total),
        Dstar=float(weights @ lattice.dstar / total),
        S0=s0,
    )


# ---------------------------------------------------------------------------
# Voxel-parallel driver
# ---------------------------------------------------------------------------

FIT_METHODS = ("nlls", "bayes", "iht", "nnls", "metsc")


def resolve_method(name: str) -> str:
    """Validate a method name, suggesting close matches for typos."""
    if name in FIT_METHODS:
        return name
    matches = process.extract(name, FIT_METHODS, scorer=fuzz.WRatio, limit=3, score_cutoff=50)
    hint = f" Did you mean: {', '.join(m[0] for m in matches)}?" if matches else ""
    raise UsageError(f"unknown fit method '{name}'.{hint}")


def parallel_map(fn: Callable[[int], np.ndarray], n: int, workers: Optional[int] = None):
    """Apply ``fn`` to 0..n-1 on a thread pool; results come back in index order."""
    workers = workers or Config.get_default_workers()
    if workers <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n)))


def _normalize_rows(signals: np.ndarray, scheme: AcquisitionScheme) -> np.ndarray:
    s0 = (
        signals[:, scheme.b0_mask].mean(axis=1)
        if np.any(scheme.b0_mask)
        else signals[:, int(np.argmin(scheme.bvalues))]
    )
    s0 = np.where(s0 > 0, s0, 1.0)
    return signals / s0[:, None]


def _dictionary_fit(
    method: str,
    signals: np.ndarray,
    dictionary: Dictionary,
    iht: Optional[IhtConfig],
    workers: Optional[int],
) -> np.ndarray:
    if isinstance(dictionary, IvimDictionary):
        atoms = dictionary.atoms
        if method == "iht":
            codes, _, _ = iht_solve_batch(signals, atoms, iht or IhtConfig.for_dictionary(atoms))
        else:
            codes = np.stack(parallel_map(lambda i: nnls_fit(signals[i], atoms).x, len(signals), workers))
        maps = extract_ivim_batch(codes, dictionary)
        return np.stack([maps["f"], maps["D"], maps["Dstar"]], axis=1)

    cfg = iht or IhtConfig.for_dictionary(dictionary.atoms)

    def one(i: int) -> np.ndarray:
        atoms = dictionary.atoms_for(principal_direction(signals[i], dictionary.scheme))
        code = iht_solve(signals[i], atoms, cfg).x if method == "iht" else nnls_fit(signals[i], atoms).x
        maps = extract_noddi_batch(code[None, :], dictionary)
        return np.array([maps["v_ic"][0], maps["v_iso"][0], maps["od"][0]])

    return np.stack(parallel_map(one, len(signals), workers))


def fit_signals(
    method: str,
    signals: np.ndarray,
    scheme: AcquisitionScheme,
    kind: ModelKind = ModelKind.IVIM,
    dictionary: Optional[Dictionary] = None,
    iht: Optional[IhtConfig] = None,
    snr_prior: float = 30.0,
    grid_spec: Optional[GridSpec] = None,
    workers: Optional[int] = None,
    normalized: bool = False,
) -> np.ndarray:
    """Fit every row of ``signals`` (voxels x measurements); returns voxels x 3 parameters.

    ``normalized`` declares the rows already divided by their b=0 signal.
    """
    method = resolve_method(method)
    signals = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    if signals.shape[1] != scheme.n_measurements:
        raise ParameterError(
            f"signals have {signals.shape[1]} measurements, scheme has {scheme.n_measurements}"
        )
    kind = ModelKind(kind)
    logger.info("Fitting %d voxels with %s (%s)", len(signals), method, kind.value)
    if method == "metsc":
        raise UsageError("metsc fits need a trained checkpoint; use training.predict")
    if method in ("nlls", "bayes"):
        if kind is not ModelKind.IVIM:
            raise UsageError(f"method '{method}' is only available for IVIM")
        s0 = 1.0 if normalized else None

        def one(i: int) -> np.ndarray:
            if method == "nlls":
                p = nlls_ivim_two_step(signals[i], scheme, s0=s0)
            else:
                p = bayesian_ivim_grid(signals[i], scheme, snr_prior, grid_spec, s0=s0)
            return p.as_array()

        return np.stack(parallel_map(one, len(signals), workers))
    if dictionary is None:
        raise UsageError(f"method '{method}' requires a dictionary")
    if isinstance(dictionary, NoddiDictionary) != (kind is ModelKind.NODDI):
        raise UsageError(f"dictionary kind '{dictionary.kind}' does not match model '{kind.value}'")
    if dictionary.scheme.scheme_hash() != scheme.scheme_hash():
        raise SchemeMismatchError(
            f"dictionary was built for scheme {dictionary.scheme.scheme_hash()}, signals use {scheme.scheme_hash()}"
        )
    rows = signals if normalized else _normalize_rows(signals, scheme)
    return _dictionary_fit(method, rows, dictionary, iht, workers)


def fit_volume(
    volume: Volume,
    method: str,
    kind: ModelKind = ModelKind.IVIM,
    dictionary: Optional[Dictionary] = None,
    mask: Optional[np.ndarray] = None,
    measurements: Optional[np.ndarray] = None,
    **options,
) -> ParameterMaps:
    """Classic fit of every masked voxel with a positive b=0 signal.

    Signals are normalized by the full acquisition's b=0 mean before ``measurements`` are
    selected, the same way network inputs are.
    """
    mask = volume.mask if mask is None else np.asarray(mask, dtype=bool)
    s0 = b0_reference(volume)
    fit_mask = mask & (s0 > 0)
    skipped = int(np.count_nonzero(mask & ~fit_mask))
    if skipped:
        logger.warning("Skipped %d masked voxel(s) with non-positive b=0 signal", skipped)
    signals = volume.data[fit_mask].astype(np.float64) / s0[fit_mask][:, None]
    scheme = volume.scheme
    if measurements is not None:
        measurements = np.asarray(measurements, dtype=np.int64)
        signals = signals[:, measurements]
        scheme = scheme.subset(measurements)
    maps = np.zeros(volume.data.shape[:3] + (3,))
    if signals.shape[0]:
        maps[fit_mask] = fit_signals(method, signals, scheme, kind, dictionary, normalized=True, **options)
    return ParameterMaps(ModelKind(kind), maps)
