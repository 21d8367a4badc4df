"""Forward signal models: IVIM, NODDI (Watson-dispersed sticks), and Rician noise.

Diffusivities are in mm^2/s and b-values in s/mm^2 throughout, so ``b * D`` is dimensionless.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy.special import dawsn, erf, i0e, i1e

from dmri_metsc.errors import ConfigurationError, ParameterError
from dmri_metsc.models import AcquisitionScheme, IvimParams, NoddiParams

logger = logging.getLogger(__name__)

FOUR_PI = 4.0 * math.pi
SeedLike = Union[int, np.random.SeedSequence, np.random.Generator, None]

# Above this concentration the series is replaced by the Dawson-function closed form
_SERIES_KAPPA_LIMIT = 30.0


def ivim_signal_array(bvalues: np.ndarray, f, D, Dstar, S0=1.0) -> np.ndarray:
    """Vectorized bi-exponential signal; parameter arrays broadcast against a trailing b axis."""
    b = np.asarray(bvalues, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)[..., None]
    D = np.asarray(D, dtype=np.float64)[..., None]
    Dstar = np.asarray(Dstar, dtype=np.float64)[..., None]
    S0 = np.asarray(S0, dtype=np.float64)[..., None]
    return S0 * ((1.0 - f) * np.exp(-b * D) + f * np.exp(-b * Dstar))


def ivim_signal(p: IvimParams, scheme: AcquisitionScheme) -> np.ndarray:
    """S_b = S0 [(1 - f) exp(-b D) + f exp(-b D*)] for every measurement."""
    p.validate(strict=True)
    return ivim_signal_array(scheme.bvalues, p.f, p.D, p.Dstar, p.S0)


def _hyp1f1_half_series(kappa: float) -> float:
    total = 1.0
    term = 1.0
    n = 0
    while True:
        n += 1
        # kappa^n / n!, divided by (2n + 1) when summed
        term *= kappa / n
        contribution = term / (2 * n + 1)
        total += contribution
        if contribution <= 1e-17 * total and n > kappa:
            return total


def hyp1f1_half_closed(kappa: float) -> float:
    """M(1/2, 3/2, kappa) from the Dawson function, sqrt(pi)/2 * erfi(sqrt(k)) / sqrt(k)."""
    if kappa == 0:
        return 1.0
    root = math.sqrt(kappa)
    return math.exp(kappa) * float(dawsn(root)) / root


def hyp1f1_half(kappa: float) -> float:
    """Confluent hypergeometric M(1/2, 3/2, kappa), the Watson normalizer."""
    kappa = float(kappa)
    if kappa < 0:
        raise ParameterError(f"kappa must be non-negative, got {kappa}")
    if kappa > _SERIES_KAPPA_LIMIT:
        return hyp1f1_half_closed(kappa)
    return _hyp1f1_half_series(kappa)


def log_hyp1f1_half(kappa: float) -> float:
    """log M(1/2, 3/2, kappa) without overflow for very large kappa."""
    kappa = float(kappa)
    if kappa < 0:
        raise ParameterError(f"kappa must be non-negative, got {kappa}")
    if kappa > _SERIES_KAPPA_LIMIT:
        root = math.sqrt(kappa)
        return kappa + math.log(float(dawsn(root)) / root)
    return math.log(_hyp1f1_half_series(kappa))


def orientation_dispersion(kappa: float) -> float:
    """OD = (2/pi) arctan(1/kappa); 1 at kappa = 0, tending to 0 as kappa grows."""
    if kappa < 0:
        raise ParameterError(f"kappa must be non-negative, got {kappa}")
    return float(2.0 / math.pi * math.atan2(1.0, kappa))


def kappa_from_od(od: float) -> float:
    """Inverse of :func:`orientation_dispersion` for OD in (0, 1]."""
    if not 0.0 < od <= 1.0:
        raise ParameterError(f"OD must lie in (0, 1], got {od}")
    return float(1.0 / math.tan(od * math.pi / 2.0)) if od < 1.0 else 0.0


def stick_spherical_mean(b: np.ndarray, d_par: float) -> np.ndarray:
    """Orientation average of exp(-b d (g.n)^2) over the uniform sphere."""
    x = np.sqrt(np.asarray(b, dtype=np.float64) * d_par)
    safe = np.where(x > 0, x, 1.0)
    return np.where(x > 0, math.sqrt(math.pi) / 2.0 * erf(safe) / safe, 1.0)


def orthonormal_frame(mu: np.ndarray) -> np.ndarray:
    """Rows (e1, e2, mu) of a right-handed frame whose third axis is ``mu``."""
    mu = np.asarray(mu, dtype=np.float64)
    mu = mu / np.linalg.norm(mu)
    helper = np.array([1.0, 0.0, 0.0]) if abs(mu[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(helper, mu)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(mu, e1)
    return np.vstack([e1, e2, mu])


@dataclass
class SphericalQuadrature:
    """Deterministic quadrature on the unit sphere for Watson-weighted integrals.

    The default rule is a product rule in the frame aligned with the Watson axis:
    Gauss-Legendre panels in cos(theta), graded towards the poles by ``kappa`` so the
    concentrated density stays resolved, times a uniform midpoint rule in azimuth.
    ``points``/``weights`` switch to a fixed rule (e.g. Monte Carlo) used as a cross-check.
    """

    n_polar: int = 16
    n_azimuth: int = 64
    points: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None

    @classmethod
    def fixed(cls, points: np.ndarray, weights: np.ndarray) -> "SphericalQuadrature":
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        return cls(points=points, weights=weights)

    @classmethod
    def monte_carlo(cls, n_points: int = 10_000, seed: int = 0) -> "SphericalQuadrature":
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(n_points, 3))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        return cls.fixed(pts, np.full(n_points, FOUR_PI / n_points))

    def refined(self) -> "SphericalQuadrature":
        """The same rule at twice the density."""
        return SphericalQuadrature(n_polar=2 * self.n_polar, n_azimuth=2 * self.n_azimuth)

    def _polar_rule(self, kappa: float) -> Tuple[np.ndarray, np.ndarray]:
        # panels in s = 1 - |t| on [0, 1], geometrically graded by 1/kappa
        breaks = [0.0]
        if kappa > 1.0:
            k = 0
            while 2.0**k / kappa < 1.0:
                breaks.append(2.0**k / kappa)
                k += 1
        breaks.append(1.0)
        nodes, weights = np.polynomial.legendre.leggauss(self.n_polar)
        s_all, w_all = [], []
        for lo, hi in zip(breaks[:-1], breaks[1:]):
            s_all.append(lo + (hi - lo) * (nodes + 1.0) / 2.0)
            w_all.append(weights * (hi - lo) / 2.0)
        s = np.concatenate(s_all)
        w = np.concatenate(w_all)
        t = np.concatenate([1.0 - s, s - 1.0])
        return t, np.concatenate([w, w])

    def watson_nodes(self, mu: np.ndarray, kappa: float) -> Tuple[np.ndarray, np.ndarray]:
        """Points (K, 3) and area weights (K,) used to integrate a Watson(mu, kappa) density."""
        if self.points is not None and self.weights is not None:
            return self.points, self.weights
        t, wt = self._polar_rule(kappa)
        phi = 2.0 * math.pi * (np.arange(self.n_azimuth) + 0.5) / self.n_azimuth
        wphi = 2.0 * math.pi / self.n_azimuth
        sin_t = np.sqrt(np.clip(1.0 - t * t, 0.0, None))
        local = np.stack(
            [
                np.outer(sin_t, np.cos(phi)).ravel(),
                np.outer(sin_t, np.sin(phi)).ravel(),
                np.repeat(t, self.n_azimuth),
            ],
            axis=1,
        )
        frame = orthonormal_frame(mu)
        return local @ frame, np.repeat(wt * wphi, self.n_azimuth)

    def check_normalized(self, mu: np.ndarray, kappa: float) -> None:
        _, weights = self.watson_nodes(mu, kappa)
        total = float(weights.sum())
        if abs(total - FOUR_PI) > 1e-8:
            raise ConfigurationError(
                f"quadrature weights sum to {total:.12g}, expected 4*pi = {FOUR_PI:.12g}"
            )


def watson_density(cos_angle: np.ndarray, kappa: float) -> np.ndarray:
    """Watson density exp(kappa (mu.n)^2) / (4 pi M(1/2, 3/2, kappa))."""
    t = np.asarray(cos_angle, dtype=np.float64)
    log_norm = math.log(FOUR_PI) + log_hyp1f1_half(kappa) - kappa
    return np.exp(kappa * (t * t - 1.0) - log_norm)


def watson_weights(
    mu: np.ndarray, kappa: float, quad: SphericalQuadrature
) -> Tuple[np.ndarray, np.ndarray]:
    """Quadrature points and probability weights of the Watson distribution (sum exactly 1)."""
    quad.check_normalized(mu, kappa)
    points, area = quad.watson_nodes(mu, kappa)
    weights = area * watson_density(points @ np.asarray(mu, dtype=np.float64), kappa)
    return points, weights / weights.sum()


def watson_stick_signal(
    bvalues: np.ndarray,
    directions: np.ndarray,
    points: np.ndarray,
    weights: np.ndarray,
    d_par: float,
    chunk: int = 64,
) -> np.ndarray:
    """Intra-cellular signal: Watson average of the stick kernel exp(-b d_par (g.n)^2)."""
    out = np.empty(bvalues.size)
    for start in range(0, bvalues.size, chunk):
        stop = start + chunk
        proj = directions[start:stop] @ points.T
        out[start:stop] = np.exp(-bvalues[start:stop, None] * d_par * proj * proj) @ weights
    return out


def watson_zeppelin_signal(
    bvalues: np.ndarray,
    directions: np.ndarray,
    points: np.ndarray,
    weights: np.ndarray,
    d_par: float,
    d_perp: float,
) -> np.ndarray:
    """Extra-cellular signal exp(-b g^T <D(n)> g) with the Watson-averaged tensor."""
    scatter = (points.T * weights) @ points
    tensor = d_perp * np.eye(3) + (d_par - d_perp) * scatter
    return np.exp(-bvalues * np.einsum("ij,jk,ik->i", directions, tensor, directions))


def noddi_signal(
    p: NoddiParams,
    scheme: AcquisitionScheme,
    quad: Optional[SphericalQuadrature] = None,
) -> np.ndarray:
    """Normalized NODDI signal for every measurement of ``scheme``.

    A = (1 - v_iso)(v_ic A_ic + (1 - v_ic) A_ec) + v_iso A_iso, with the tortuosity
    constraint d_perp = d_par (1 - v_ic) for the extra-cellular zeppelin.
    """
    p.validate()
    quad = quad or SphericalQuadrature()
    points, weights = watson_weights(p.mu, p.kappa, quad)
    b = scheme.bvalues
    a_ic = watson_stick_signal(b, scheme.directions, points, weights, p.d_par)
    d_perp = p.d_par * (1.0 - p.v_ic)
    a_ec = watson_zeppelin_signal(b, scheme.directions, points, weights, p.d_par, d_perp)
    a_iso = np.exp(-b * p.d_iso)
    signal = (1.0 - p.v_iso) * (p.v_ic * a_ic + (1.0 - p.v_ic) * a_ec) + p.v_iso * a_iso
    return np.clip(signal, 0.0, 1.0)


def _as_generator(rng_seed: SeedLike) -> np.random.Generator:
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.default_rng(rng_seed)


def add_rician_noise(
    signal: np.ndarray, snr: float, rng_seed: SeedLike = 0, s0: float = 1.0
) -> np.ndarray:
    """sqrt((S + xi1)^2 + xi2^2) with xi ~ N(0, sigma^2), sigma = S0 / SNR."""
    if snr <= 0:
        raise ParameterError(f"snr must be positive, got {snr}")
    signal = np.asarray(signal, dtype=np.float64)
    sigma = s0 / snr
    rng = _as_generator(rng_seed)
    xi1 = rng.normal(0.0, sigma, size=signal.shape)
    xi2 = rng.normal(0.0, sigma, size=signal.shape)
    return np.sqrt((signal + xi1) ** 2 + xi2**2)


def rician_mean(nu: float, sigma: float) -> float:
    """Analytic mean of a Rician variable via the Laguerre function L_{1/2}."""
    x = -(nu * nu) / (2.0 * sigma * sigma)
    half = x / 2.0
    # L_{1/2}(x) = e^{x/2} [(1 - x) I0(-x/2) - x I1(-x/2)], using scaled Bessel functions
    laguerre = (1.0 - x) * i0e(-half) - x * i1e(-half)
    return float(sigma * math.sqrt(math.pi / 2.0) * laguerre)
