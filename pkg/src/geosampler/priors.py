"""Matern covariance (smoothness 1), effective-range parametrization, priors.

The spatial field uses a Matern kernel with smoothness nu = 1, written in
terms of the effective range rho = sqrt(8 nu) / kappa, the distance at which
correlation decays to ~0.139 (the sqrt(8 nu) convention). Range and spatial
sd carry a penalized-complexity prior specified through tail probabilities;
the nugget variance carries a gamma prior on its precision; fixed effects
get independent zero-mean normals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.linalg import LinAlgError
from scipy.special import kv

_SMALL_ARG = 1e-8  # below this, (kd) K_1(kd) is 1 to double precision


@dataclass(frozen=True)
class HyperParams:
    """Covariance hyperparameters in scaled-coordinate units."""

    rho: float
    sigma_s: float
    sigma_e: float

    def __post_init__(self):
        for name in ("rho", "sigma_s", "sigma_e"):
            val = getattr(self, name)
            if not (val > 0 and math.isfinite(val)):
                raise ValueError(f"{name} must be strictly positive and finite, got {val}")


@dataclass(frozen=True)
class MaternParams:
    """Matern kernel parameters; nu is fixed to 1 throughout this package."""

    rho: float
    sigma_s: float
    nu: float = 1.0

    def __post_init__(self):
        if self.rho <= 0 or self.sigma_s <= 0:
            raise ValueError("rho and sigma_s must be strictly positive")

    @property
    def kappa_scale(self) -> float:
        return math.sqrt(8.0 * self.nu) / self.rho


@dataclass(frozen=True)
class PriorConfig:
    """Hyperprior specification.

    ``pc_range`` is (rho0, alpha1) with P(rho < rho0) = alpha1;
    ``pc_sd`` is (sigma0, alpha2) with P(sigma_s > sigma0) = alpha2;
    ``nugget_prior`` is (shape, rate) of the gamma prior on the nugget
    precision 1/sigma_e^2.
    """

    beta_prior_variance: float = 3.3
    pc_range: tuple[float, float] = (0.1, 0.05)
    pc_sd: tuple[float, float] = (3.0, 0.1)
    nugget_prior: tuple[float, float] = (1.0, 0.01)

    def __post_init__(self):
        if self.beta_prior_variance <= 0:
            raise ValueError("beta_prior_variance must be positive")
        rho0, a1 = self.pc_range
        s0, a2 = self.pc_sd
        if rho0 <= 0 or s0 <= 0 or not (0 < a1 < 1) or not (0 < a2 < 1):
            raise ValueError("PC prior tail specs must be positive with alpha in (0,1)")
        if self.nugget_prior[0] <= 0 or self.nugget_prior[1] <= 0:
            raise ValueError("nugget gamma prior needs positive shape and rate")

    @property
    def lambda_range(self) -> float:
        rho0, a1 = self.pc_range
        return -rho0 * math.log(a1)

    @property
    def lambda_sd(self) -> float:
        s0, a2 = self.pc_sd
        return -math.log(a2) / s0

    def to_json(self) -> dict:
        return {
            "beta_prior_variance": self.beta_prior_variance,
            "pc_range": list(self.pc_range),
            "pc_sd": list(self.pc_sd),
            "nugget_prior": list(self.nugget_prior),
        }

    @staticmethod
    def from_json(obj: dict) -> "PriorConfig":
        kwargs = {}
        if "beta_prior_variance" in obj:
            kwargs["beta_prior_variance"] = float(obj["beta_prior_variance"])
        for key in ("pc_range", "pc_sd", "nugget_prior"):
            if key in obj:
                kwargs[key] = tuple(float(v) for v in obj[key])
        return PriorConfig(**kwargs)


def matern_correlation(d, rho: float, nu: float = 1.0):
    """Matern correlation at distance d for the sqrt(8 nu)/kappa range convention.

    Vectorized over d. For nu = 1 this is (kd) K_1(kd) with k = sqrt(8)/rho;
    arguments below 1e-8 take the analytic d -> 0 limit of 1.
    """
    d = np.asarray(d, dtype=float)
    kappa = math.sqrt(8.0 * nu) / rho
    kd = kappa * d
    small = kd < _SMALL_ARG
    kd_safe = np.where(small, 1.0, kd)
    corr = (
        (2.0 ** (1.0 - nu) / math.gamma(nu))
        * kd_safe**nu
        * kv(nu, kd_safe)
    )
    return np.where(small, 1.0, corr)


def matern_cov(d, params: MaternParams):
    """Matern covariance sigma_s^2 * correlation(d); sigma_s^2 at d = 0."""
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    return params.sigma_s**2 * matern_correlation(d, params.rho, params.nu)


_FAST_STEP = 1e-4
_FAST_MAX = 30.0  # beyond kd = 30 the correlation is < 1e-12; clamp to it
_FAST_TABLE: Optional[np.ndarray] = None


def _fast_table() -> np.ndarray:
    global _FAST_TABLE
    if _FAST_TABLE is None:
        x = np.arange(0.0, _FAST_MAX + 2 * _FAST_STEP, _FAST_STEP)
        _FAST_TABLE = matern_correlation(x / math.sqrt(8.0), 1.0)  # rho=1: kd == x
    return _FAST_TABLE


def fast_matern_correlation(d, rho: float):
    """Table-interpolated nu = 1 Matern correlation for hot loops.

    Linear interpolation on a uniform kd grid (step 1e-4); max absolute
    error vs ``matern_correlation`` is below 5e-8. Intended for inner
    fitting loops where the Bessel evaluation dominates runtime.
    """
    tab = _fast_table()
    kd = (math.sqrt(8.0) / rho) * np.asarray(d, dtype=float)
    pos = np.minimum(kd, _FAST_MAX) * (1.0 / _FAST_STEP)
    idx = pos.astype(np.int64)
    frac = pos - idx
    lo = tab[idx]
    return lo + (tab[idx + 1] - lo) * frac


def chol_with_jitter(
    matrix: np.ndarray, max_retries: int = 3
) -> tuple[np.ndarray, int]:
    """Lower Cholesky factor, escalating diagonal jitter on failure.

    Starts at 1e-10 * mean(diag), multiplies by 10 per retry, errors after
    ``max_retries`` failed retries. Returns (L, jitter_events).
    """
    try:
        return np.linalg.cholesky(matrix), 0
    except LinAlgError:
        pass
    base = 1e-10 * float(np.mean(np.diag(matrix)))
    if base <= 0:
        base = 1e-12
    jitter = base
    for attempt in range(1, max_retries + 1):
        try:
            bumped = matrix + jitter * np.eye(matrix.shape[0])
            return np.linalg.cholesky(bumped), attempt
        except LinAlgError:
            jitter *= 10.0
    raise LinAlgError(
        f"Cholesky failed after {max_retries} jitter escalations (base {base:g})"
    )


def build_cov_matrix(
    coords: np.ndarray, params: MaternParams, sigma_e: float
) -> np.ndarray:
    """Dense covariance sigma_s^2 M(d) + sigma_e^2 I over scaled coordinates."""
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    n = coords.shape[0]
    diff = coords[:, None, :] - coords[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    cov = matern_cov(d, params)
    cov[np.diag_indices(n)] = params.sigma_s**2 + sigma_e**2
    return cov


def pc_range_log_density(rho, cfg: PriorConfig):
    """log of pi(rho) = (lambda1/rho^2) exp(-lambda1/rho), the 2-D Matern PC prior."""
    rho = np.asarray(rho, dtype=float)
    lam = cfg.lambda_range
    return math.log(lam) - 2.0 * np.log(rho) - lam / rho

def pc_sd_log_density(sigma_s, cfg: PriorConfig):
    """log of pi(sigma_s) = lambda2 exp(-lambda2 sigma_s) (exponential tail spec)."""
    sigma_s = np.asarray(sigma_s, dtype=float)
    lam = cfg.lambda_sd
    return math.log(lam) - lam * sigma_s


def nugget_log_density(sigma_e, cfg: PriorConfig):
    """log density of sigma_e induced by a gamma(shape, rate) prior on 1/sigma_e^2.

    Change of variables from precision tau = sigma_e^-2 brings a
    |dtau/dsigma_e| = 2 sigma_e^-3 Jacobian.
    """
    sigma_e = np.asarray(sigma_e, dtype=float)
    shape, rate = cfg.nugget_prior
    tau = sigma_e**-2.0
    log_gamma = shape * math.log(rate) - math.lgamma(shape) + (shape - 1.0) * np.log(
        tau
    ) - rate * tau
    return log_gamma + math.log(2.0) - 3.0 * np.log(sigma_e)


def beta_log_density(beta: np.ndarray, cfg: PriorConfig) -> float:
    """Sum of independent N(0, beta_prior_variance) log densities."""
    beta = np.asarray(beta, dtype=float)
    var = cfg.beta_prior_variance
    return float(
        -0.5 * beta.size * math.log(2.0 * math.pi * var) - 0.5 * np.sum(beta**2) / var
    )


def log_prior(h: HyperParams, beta: np.ndarray, cfg: PriorConfig) -> float:
    """Joint log prior density over (rho, sigma_s, sigma_e, beta)."""
    total = (
        float(pc_range_log_density(h.rho, cfg))
        + float(pc_sd_log_density(h.sigma_s, cfg))
        + float(nugget_log_density(h.sigma_e, cfg))
        + beta_log_density(beta, cfg)
    )
    if not math.isfinite(total):
        raise ValueError(f"non-finite log prior at {h}")
    return total
