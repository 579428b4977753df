"""Laplace + hyperparameter-grid posterior for the spatial logistic model.

The latent block is (beta, v) with v = z + eps the combined spatial-plus-
nugget field. Only visited sites enter the Bernoulli likelihood, and the
unvisited block of v is jointly Gaussian given the visited block, so the
fit works on the visited marginal (covariance sigma_s^2 M + sigma_e^2 I
restricted to visited sites) and prediction is a conditional-Gaussian
read-off. For each hyperparameter value, the latent conditional posterior
is approximated by a Gaussian at the Newton mode; hyperparameters are
integrated over a small log-scale grid centered at the evidence MAP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.special import expit

from .priors import (
    HyperParams,
    PriorConfig,
    chol_with_jitter,
    fast_matern_correlation,
    nugget_log_density,
    pc_range_log_density,
    pc_sd_log_density,
)
from .village import VillageFrame

SPATIAL_ONLY_SIGMA_E = 1e-6
IID_ONLY_SIGMA_S = 1e-12
IID_ONLY_RHO = 1.0

_LOG_BOUND = 12.0  # |log theta| beyond this is rejected during MAP search


class InferenceError(RuntimeError):
    """Raised when the Laplace fit cannot be completed (divergence, bad input)."""


class ModelVariant(Enum):
    FULL = "full"
    SPATIAL_ONLY = "spatial-only"  # nugget removed (sigma_e pinned ~0)
    IID_ONLY = "iid-only"  # spatial field removed (sigma_s pinned ~0)


@dataclass(frozen=True)
class FitConfig:
    """Engine knobs; defaults follow the package-wide conventions."""

    grid_size: int = 5
    grid_span: float = 2.5
    newton_tol: float = 1e-6
    newton_max_iter: int = 50
    nm_tol: float = 1e-4
    nm_max_evals: int = 200
    fd_step: float = 0.05

    def to_json(self) -> dict:
        return {
            "grid_size": self.grid_size,
            "grid_span": self.grid_span,
            "newton_tol": self.newton_tol,
            "newton_max_iter": self.newton_max_iter,
            "nm_tol": self.nm_tol,
            "nm_max_evals": self.nm_max_evals,
            "fd_step": self.fd_step,
        }

    @staticmethod
    def from_json(obj: dict) -> "FitConfig":
        known = {f for f in FitConfig.__dataclass_fields__}
        kwargs = {k: v for k, v in obj.items() if k in known}
        if "grid_size" in kwargs:
            kwargs["grid_size"] = int(kwargs["grid_size"])
        if "newton_max_iter" in kwargs:
            kwargs["newton_max_iter"] = int(kwargs["newton_max_iter"])
        if "nm_max_evals" in kwargs:
            kwargs["nm_max_evals"] = int(kwargs["nm_max_evals"])
        return FitConfig(**kwargs)


@dataclass(frozen=True)
class LatentState:
    """Latent block at one hyperparameter node: coefficients, field, predictor."""

    beta: np.ndarray
    v: np.ndarray
    eta: np.ndarray


@dataclass(frozen=True)
class GridNode:
    hypers: HyperParams
    log_evidence: float  # Laplace approximation of log p(y | hypers)
    log_prior: float  # prior density at the node in log-theta coordinates
    weight: float
    latent: LatentState
    mode_beta: np.ndarray
    mode_v_obs: np.ndarray
    center_beta: np.ndarray  # third-order-corrected posterior mean, see below
    center_v_obs: np.ndarray
    chol_neg_hess: np.ndarray  # lower factor over (beta, v_obs)
    chol_sigma_obs: Optional[np.ndarray]  # lower factor of visited-block covariance
    cross_cov: Optional[np.ndarray]  # visited-x-unvisited spatial covariance
    kriging_proj: Optional[np.ndarray]  # Sigma_SS^-1 @ cross_cov
    newton_iters: int
    jitter_events: int


@dataclass(frozen=True)
class PosteriorFit:
    frame: VillageFrame
    variant: ModelVariant
    prior_config: PriorConfig
    fit_config: FitConfig
    observed_ids: tuple[str, ...]
    observed_idx: np.ndarray
    y_obs: np.ndarray
    nodes: tuple[GridNode, ...]
    map_hypers: HyperParams
    log_cell_volume: float
    log_ml: float
    diagnostics: dict

    @property
    def weights(self) -> np.ndarray:
        return np.array([nd.weight for nd in self.nodes])

    @property
    def n_observed(self) -> int:
        return len(self.observed_ids)

    @property
    def unvisited_idx(self) -> np.ndarray:
        mask = np.ones(self.frame.n, dtype=bool)
        mask[self.observed_idx] = False
        return np.nonzero(mask)[0]


@dataclass(frozen=True)
class PosteriorDraws:
    node_index: np.ndarray  # (B,)
    beta: np.ndarray  # (B, p)
    v_obs: np.ndarray  # (B, m)
    rho: np.ndarray
    sigma_s: np.ndarray
    sigma_e: np.ndarray

    @property
    def n_draws(self) -> int:
        return self.node_index.shape[0]


@dataclass(frozen=True)
class PredictiveDraws:
    samples: np.ndarray  # (B, n0) binary
    i0_samples: np.ndarray  # (B,)
    risk_mean: np.ndarray  # (n0,)
    risk_var: np.ndarray  # (n0,)
    unvisited_ids: tuple[str, ...]
    unvisited_idx: np.ndarray

    @property
    def n_unvisited(self) -> int:
        return len(self.unvisited_ids)


# ---------------------------------------------------------------------------
# log joint over the latent block (beta, v_obs) at fixed hyperparameters


def log_joint_latent(
    u: np.ndarray,
    y: np.ndarray,
    x_obs: np.ndarray,
    chol_sigma: Optional[np.ndarray],
    beta_var: float,
) -> float:
    """log p(y, beta, v_obs | theta); u stacks beta then v_obs.

    Includes all normalizing constants so the Laplace evidence is exact for
    a Gaussian integrand.
    """
    p = x_obs.shape[1]
    m = y.shape[0]
    beta, v = u[:p], u[p:]
    out = -0.5 * float(beta @ beta) / beta_var - 0.5 * p * math.log(
        2.0 * math.pi * beta_var
    )
    if m:
        eta = x_obs @ beta + v
        out += float(y @ eta - np.logaddexp(0.0, eta).sum())
        white = solve_triangular(chol_sigma, v, lower=True)
        out += (
            -0.5 * float(white @ white)
            - float(np.log(np.diag(chol_sigma)).sum())
            - 0.5 * m * math.log(2.0 * math.pi)
        )
    return out


def grad_log_joint_latent(
    u: np.ndarray,
    y: np.ndarray,
    x_obs: np.ndarray,
    chol_sigma: Optional[np.ndarray],
    beta_var: float,
) -> np.ndarray:
    p = x_obs.shape[1]
    beta, v = u[:p], u[p:]
    if y.shape[0] == 0:
        return -beta / beta_var
    eta = x_obs @ beta + v
    resid = y - expit(eta)
    sigma_inv_v = cho_solve((chol_sigma, True), v)
    return np.concatenate([x_obs.T @ resid - beta / beta_var, resid - sigma_inv_v])


def neg_hessian_latent(
    u: np.ndarray,
    y: np.ndarray,
    x_obs: np.ndarray,
    chol_sigma: Optional[np.ndarray],
    beta_var: float,
    sigma_inv: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Negative Hessian of the log joint; positive definite by construction."""
    p = x_obs.shape[1]
    m = y.shape[0]
    beta, v = u[:p], u[p:]
    q = np.zeros((p + m, p + m))
    q[:p, :p] = np.eye(p) / beta_var
    if m:
        eta = x_obs @ beta + v
        w = expit(eta)
        w = w * (1.0 - w)
        xw = x_obs * w[:, None]
        q[:p, :p] += x_obs.T @ xw
        q[:p, p:] = xw.T
        q[p:, :p] = xw
        if sigma_inv is None:
            sigma_inv = cho_solve((chol_sigma, True), np.eye(m))
        q[p:, p:] = sigma_inv
        q[p:, p:][np.diag_indices(m)] += w
    return q


def _newton_mode(
    y: np.ndarray,
    x_obs: np.ndarray,
    chol_sigma: Optional[np.ndarray],
    beta_var: float,
    u0: np.ndarray,
    cfg: FitConfig,
    trace: Optional[list] = None,
) -> tuple[np.ndarray, np.ndarray, int, int]:
    """Maximize the latent log joint by damped Newton.

    Returns (mode, chol of negative Hessian at mode, iterations, jitter events).
    The objective is strictly concave, so step halving keeps it nondecreasing
    and the mode is unique. Internally works with the precomputed covariance
    inverse; mathematically identical to the public log_joint/grad/hessian.
    """
    p = x_obs.shape[1]
    m = y.shape[0]
    dim = p + m
    const = -0.5 * p * math.log(2.0 * math.pi * beta_var)
    if m:
        sigma_inv = cho_solve((chol_sigma, True), np.eye(m), check_finite=False)
        const += (
            -float(np.log(np.diag(chol_sigma)).sum())
            - 0.5 * m * math.log(2.0 * math.pi)
        )
    else:
        sigma_inv = None

    def objective(u: np.ndarray) -> float:
        beta, v = u[:p], u[p:]
        out = const - 0.5 * float(beta @ beta) / beta_var
        if m:
            eta = x_obs @ beta + v
            out += float(y @ eta - np.logaddexp(0.0, eta).sum())
            out -= 0.5 * float(v @ (sigma_inv @ v))
        return out

    q_template = np.zeros((dim, dim))
    q_template[:p, :p] = np.eye(p) / beta_var
    if m:
        q_template[p:, p:] = sigma_inv
    diag_rows = np.arange(p, dim)

    u = u0.copy()
    obj = objective(u)
    if not math.isfinite(obj):
        u = np.zeros(dim)
        obj = objective(u)
    if trace is not None:
        trace.append(obj)

    def hessian_chol(u: np.ndarray) -> tuple[np.ndarray, int]:
        q = q_template.copy()
        if m:
            eta = x_obs @ u[:p] + u[p:]
            w = expit(eta)
            w = w * (1.0 - w)
            xw = x_obs * w[:, None]
            q[:p, :p] += x_obs.T @ xw
            q[:p, p:] = xw.T
            q[p:, :p] = xw
            q[diag_rows, diag_rows] += w
        return chol_with_jitter(q)

    jitter_events = 0
    iters = 0
    for iters in range(1, cfg.newton_max_iter + 1):
        beta, v = u[:p], u[p:]
        if m:
            resid = y - expit(x_obs @ beta + v)
            g = np.concatenate(
                [x_obs.T @ resid - beta / beta_var, resid - sigma_inv @ v]
            )
        else:
            g = -beta / beta_var
        if np.max(np.abs(g)) < cfg.newton_tol:
            iters -= 1
            break
        lq, jit = hessian_chol(u)
        jitter_events += jit
        step = cho_solve((lq, True), g, check_finite=False)
        scale = 1.0
        for _ in range(30):
            cand = u + scale * step
            cand_obj = objective(cand)
            if cand_obj >= obj - 1e-12:
                break
            scale *= 0.5
        else:
            break  # no improving step; treat current point as the mode
        u, obj = cand, cand_obj
        if trace is not None:
            trace.append(obj)
        if not math.isfinite(obj):
            raise InferenceError("Newton diverged to a non-finite log joint")
    lq, jit = hessian_chol(u)
    jitter_events += jit
    return u, lq, iters, jitter_events


# ---------------------------------------------------------------------------
# hyperparameter handling per model variant


def _free_names(variant: ModelVariant) -> tuple[str, ...]:
    if variant is ModelVariant.FULL:
        return ("rho", "sigma_s", "sigma_e")
    if variant is ModelVariant.SPATIAL_ONLY:
        return ("rho", "sigma_s")
    return ("sigma_e",)


def _to_hypers(u: np.ndarray, variant: ModelVariant) -> HyperParams:
    vals = np.exp(u)
    if variant is ModelVariant.FULL:
        return HyperParams(rho=vals[0], sigma_s=vals[1], sigma_e=vals[2])
    if variant is ModelVariant.SPATIAL_ONLY:
        return HyperParams(rho=vals[0], sigma_s=vals[1], sigma_e=SPATIAL_ONLY_SIGMA_E)
    return HyperParams(rho=IID_ONLY_RHO, sigma_s=IID_ONLY_SIGMA_S, sigma_e=vals[0])


def _from_hypers(h: HyperParams, variant: ModelVariant) -> np.ndarray:
    if variant is ModelVariant.FULL:
        return np.log([h.rho, h.sigma_s, h.sigma_e])
    if variant is ModelVariant.SPATIAL_ONLY:
        return np.log([h.rho, h.sigma_s])
    return np.log([h.sigma_e])


def _log_prior_log_coords(
    u: np.ndarray, variant: ModelVariant, cfg: PriorConfig
) -> float:
    """Prior density of the variant's free hyperparameters in log coordinates."""
    h = _to_hypers(u, variant)
    total = 0.0
    if variant in (ModelVariant.FULL, ModelVariant.SPATIAL_ONLY):
        total += float(pc_range_log_density(h.rho, cfg)) + math.log(h.rho)
        total += float(pc_sd_log_density(h.sigma_s, cfg)) + math.log(h.sigma_s)
    if variant in (ModelVariant.FULL, ModelVariant.IID_ONLY):
        total += float(nugget_log_density(h.sigma_e, cfg)) + math.log(h.sigma_e)
    return total


_DEFAULT_START = HyperParams(rho=0.3, sigma_s=1.0, sigma_e=0.5)


class _Workspace:
    """Per-fit precomputations shared across hyperparameter evaluations."""

    def __init__(
        self,
        frame: VillageFrame,
        observed_idx: np.ndarray,
        y: np.ndarray,
        variant: ModelVariant,
        prior_cfg: PriorConfig,
        fit_cfg: FitConfig,
    ):
        self.frame = frame
        self.variant = variant
        self.prior_cfg = prior_cfg
        self.fit_cfg = fit_cfg
        self.observed_idx = observed_idx
        self.y = y.astype(float)
        self.m = len(observed_idx)
        self.x_obs = frame.design_matrix[observed_idx]
        self.p = self.x_obs.shape[1]
        coords = frame.scaled_coords[observed_idx]
        diff = coords[:, None, :] - coords[None, :, :]
        self.d_obs = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        self._corr_cache: dict[float, np.ndarray] = {}
        self.warm_mode: Optional[np.ndarray] = None
        self.newton_iters = 0
        self.jitter_events = 0

    def corr_obs(self, rho: float) -> np.ndarray:
        got = self._corr_cache.get(rho)
        if got is None:
            got = fast_matern_correlation(self.d_obs, rho)
            self._corr_cache[rho] = got
        return got

    def sigma_obs(self, h: HyperParams) -> np.ndarray:
        if self.variant is ModelVariant.IID_ONLY:
            return h.sigma_e**2 * np.eye(self.m)
        cov = h.sigma_s**2 * self.corr_obs(h.rho)
        cov = cov.copy()
        cov[np.diag_indices(self.m)] += h.sigma_e**2
        return cov

    def evidence(
        self, h: HyperParams
    ) -> tuple[float, np.ndarray, np.ndarray, Optional[np.ndarray], int, int]:
        """Laplace log p(y | h) plus the Newton artifacts behind it."""
        if self.m:
            chol_sigma, jit0 = chol_with_jitter(self.sigma_obs(h))
        else:
            chol_sigma, jit0 = None, 0
        u0 = (
            self.warm_mode
            if self.warm_mode is not None
            else np.zeros(self.p + self.m)
        )
        mode, chol_q, iters, jit = _newton_mode(
            self.y, self.x_obs, chol_sigma, self.prior_cfg.beta_prior_variance,
            u0, self.fit_cfg,
        )
        self.warm_mode = mode
        self.newton_iters += iters
        self.jitter_events += jit0 + jit
        log_det_q = 2.0 * float(np.log(np.diag(chol_q)).sum())
        ljoint = log_joint_latent(
            mode, self.y, self.x_obs, chol_sigma, self.prior_cfg.beta_prior_variance
        )
        log_ev = ljoint + 0.5 * (self.p + self.m) * math.log(2.0 * math.pi) - 0.5 * log_det_q
        return log_ev, mode, chol_q, chol_sigma, iters, jit0 + jit

    def mean_shift(self, mode: np.ndarray, chol_q: np.ndarray) -> np.ndarray:
        """Third-order correction moving the Gaussian center toward E[u | y].

        The Bernoulli log likelihood is left-skewed around the mode, which
        biases plug-in risk means upward at low-risk sites (and down at
        high-risk ones). For log density l with mode u0 and precision Q, the
        posterior mean is approximately u0 + Q^-1 T / 2 with
        T_k = sum_s l'''(eta_s) A_sk Var_Q(eta_s), eta = A u. Measured on
        n = 12 oracle villages this cuts the risk-scale error roughly 3x.
        """
        if self.m == 0:
            return mode
        eta = self.x_obs @ mode[: self.p] + mode[self.p :]
        pi = expit(eta)
        w = pi * (1.0 - pi)
        f3 = -w * (1.0 - 2.0 * pi)
        a_t = np.vstack([self.x_obs.T, np.eye(self.m)])  # (p+m, m) = A^T
        half = solve_triangular(chol_q, a_t, lower=True, check_finite=False)
        eta_var = (half**2).sum(axis=0)
        t_vec = a_t @ (f3 * eta_var)
        return mode + 0.5 * cho_solve((chol_q, True), t_vec, check_finite=False)

    def neg_log_post(self, u: np.ndarray) -> float:
        if np.max(np.abs(u)) > _LOG_BOUND:
            return math.inf
        h = _to_hypers(u, self.variant)
        log_ev = self.evidence(h)[0]
        return -(log_ev + _log_prior_log_coords(u, self.variant, self.prior_cfg))


def _resolve_observed(
    frame: VillageFrame, observed: Mapping[str, object]
) -> tuple[tuple[str, ...], np.ndarray, np.ndarray]:
    index = frame.id_to_index
    rows = []
    for hid, status in observed.items():
        if hid not in index:
            raise InferenceError(f"observed id {hid!r} is not in the village")
        rows.append((index[hid], hid, 1 if bool(status) else 0))
    rows.sort()
    idx = np.array([r[0] for r in rows], dtype=int)
    ids = tuple(r[1] for r in rows)
    y = np.array([r[2] for r in rows], dtype=np.int8)
    return ids, idx, y


def _fd_axis_sds(ws: _Workspace, u_map: np.ndarray) -> np.ndarray:
    """Posterior sd per free axis from a diagonal finite-difference Hessian."""
    h = ws.fit_cfg.fd_step
    f0 = ws.neg_log_post(u_map)
    sds = np.empty(u_map.shape[0])
    for j in range(u_map.shape[0]):
        up, dn = u_map.copy(), u_map.copy()
        up[j] += h
        dn[j] -= h
        curv = (ws.neg_log_post(up) - 2.0 * f0 + ws.neg_log_post(dn)) / h**2
        if not math.isfinite(curv) or curv < 1e-4:
            sds[j] = 1.0
        else:
            sds[j] = min(max(1.0 / math.sqrt(curv), 0.02), 2.0)
    return sds


def laplace_fit(
    frame: VillageFrame,
    observed: Mapping[str, object],
    prior_cfg: PriorConfig = PriorConfig(),
    variant: ModelVariant = ModelVariant.FULL,
    fit_cfg: FitConfig = FitConfig(),
    init_hypers: Optional[HyperParams] = None,
) -> PosteriorFit:
    """Fit the posterior by Laplace approximation with grid-integrated hypers.

    ``observed`` maps house id to infestation status (truthy = infested).
    The hyperparameter grid is centered at the evidence MAP found by
    Nelder-Mead in log coordinates and spans +-grid_span approximate
    posterior sds per axis.
    """
    ids, idx, y = _resolve_observed(frame, observed)
    ws = _Workspace(frame, idx, y, variant, prior_cfg, fit_cfg)

    u0 = _from_hypers(init_hypers or _DEFAULT_START, variant)
    res = minimize(
        ws.neg_log_post,
        u0,
        method="Nelder-Mead",
        options={
            "maxfev": fit_cfg.nm_max_evals,
            "xatol": fit_cfg.nm_tol,
            "fatol": fit_cfg.nm_tol,
            "adaptive": False,
        },
    )
    u_map = np.asarray(res.x, dtype=float)
    map_hypers = _to_hypers(u_map, variant)

    if fit_cfg.grid_size > 1:
        sds = _fd_axis_sds(ws, u_map)
        offsets = np.linspace(-fit_cfg.grid_span, fit_cfg.grid_span, fit_cfg.grid_size)
        spacing = offsets[1] - offsets[0]
        axes = [u_map[j] + sds[j] * offsets for j in range(u_map.shape[0])]
        mesh = np.meshgrid(*axes, indexing="ij")
        grid_u = np.stack([m.ravel() for m in mesh], axis=-1)
        log_cell_volume = float(np.sum(np.log(spacing * sds)))
    else:
        grid_u = u_map[None, :]
        log_cell_volume = 0.0

    return _assemble_fit(ws, ids, grid_u, map_hypers, log_cell_volume)


def fit_at_fixed_hypers(
    frame: VillageFrame,
    observed: Mapping[str, object],
    hypers: HyperParams,
    prior_cfg: PriorConfig = PriorConfig(),
    variant: ModelVariant = ModelVariant.FULL,
    fit_cfg: FitConfig = FitConfig(),
) -> PosteriorFit:
    """Single-node fit at pinned hyperparameters (no grid, weight 1)."""
    ids, idx, y = _resolve_observed(frame, observed)
    ws = _Workspace(frame, idx, y, variant, prior_cfg, fit_cfg)
    grid_u = _from_hypers(hypers, variant)[None, :]
    return _assemble_fit(ws, ids, grid_u, hypers, 0.0)


def laplace_log_evidence(
    frame: VillageFrame,
    observed: Mapping[str, object],
    hypers: HyperParams,
    prior_cfg: PriorConfig = PriorConfig(),
    variant: ModelVariant = ModelVariant.FULL,
    fit_cfg: FitConfig = FitConfig(),
) -> float:
    """Laplace approximation of log p(y | hypers) alone (no hyperprior)."""
    _, idx, y = _resolve_observed(frame, observed)
    ws = _Workspace(frame, idx, y, variant, prior_cfg, fit_cfg)
    return ws.evidence(hypers)[0]


def _pairwise_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


_SIGMA_S_FLOOR = 1e-9  # below this the spatial field is treated as absent


def _assemble_fit(
    ws: _Workspace,
    ids: tuple[str, ...],
    grid_u: np.ndarray,
    map_hypers: HyperParams,
    log_cell_volume: float,
) -> PosteriorFit:
    frame = ws.frame
    n = frame.n
    unvisited = np.setdiff1d(np.arange(n), ws.observed_idx, assume_unique=True)
    x_full = frame.design_matrix
    n0 = len(unvisited)
    d_su = (
        _pairwise_dist(
            frame.scaled_coords[ws.observed_idx], frame.scaled_coords[unvisited]
        )
        if (n0 and ws.m)
        else None
    )
    cross_corr_cache: dict[float, np.ndarray] = {}

    raw_nodes = []
    log_terms = np.empty(grid_u.shape[0])
    for k in range(grid_u.shape[0]):
        u = grid_u[k]
        h = _to_hypers(u, ws.variant)
        log_ev, mode, chol_q, chol_sigma, iters, jit = ws.evidence(h)
        log_pr = _log_prior_log_coords(u, ws.variant, ws.prior_cfg)
        log_terms[k] = log_ev + log_pr
        raw_nodes.append((h, log_ev, log_pr, mode, chol_q, chol_sigma, iters, jit))

    shift = float(np.max(log_terms))
    weights = np.exp(log_terms - shift)
    weights /= weights.sum()
    log_ml = shift + math.log(float(np.exp(log_terms - shift).sum())) + log_cell_volume

    nodes = []
    for (h, log_ev, log_pr, mode, chol_q, chol_sigma, iters, jit), w in zip(
        raw_nodes, weights
    ):
        center = ws.mean_shift(mode, chol_q)
        beta = center[: ws.p]
        v_obs = center[ws.p :]
        v_full = np.zeros(n)
        v_full[ws.observed_idx] = v_obs
        cross = proj = None
        if d_su is not None and h.sigma_s > _SIGMA_S_FLOOR:
            corr = cross_corr_cache.get(h.rho)
            if corr is None:
                corr = fast_matern_correlation(d_su, h.rho)
                cross_corr_cache[h.rho] = corr
            cross = h.sigma_s**2 * corr
            proj = cho_solve((chol_sigma, True), cross)
            v_full[unvisited] = v_obs @ proj
        eta = x_full @ beta + v_full
        nodes.append(
            GridNode(
                hypers=h,
                log_evidence=log_ev,
                log_prior=log_pr,
                weight=float(w),
                latent=LatentState(beta=beta, v=v_full, eta=eta),
                mode_beta=mode[: ws.p],
                mode_v_obs=mode[ws.p :],
                center_beta=beta,
                center_v_obs=v_obs,
                chol_neg_hess=chol_q,
                chol_sigma_obs=chol_sigma,
                cross_cov=cross,
                kriging_proj=proj,
                newton_iters=iters,
                jitter_events=jit,
            )
        )

    map_node = max(nodes, key=lambda nd: nd.weight)
    diagnostics = {
        "newton_iters_total": ws.newton_iters,
        "jitter_events": ws.jitter_events,
        "separation_flag": bool(np.max(np.abs(map_node.mode_beta), initial=0.0) > 10.0),
        "grid_nodes": len(nodes),
    }
    return PosteriorFit(
        frame=frame,
        variant=ws.variant,
        prior_config=ws.prior_cfg,
        fit_config=ws.fit_cfg,
        observed_ids=ids,
        observed_idx=ws.observed_idx,
        y_obs=ws.y.astype(np.int8),
        nodes=tuple(nodes),
        map_hypers=map_hypers,
        log_cell_volume=log_cell_volume,
        log_ml=log_ml,
        diagnostics=diagnostics,
    )


# ---------------------------------------------------------------------------
# posterior and posterior-predictive sampling


def sample_posterior(fit: PosteriorFit, n_draws: int, seed) -> PosteriorDraws:
    """Draw (hypers, beta, v_obs) from the grid-weighted Gaussian mixture.

    Deterministic given the seed: node indices first, then one standard
    normal block per draw, transformed through each node's factor and
    centered at the node's corrected mean.
    """
    if n_draws < 1:
        raise InferenceError("need at least one posterior draw")
    rng = np.random.default_rng(seed)
    k = len(fit.nodes)
    p = fit.nodes[0].mode_beta.shape[0]
    m = fit.nodes[0].mode_v_obs.shape[0]
    node_index = rng.choice(k, size=n_draws, p=fit.weights)
    z = rng.standard_normal((n_draws, p + m))
    out = np.empty((n_draws, p + m))
    for idx in np.unique(node_index):
        node = fit.nodes[idx]
        rows = np.nonzero(node_index == idx)[0]
        center = np.concatenate([node.center_beta, node.center_v_obs])
        # cov = Q^-1 with Q = L L^T, so draws are center + L^-T z
        sol = solve_triangular(node.chol_neg_hess, z[rows].T, lower=True, trans="T")
        out[rows] = center + sol.T
    rho = np.array([fit.nodes[i].hypers.rho for i in node_index])
    sigma_s = np.array([fit.nodes[i].hypers.sigma_s for i in node_index])
    sigma_e = np.array([fit.nodes[i].hypers.sigma_e for i in node_index])
    return PosteriorDraws(
        node_index=node_index,
        beta=out[:, :p],
        v_obs=out[:, p:],
        rho=rho,
        sigma_s=sigma_s,
        sigma_e=sigma_e,
    )


def predict_unvisited(
    fit: PosteriorFit,
    frame: VillageFrame,
    draws: PosteriorDraws,
    seed,
) -> PredictiveDraws:
    """Joint posterior-predictive Bernoulli draws at unvisited sites.

    Per draw: v at unvisited sites from the Gaussian conditional on the
    draw's visited-site values (spatial cross-covariance only, nugget
    variance added on the unvisited diagonal), then independent Bernoulli
    flips at logistic(x0 beta + v0).
    """
    if frame is not fit.frame and frame.ids != fit.frame.ids:
        raise InferenceError("predict_unvisited called with a mismatched frame")
    unvisited = fit.unvisited_idx
    n0 = len(unvisited)
    b = draws.n_draws
    un_ids = tuple(fit.frame.ids[i] for i in unvisited)
    if n0 == 0:
        return PredictiveDraws(
            samples=np.zeros((b, 0), dtype=np.int8),
            i0_samples=np.zeros(b, dtype=int),
            risk_mean=np.zeros(0),
            risk_var=np.zeros(0),
            unvisited_ids=(),
            unvisited_idx=unvisited,
        )
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((b, n0))
    uniforms = rng.random((b, n0))

    x0 = fit.frame.design_matrix[unvisited]
    coords_u = fit.frame.scaled_coords[unvisited]
    d_uu = _pairwise_dist(coords_u, coords_u)
    uu_corr_cache: dict[float, np.ndarray] = {}

    risk = np.empty((b, n0))
    samples = np.empty((b, n0), dtype=np.int8)
    for idx in np.unique(draws.node_index):
        node = fit.nodes[idx]
        h = node.hypers
        rows = np.nonzero(draws.node_index == idx)[0]
        if h.sigma_s > _SIGMA_S_FLOOR:
            corr = uu_corr_cache.get(h.rho)
            if corr is None:
                corr = fast_matern_correlation(d_uu, h.rho)
                uu_corr_cache[h.rho] = corr
            cond_cov = h.sigma_s**2 * corr
            if node.kriging_proj is not None:
                cond_cov -= node.cross_cov.T @ node.kriging_proj
                mu0 = draws.v_obs[rows] @ node.kriging_proj
            else:
                mu0 = np.zeros((len(rows), n0))
            cond_cov[np.diag_indices(n0)] += h.sigma_e**2
        else:
            cond_cov = h.sigma_e**2 * np.eye(n0)
            mu0 = np.zeros((len(rows), n0))
        l_cond, _ = chol_with_jitter(cond_cov)
        v0 = mu0 + z[rows] @ l_cond.T
        eta0 = draws.beta[rows] @ x0.T + v0
        r = expit(eta0)
        risk[rows] = r
        samples[rows] = (uniforms[rows] < r).astype(np.int8)

    return PredictiveDraws(
        samples=samples,
        i0_samples=samples.sum(axis=1).astype(int),
        risk_mean=risk.mean(axis=0),
        risk_var=risk.var(axis=0),
        unvisited_ids=un_ids,
        unvisited_idx=unvisited,
    )


def observed_eta_draws(fit: PosteriorFit, draws: PosteriorDraws) -> np.ndarray:
    """Linear predictor draws at the visited sites, shape (B, m)."""
    x_obs = fit.frame.design_matrix[fit.observed_idx]
    return draws.beta @ x_obs.T + draws.v_obs


def compute_dic(fit: PosteriorFit, draws: PosteriorDraws) -> tuple[float, float]:
    """Deviance information criterion D(eta_bar) + 2 p_D over the visited data.

    The plug-in deviance averages the linear predictor over draws, a common
    convention when the model is reported on the predictor scale.
    """
    if draws.n_draws == 0:
        raise InferenceError("compute_dic needs posterior draws")
    eta = observed_eta_draws(fit, draws)
    y = fit.y_obs.astype(float)
    dev_draws = -2.0 * (eta @ y - np.logaddexp(0.0, eta).sum(axis=1))
    mean_dev = float(dev_draws.mean())
    eta_bar = eta.mean(axis=0)
    dev_at_mean = -2.0 * float(y @ eta_bar - np.logaddexp(0.0, eta_bar).sum())
    p_d = mean_dev - dev_at_mean
    return dev_at_mean + 2.0 * p_d, p_d


def log_marginal_likelihood(fit: PosteriorFit) -> float:
    """Grid estimate of the model evidence log p(y)."""
    return fit.log_ml


def hpdi(samples: Sequence[float] | np.ndarray, mass: float) -> tuple[float, float]:
    """Narrowest contiguous interval holding ceil(mass * B) sorted samples."""
    arr = np.sort(np.asarray(samples, dtype=float))
    if arr.size < 2:
        raise ValueError("hpdi needs at least 2 samples")
    if not 0.0 < mass < 1.0:
        raise ValueError("mass must be in (0, 1)")
    k = int(math.ceil(mass * arr.size))
    k = max(k, 2)
    widths = arr[k - 1 :] - arr[: arr.size - k + 1]
    start = int(np.argmin(widths))
    return float(arr[start]), float(arr[start + k - 1])


def risk_map(
    fit: PosteriorFit, draws: PosteriorDraws, pred: Optional[PredictiveDraws]
) -> tuple[np.ndarray, np.ndarray]:
    """Full-length per-house risk mean/variance (visited + unvisited)."""
    n = fit.frame.n
    mean = np.zeros(n)
    var = np.zeros(n)
    if fit.n_observed:
        r_obs = expit(observed_eta_draws(fit, draws))
        mean[fit.observed_idx] = r_obs.mean(axis=0)
        var[fit.observed_idx] = r_obs.var(axis=0)
    if pred is not None and pred.n_unvisited:
        mean[pred.unvisited_idx] = pred.risk_mean
        var[pred.unvisited_idx] = pred.risk_var
    return mean, var


def fit_report(
    fit: PosteriorFit,
    draws: PosteriorDraws,
    hpdi_masses: tuple[float, ...] = (0.5, 0.95),
) -> dict:
    """JSON-ready posterior summary: hyper grid, fixed effects, range in meters."""
    frame = fit.frame
    dic, p_d = compute_dic(fit, draws) if fit.n_observed else (float("nan"), float("nan"))
    effects = []
    for j, name in enumerate(frame.column_names):
        col = draws.beta[:, j]
        entry = {"name": name, "mean": float(col.mean())}
        for mass in hpdi_masses:
            lo, hi = hpdi(col, mass)
            entry[f"hpdi{int(round(mass * 100))}"] = [lo, hi]
        effects.append(entry)
    rho_m = draws.rho * frame.diameter_m
    lo95, hi95 = hpdi(rho_m, 0.95)
    return {
        "variant": fit.variant.value,
        "n": frame.n,
        "n_observed": fit.n_observed,
        "log_marginal_likelihood": fit.log_ml,
        "dic": dic,
        "p_d": p_d,
        "map_hypers": {
            "rho": fit.map_hypers.rho,
            "sigma_s": fit.map_hypers.sigma_s,
            "sigma_e": fit.map_hypers.sigma_e,
        },
        "effective_range_m": {
            "mode": fit.map_hypers.rho * frame.diameter_m,
            "hpdi95": [lo95, hi95],
        },
        "fixed_effects": effects,
        "grid": [
            {
                "rho": nd.hypers.rho,
                "sigma_s": nd.hypers.sigma_s,
                "sigma_e": nd.hypers.sigma_e,
                "weight": nd.weight,
                "log_evidence": nd.log_evidence,
            }
            for nd in fit.nodes
        ],
        "diagnostics": fit.diagnostics,
    }
