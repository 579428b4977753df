"""Long-run MCMC oracle for the latent spatial logistic model.

Independent of the Laplace engine: elliptical slice sampling on the joint
Gaussian block (beta, v at all sites) interleaved with a non-centered
random-walk Metropolis update of (rho, sigma_s, sigma_e) in log space.
Used only by tests to validate posterior risk means.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import solve_triangular
from scipy.spatial.distance import pdist
from scipy.special import expit, kv

from geosampler.priors import PriorConfig


def _corr_exact(d_condensed: np.ndarray, rho: float) -> np.ndarray:
    kd = (math.sqrt(8.0) / rho) * d_condensed
    kd = np.maximum(kd, 1e-12)
    return kd * kv(1.0, kd)


def _log_prior_theta(u: np.ndarray, cfg: PriorConfig) -> float:
    """PC + gamma prior density of (rho, sigma_s, sigma_e) in log coordinates."""
    rho, ss, se = math.exp(u[0]), math.exp(u[1]), math.exp(u[2])
    lam1, lam2 = cfg.lambda_range, cfg.lambda_sd
    shape, rate = cfg.nugget_prior
    lp = math.log(lam1) - 2.0 * math.log(rho) - lam1 / rho + u[0]
    lp += math.log(lam2) - lam2 * ss + u[1]
    tau = se**-2.0
    lp += (
        shape * math.log(rate)
        - math.lgamma(shape)
        + (shape - 1.0) * math.log(tau)
        - rate * tau
        + math.log(2.0)
        - 3.0 * math.log(se)
        + u[2]
    )
    return lp


def mcmc_risk_oracle(
    frame,
    observed: dict,
    prior_cfg: PriorConfig = PriorConfig(),
    n_draws: int = 200_000,
    n_burn: int = 20_000,
    seed: int = 0,
    fixed_theta=None,
    theta_step: float = 0.5,
    collect_theta: bool = False,
):
    """Posterior risk mean/sd per village site from a long MCMC run.

    ``fixed_theta`` (rho, sigma_s, sigma_e) pins the hyperparameters and
    skips their update, which gives an exact-target sampler for validating
    the machinery against quadrature on tiny cases.
    """
    rng = np.random.default_rng(seed)
    x = frame.design_matrix
    n, p = x.shape
    idx = {hid: i for i, hid in enumerate(frame.ids)}
    obs_items = sorted((idx[h], bool(s)) for h, s in observed.items())
    obs_idx = np.array([i for i, _ in obs_items], dtype=int)
    y = np.array([1.0 if s else 0.0 for _, s in obs_items])
    x_obs = x[obs_idx]
    d_cond = pdist(frame.scaled_coords)
    iu = np.triu_indices(n, 1)
    beta_sd = math.sqrt(prior_cfg.beta_prior_variance)

    def chol_cov(u_theta: np.ndarray) -> np.ndarray:
        rho, ss, se = math.exp(u_theta[0]), math.exp(u_theta[1]), math.exp(u_theta[2])
        cov = np.empty((n, n))
        vals = ss**2 * _corr_exact(d_cond, rho)
        cov[iu] = vals
        cov.T[iu] = vals
        cov[np.diag_indices(n)] = ss**2 + se**2
        return np.linalg.cholesky(cov)

    if fixed_theta is not None:
        u_theta = np.log(np.asarray(fixed_theta, dtype=float))
    else:
        u_theta = np.log([0.3, 1.0, 0.5])
    l_cov = chol_cov(u_theta)

    beta = np.zeros(p)
    v = np.zeros(n)

    def loglik(beta_vec, v_vec) -> float:
        eta = x_obs @ beta_vec + v_vec[obs_idx]
        return float(y @ eta - np.logaddexp(0.0, eta).sum())

    ll = loglik(beta, v)
    lp_theta = _log_prior_theta(u_theta, prior_cfg)

    risk_sum = np.zeros(n)
    risk_sq = np.zeros(n)
    kept = 0
    accepted = 0
    proposals = 0
    step = theta_step
    theta_trace = [] if collect_theta else None

    total = n_burn + n_draws
    chunk = 20_000
    two_pi = 2.0 * math.pi
    it = 0
    while it < total:
        m_chunk = min(chunk, total - it)
        # pregenerate the per-sweep randomness with fixed layout
        z_beta = rng.standard_normal((m_chunk, p))
        z_v = rng.standard_normal((m_chunk, n))
        log_u_ess = np.log(rng.random(m_chunk))
        angles0 = rng.uniform(0.0, two_pi, m_chunk)
        z_theta = rng.standard_normal((m_chunk, 3))
        log_u_met = np.log(rng.random(m_chunk))
        for j in range(m_chunk):
            # --- elliptical slice step on the joint Gaussian block (beta, v)
            nu_beta = beta_sd * z_beta[j]
            nu_v = l_cov @ z_v[j]
            log_u = ll + log_u_ess[j]
            angle = angles0[j]
            lo, hi = angle - two_pi, angle
            while True:
                ca, sa = math.cos(angle), math.sin(angle)
                cand_beta = beta * ca + nu_beta * sa
                cand_v = v * ca + nu_v * sa
                cand_ll = loglik(cand_beta, cand_v)
                if cand_ll > log_u:
                    beta, v, ll = cand_beta, cand_v, cand_ll
                    break
                if angle < 0.0:
                    lo = angle
                else:
                    hi = angle
                angle = rng.uniform(lo, hi)

            # --- non-centered Metropolis on log(theta), whitened field fixed
            if fixed_theta is None:
                w = solve_triangular(l_cov, v, lower=True, check_finite=False)
                u_prop = u_theta + step * z_theta[j]
                l_prop = chol_cov(u_prop)
                v_prop = l_prop @ w
                ll_prop = loglik(beta, v_prop)
                lp_prop = _log_prior_theta(u_prop, prior_cfg)
                proposals += 1
                if log_u_met[j] < (ll_prop + lp_prop) - (ll + lp_theta):
                    u_theta, l_cov, v = u_prop, l_prop, v_prop
                    ll, lp_theta = ll_prop, lp_prop
                    accepted += 1
                if it + j < n_burn and proposals % 100 == 0:
                    rate = accepted / proposals
                    step = min(max(step * math.exp(0.5 * (rate - 0.3)), 0.02), 2.0)

            if it + j >= n_burn:
                risk = expit(x @ beta + v)
                risk_sum += risk
                risk_sq += risk * risk
                kept += 1
                if theta_trace is not None:
                    theta_trace.append(u_theta.copy())
        it += m_chunk

    mean = risk_sum / kept
    var = np.maximum(risk_sq / kept - mean**2, 0.0)
    out = {
        "risk_mean": mean,
        "risk_sd": np.sqrt(var),
        "acceptance": accepted / proposals if proposals else None,
        "n_kept": kept,
    }
    if theta_trace is not None:
        out["theta_log"] = np.array(theta_trace)
    return out
