"""Sequential design loop: exploration schedule, utility, termination, batches.

Each iteration fits the posterior on everything observed so far, draws the
posterior predictive for the unvisited houses, and either stops (when the
estimated probability that fewer than target_rate * n unvisited houses are
infested reaches the confidence level) or visits the top-scoring batch.
Utility blends standardized predicted risk with standardized predictive
variance through the schedule weight t = ((m_i - m1)/(n - m1))^alpha.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .inference import (
    FitConfig,
    ModelVariant,
    PosteriorFit,
    PredictiveDraws,
    laplace_fit,
    predict_unvisited,
    sample_posterior,
)
from .priors import HyperParams, PriorConfig
from .village import VillageFrame

StatusOracle = Callable[[str], bool]


class DesignError(ValueError):
    """Raised on invalid design configuration or loop preconditions."""


@dataclass(frozen=True)
class DesignConfig:
    alpha: float = 1.0
    batch_size: int = 3
    initial_size: int = 10
    target_rate: float = 0.05
    confidence: float = 0.95
    mc_draws: int = 5000
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise DesignError("alpha must be >= 0")
        if self.batch_size < 1 or self.initial_size < 1:
            raise DesignError("batch_size and initial_size must be >= 1")
        if not 0.0 < self.target_rate < 1.0:
            raise DesignError("target_rate must be in (0, 1)")
        if not 0.0 < self.confidence < 1.0:
            raise DesignError("confidence must be in (0, 1)")
        if self.mc_draws < 1:
            raise DesignError("mc_draws must be >= 1")

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "batch_size": self.batch_size,
            "initial_size": self.initial_size,
            "target_rate": self.target_rate,
            "confidence": self.confidence,
            "mc_draws": self.mc_draws,
            "seed": self.seed,
        }

    @staticmethod
    def from_json(obj: dict) -> "DesignConfig":
        known = {f for f in DesignConfig.__dataclass_fields__}
        kwargs = {k: v for k, v in obj.items() if k in known}
        for key in ("batch_size", "initial_size", "mc_draws", "seed"):
            if key in kwargs:
                kwargs[key] = int(kwargs[key])
        return DesignConfig(**kwargs)


@dataclass(frozen=True)
class TerminationReport:
    p_below: float
    decision: bool
    n: int
    n0: int
    threshold_count: int  # ceil(target_rate * n); the rule itself is strict
    i0_mean: float
    i0_q05: float
    i0_q50: float
    i0_q95: float

    def to_json(self) -> dict:
        return {
            "p_below": self.p_below,
            "decision": self.decision,
            "n": self.n,
            "n0": self.n0,
            "threshold_count": self.threshold_count,
            "i0_mean": self.i0_mean,
            "i0_quantiles": [self.i0_q05, self.i0_q50, self.i0_q95],
        }


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    m_visited: int
    report: TerminationReport
    t_weight: Optional[float]
    added_ids: tuple[str, ...]
    batch_utilities: tuple[dict, ...]  # per added id: U, t, r_std, v_std

    def to_json(self) -> dict:
        return {
            "iteration": self.iteration,
            "m_visited": self.m_visited,
            "added_ids": list(self.added_ids),
            "t": self.t_weight,
            "p_below": self.report.p_below,
            "decision": self.report.decision,
        }


@dataclass
class DesignState:
    config: DesignConfig
    strategy: str  # "adaptive" or "random"
    visited: list[tuple[str, int]] = field(default_factory=list)  # (id, batch index)
    observations: dict[str, bool] = field(default_factory=dict)
    iteration: int = 0
    history: list[IterationRecord] = field(default_factory=list)
    terminated: bool = False

    @property
    def m_i(self) -> int:
        return len(self.visited)

    @property
    def visited_ids(self) -> tuple[str, ...]:
        return tuple(v for v, _ in self.visited)

    def to_json(self) -> dict:
        return {
            "strategy": self.strategy,
            "config": self.config.to_json(),
            "visited": [{"id": v, "batch": b} for v, b in self.visited],
            "iterations": [rec.to_json() for rec in self.history],
            "terminated": self.terminated,
            "final_size": self.m_i,
        }


def schedule_t(m_i: int, m1: int, n: int, alpha: float) -> float:
    """Exploration-to-risk weight ((m_i - m1)/(n - m1))^alpha, with 0^0 = 1.

    alpha = 0 therefore gives pure risk targeting from the first adaptive
    batch; larger alpha keeps the variance term dominant for longer.
    """
    if alpha < 0:
        raise DesignError("alpha must be >= 0")
    if n == m1:
        raise DesignError("schedule undefined when the initial design is the village")
    if not m1 <= m_i <= n:
        raise DesignError(f"need m1 <= m_i <= n, got m1={m1}, m_i={m_i}, n={n}")
    base = (m_i - m1) / (n - m1)
    if alpha == 0.0:
        return 1.0
    return float(base**alpha)


def _standardize_pop(col: np.ndarray) -> np.ndarray:
    sd = float(np.std(col))
    if sd <= 1e-12 * max(1.0, abs(float(np.mean(col)))):
        return np.zeros_like(col)
    return (col - np.mean(col)) / sd


def utility_scores(pred: PredictiveDraws, t: float) -> np.ndarray:
    """Per-unvisited-house utility t * r_std + (1 - t) * v_std."""
    if pred.n_unvisited < 1:
        raise DesignError("utility needs at least one unvisited house")
    r_std = _standardize_pop(pred.risk_mean)
    v_std = _standardize_pop(pred.risk_var)
    return t * r_std + (1.0 - t) * v_std


def check_termination(
    pred: PredictiveDraws, cfg: DesignConfig, n: int
) -> TerminationReport:
    """Estimate P(I0 < target_rate * n) from the predictive count draws."""
    kappa_n = cfg.target_rate * n
    i0 = pred.i0_samples
    if i0.size == 0:
        p_below, mean, q05, q50, q95 = 1.0, 0.0, 0.0, 0.0, 0.0
    else:
        p_below = float(np.mean(i0 < kappa_n))
        mean = float(i0.mean())
        q05, q50, q95 = (float(q) for q in np.quantile(i0, [0.05, 0.5, 0.95]))
    return TerminationReport(
        p_below=p_below,
        decision=p_below >= cfg.confidence,
        n=n,
        n0=pred.n_unvisited,
        threshold_count=int(math.ceil(kappa_n)),
        i0_mean=mean,
        i0_q05=q05,
        i0_q50=q50,
        i0_q95=q95,
    )


def select_batch(
    scores: np.ndarray, ids: Sequence[str], batch_size: int
) -> list[str]:
    """Top-batch_size ids by utility; ties broken by ascending id."""
    if len(ids) < 1:
        raise DesignError("no unvisited houses to select from")
    order = sorted(zip(ids, scores), key=lambda kv: (-kv[1], kv[0]))
    return [hid for hid, _ in order[: min(batch_size, len(order))]]


def true_status_oracle(frame: VillageFrame) -> StatusOracle:
    """Oracle answering from the frame's simulation ground truth."""
    truth = frame.true_status
    if truth is None:
        raise DesignError("frame has no true_status; cannot build an oracle")
    lookup = {hid: bool(t) for hid, t in zip(frame.ids, truth)}
    return lambda hid: lookup[hid]


def draw_initial_design(frame: VillageFrame, cfg: DesignConfig) -> list[str]:
    """Uniform initial design of initial_size houses, deterministic per seed."""
    if cfg.initial_size > frame.n:
        raise DesignError(
            f"initial_size {cfg.initial_size} exceeds village size {frame.n}"
        )
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    idx = rng.choice(frame.n, size=cfg.initial_size, replace=False)
    return [frame.ids[i] for i in sorted(idx)]


def _iteration_seed(cfg: DesignConfig, iteration: int, stream: int):
    return np.random.SeedSequence(cfg.seed, spawn_key=(iteration, stream))


def evaluate_design(
    frame: VillageFrame,
    observations: dict[str, bool],
    cfg: DesignConfig,
    iteration: int,
    prior_cfg: PriorConfig,
    fit_cfg: FitConfig,
    variant: ModelVariant,
    init_hypers: Optional[HyperParams] = None,
):
    """One fit + predictive + termination evaluation; shared with the service."""
    fit = laplace_fit(
        frame, observations, prior_cfg, variant, fit_cfg, init_hypers=init_hypers
    )
    draws = sample_posterior(fit, cfg.mc_draws, seed=_iteration_seed(cfg, iteration, 1))
    pred = predict_unvisited(fit, frame, draws, seed=_iteration_seed(cfg, iteration, 2))
    report = check_termination(pred, cfg, frame.n)
    return fit, draws, pred, report


def _run_loop(
    frame: VillageFrame,
    cfg: DesignConfig,
    oracle: StatusOracle,
    strategy: str,
    prior_cfg: PriorConfig,
    fit_cfg: FitConfig,
    variant: ModelVariant,
    initial_ids: Optional[Sequence[str]],
) -> DesignState:
    if initial_ids is None:
        initial_ids = draw_initial_design(frame, cfg)
    else:
        initial_ids = list(initial_ids)
        known = set(frame.ids)
        bad = [hid for hid in initial_ids if hid not in known]
        if bad or len(set(initial_ids)) != len(initial_ids):
            raise DesignError(f"invalid initial design (unknown or duplicate ids: {bad})")
    state = DesignState(config=cfg, strategy=strategy)
    m1 = len(initial_ids)
    n = frame.n

    for hid in initial_ids:
        state.visited.append((hid, 0))
        state.observations[hid] = bool(oracle(hid))

    warm: Optional[HyperParams] = None
    iteration = 1
    max_iters = math.ceil((n - m1) / cfg.batch_size) + 1
    while True:
        fit, draws, pred, report = evaluate_design(
            frame, state.observations, cfg, iteration, prior_cfg, fit_cfg, variant,
            init_hypers=warm,
        )
        warm = fit.map_hypers
        state.iteration = iteration
        if report.decision or pred.n_unvisited == 0:
            state.history.append(
                IterationRecord(iteration, state.m_i, report, None, (), ())
            )
            state.terminated = True
            break

        if strategy == "adaptive":
            t = schedule_t(state.m_i, m1, n, cfg.alpha)
            scores = utility_scores(pred, t)
            batch = select_batch(scores, pred.unvisited_ids, cfg.batch_size)
            by_id = dict(zip(pred.unvisited_ids, zip(scores,
                         _standardize_pop(pred.risk_mean), _standardize_pop(pred.risk_var))))
            details = tuple(
                {
                    "id": hid,
                    "U": float(by_id[hid][0]),
                    "t": t,
                    "r_std": float(by_id[hid][1]),
                    "v_std": float(by_id[hid][2]),
                }
                for hid in batch
            )
        elif strategy == "random":
            t = None
            rng = np.random.default_rng(_iteration_seed(cfg, iteration, 3))
            pool = list(pred.unvisited_ids)
            take = min(cfg.batch_size, len(pool))
            batch = [pool[i] for i in sorted(rng.choice(len(pool), take, replace=False))]
            details = tuple({"id": hid} for hid in batch)
        else:
            raise DesignError(f"unknown strategy {strategy!r}")

        state.history.append(
            IterationRecord(iteration, state.m_i, report, t, tuple(batch), details)
        )
        for hid in batch:
            state.visited.append((hid, iteration))
            state.observations[hid] = bool(oracle(hid))
        iteration += 1
        if iteration > max_iters:  # unreachable; the predictive empties first
            raise DesignError("design loop exceeded its halting bound")
    return state


def run_adaptive(
    frame: VillageFrame,
    cfg: DesignConfig,
    oracle: StatusOracle,
    prior_cfg: PriorConfig = PriorConfig(),
    fit_cfg: FitConfig = FitConfig(),
    variant: ModelVariant = ModelVariant.FULL,
    initial_ids: Optional[Sequence[str]] = None,
) -> DesignState:
    """Utility-guided sequential design; terminates on the confidence rule."""
    return _run_loop(
        frame, cfg, oracle, "adaptive", prior_cfg, fit_cfg, variant, initial_ids
    )


def run_random(
    frame: VillageFrame,
    cfg: DesignConfig,
    oracle: StatusOracle,
    prior_cfg: PriorConfig = PriorConfig(),
    fit_cfg: FitConfig = FitConfig(),
    variant: ModelVariant = ModelVariant.FULL,
    initial_ids: Optional[Sequence[str]] = None,
) -> DesignState:
    """Baseline: same loop and termination rule, uniformly random batches."""
    return _run_loop(
        frame, cfg, oracle, "random", prior_cfg, fit_cfg, variant, initial_ids
    )
