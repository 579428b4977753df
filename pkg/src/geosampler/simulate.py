"""Synthetic villages with known ground truth and the replication protocol.

Villages are generated from the same model the engine fits: covariates and
locations are drawn, a latent field v ~ N(0, sigma_s^2 M + sigma_e^2 I) is
sampled on the diameter-scaled coordinates, and true statuses are Bernoulli
at logistic(x beta + v) with the intercept bisected so the realized mean
risk hits a target baseline rate. The experiment runner replays the paper-
style protocol: per replication one shared uniform initial design, each
strategy (a sweep of exploration parameters plus a random baseline) run on
both covariate sets, with per-run RNG streams derived purely from indices.
"""

from __future__ import annotations

import csv
import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .design import (
    DesignConfig,
    draw_initial_design,
    run_adaptive,
    run_random,
    true_status_oracle,
)
from .inference import FitConfig
from .priors import PriorConfig, chol_with_jitter, matern_correlation
from .village import (
    CovariateSchema,
    CovariateSet,
    HouseRecord,
    HouseStatus,
    VillageFrame,
    build_frame,
    write_village_csv,
)


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    n: int = 150
    layout: str = "uniform"  # "uniform" | "clustered"
    cluster_parents: int = 6
    cluster_spread_m: float = 90.0
    extent_m: float = 1200.0
    rho: float = 0.25  # true effective range, scaled units
    sigma_s: float = 1.2
    sigma_e: float = 0.4
    baseline_rate: float = 0.2
    n_continuous: int = 4
    n_categorical: int = 2
    categorical_levels: int = 3
    covariate_effect_sd: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise SimulationError("need n >= 2")
        if not 0.0 < self.baseline_rate < 1.0:
            raise SimulationError("baseline_rate must be in (0, 1)")
        if self.layout not in ("uniform", "clustered"):
            raise SimulationError(f"unknown layout {self.layout!r}")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @staticmethod
    def from_json(obj: dict) -> "GeneratorConfig":
        known = {f for f in GeneratorConfig.__dataclass_fields__}
        return GeneratorConfig(**{k: v for k, v in obj.items() if k in known})


def _sample_locations(cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.layout == "uniform":
        return rng.uniform(0.0, cfg.extent_m, (cfg.n, 2))
    parents = rng.uniform(0.0, cfg.extent_m, (cfg.cluster_parents, 2))
    assign = rng.integers(0, cfg.cluster_parents, cfg.n)
    pts = parents[assign] + rng.normal(0.0, cfg.cluster_spread_m, (cfg.n, 2))
    return np.clip(pts, 0.0, cfg.extent_m)


def _sample_covariates(
    cfg: GeneratorConfig, rng: np.random.Generator
) -> tuple[CovariateSchema, list[dict]]:
    cont = tuple(f"cont_{j + 1}" for j in range(cfg.n_continuous))
    levels = tuple(chr(ord("a") + k) for k in range(cfg.categorical_levels))
    cat = {f"cat_{j + 1}": levels for j in range(cfg.n_categorical)}
    schema = CovariateSchema(continuous=cont, categorical=cat)
    rows: list[dict] = [{} for _ in range(cfg.n)]
    for name in cont:
        lam = rng.uniform(1.0, 6.0)
        vals = rng.poisson(lam, cfg.n)
        for i in range(cfg.n):
            rows[i][name] = int(vals[i])
    for name, lvls in cat.items():
        probs = rng.dirichlet(np.full(len(lvls), 2.0))
        vals = rng.choice(len(lvls), size=cfg.n, p=probs)
        for i in range(cfg.n):
            rows[i][name] = lvls[vals[i]]
    return schema, rows


def _calibrate_intercept(
    eta_rest: np.ndarray, target: float, tol: float = 0.005, max_steps: int = 100
) -> float:
    """Bisect b0 so mean(expit(b0 + eta_rest)) hits the target rate."""
    lo, hi = -25.0, 25.0
    rate = lambda b0: float(np.mean(expit(b0 + eta_rest)))
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        if rate(mid) < target:
            lo = mid
        else:
            hi = mid
        if abs(rate(mid) - target) <= tol * 0.5:
            return mid
    mid = 0.5 * (lo + hi)
    if abs(rate(mid) - target) > tol:
        raise SimulationError(
            f"intercept calibration failed: rate {rate(mid):.4f} vs target {target:.4f}"
        )
    return mid


def generate_village(cfg: GeneratorConfig) -> VillageFrame:
    """Synthetic village with true statuses; returns the ALL-covariate frame."""
    rng = np.random.default_rng(cfg.seed)
    coords = _sample_locations(cfg, rng)
    schema, cov_rows = _sample_covariates(cfg, rng)

    width = len(str(cfg.n - 1))
    houses = [
        HouseRecord(
            id=f"h{i:0{width}d}", x_m=float(coords[i, 0]), y_m=float(coords[i, 1]),
            covariates=cov_rows[i],
        )
        for i in range(cfg.n)
    ]
    bare = build_frame(houses, schema, CovariateSet.ALL)

    x = bare.design_matrix
    p = x.shape[1]
    beta = rng.normal(0.0, cfg.covariate_effect_sd, p)

    corr = matern_correlation(
        np.sqrt(
            ((bare.scaled_coords[:, None, :] - bare.scaled_coords[None, :, :]) ** 2).sum(
                axis=-1
            )
        ),
        cfg.rho,
    )
    cov = cfg.sigma_s**2 * corr
    cov[np.diag_indices(cfg.n)] += cfg.sigma_e**2
    l_cov, _ = chol_with_jitter(cov)
    v = l_cov @ rng.standard_normal(cfg.n)

    eta_rest = x[:, 1:] @ beta[1:] + v
    beta0 = _calibrate_intercept(eta_rest, cfg.baseline_rate)
    risk = expit(beta0 + eta_rest)
    truth = (rng.random(cfg.n) < risk).astype(int)

    labelled = [
        HouseRecord(
            id=h.id, x_m=h.x_m, y_m=h.y_m, covariates=h.covariates,
            status=HouseStatus.UNKNOWN, true_status=int(truth[i]),
        )
        for i, h in enumerate(houses)
    ]
    return build_frame(labelled, schema, CovariateSet.ALL)


def write_village_files(frame: VillageFrame, csv_path: str | Path) -> None:
    """Persist a generated village (CSV + sidecar schema) for the CLI."""
    write_village_csv(frame.houses, frame.schema, csv_path)


# ---------------------------------------------------------------------------
# experiment protocol


@dataclass(frozen=True)
class RunResult:
    village: str
    strategy: str
    covset: str
    rep: int
    design_size: int
    design_frac: float
    remaining_rate: float
    terminated_iter: int
    initial_ids: tuple[str, ...] = ()  # not exported; pairing evidence

    def to_row(self) -> list:
        return [
            self.village, self.strategy, self.covset, self.rep,
            self.design_size, f"{self.design_frac:.6f}",
            f"{self.remaining_rate:.6f}", self.terminated_iter,
        ]


@dataclass
class ExperimentResult:
    runs: list[RunResult]
    failures: list[dict]
    config: dict


@dataclass(frozen=True)
class ExperimentConfig:
    villages: tuple[GeneratorConfig, ...]
    village_names: tuple[str, ...]
    alphas: tuple[float, ...] = (0.0, 0.15, 0.3, 0.7, 1.0, 2.0)
    include_random: bool = True
    covsets: tuple[str, ...] = ("global", "all")
    reps: int = 50
    master_seed: int = 20110801
    workers: int = 1
    design: DesignConfig = DesignConfig()
    prior: PriorConfig = PriorConfig()
    fit: FitConfig = FitConfig()

    @property
    def strategies(self) -> tuple[str, ...]:
        out = tuple(f"alpha={a:g}" for a in self.alphas)
        if self.include_random:
            out = out + ("random",)
        return out

    def to_json(self) -> dict:
        return {
            "villages": [
                {"name": nm, **gc.to_json()}
                for nm, gc in zip(self.village_names, self.villages)
            ],
            "alphas": list(self.alphas),
            "include_random": self.include_random,
            "covsets": list(self.covsets),
            "reps": self.reps,
            "master_seed": self.master_seed,
            "workers": self.workers,
            "design": self.design.to_json(),
            "prior": self.prior.to_json(),
            "fit": self.fit.to_json(),
        }


# mirrors the study's observed regime: five sizes, baseline rates swept
PAPER_SCALE_SIZES = (108, 147, 172, 207, 251)
PAPER_SCALE_RATES = (0.10, 0.20, 0.35, 0.10, 0.20)


def paper_scale_config(
    reps: int = 50,
    workers: int = 1,
    master_seed: int = 20110801,
    fit: FitConfig = FitConfig(),
    design: DesignConfig = DesignConfig(),
) -> ExperimentConfig:
    villages = []
    names = []
    for k, (n, rate) in enumerate(zip(PAPER_SCALE_SIZES, PAPER_SCALE_RATES)):
        villages.append(
            GeneratorConfig(
                n=n,
                layout="clustered" if k % 2 else "uniform",
                baseline_rate=rate,
                seed=master_seed + 17 * (k + 1),
            )
        )
        names.append(f"village_{n}")
    return ExperimentConfig(
        villages=tuple(villages),
        village_names=tuple(names),
        reps=reps,
        workers=workers,
        master_seed=master_seed,
        fit=fit,
        design=design,
    )


def experiment_config_from_json(obj: dict) -> ExperimentConfig:
    villages = []
    names = []
    for k, vob in enumerate(obj.get("villages", [])):
        names.append(vob.get("name", f"village_{k}"))
        villages.append(GeneratorConfig.from_json(vob))
    if not villages:
        base = paper_scale_config()
        villages, names = list(base.villages), list(base.village_names)
    return ExperimentConfig(
        villages=tuple(villages),
        village_names=tuple(names),
        alphas=tuple(obj.get("alphas", (0.0, 0.15, 0.3, 0.7, 1.0, 2.0))),
        include_random=bool(obj.get("include_random", True)),
        covsets=tuple(obj.get("covsets", ("global", "all"))),
        reps=int(obj.get("reps", 50)),
        master_seed=int(obj.get("master_seed", 20110801)),
        workers=int(obj.get("workers", 1)),
        design=DesignConfig.from_json(obj.get("design", {})),
        prior=PriorConfig.from_json(obj.get("prior", {})),
        fit=FitConfig.from_json(obj.get("fit", {})),
    )


def _derived_seed(master: int, *key: int) -> int:
    return int(np.random.SeedSequence(master, spawn_key=tuple(key)).generate_state(1)[0])


def remaining_rate(frame: VillageFrame, visited_ids: Sequence[str]) -> float:
    """Truly infested houses outside the design, over the whole village."""
    truth = frame.true_status
    if truth is None:
        raise SimulationError("remaining_rate needs true statuses")
    visited = set(visited_ids)
    left = sum(int(t) for hid, t in zip(frame.ids, truth) if hid not in visited)
    return left / frame.n


_WORKER_CTX: dict = {}


def _init_worker(frames_by_village: dict, cfg_json: dict) -> None:
    _WORKER_CTX["frames"] = frames_by_village
    _WORKER_CTX["cfg"] = cfg_json


def _run_single(task: tuple) -> dict:
    """One (village, strategy, covset, rep) run; executed in a worker process."""
    (vi, si, ci, rep, village_name, strategy, covset, initial_ids,
     design_json, prior_json, fit_json, master_seed) = task
    frames = _WORKER_CTX["frames"]
    frame_all, frame_global = frames[village_name]
    frame = frame_all if covset == "all" else frame_global
    run_seed = _derived_seed(master_seed, vi, si, ci, rep)
    cfg = DesignConfig.from_json({**design_json, "seed": run_seed})
    prior_cfg = PriorConfig.from_json(prior_json)
    fit_cfg = FitConfig.from_json(fit_json)
    oracle = true_status_oracle(frame_all)
    runner = run_random if strategy == "random" else run_adaptive
    if strategy != "random":
        alpha = float(strategy.split("=", 1)[1])
        cfg = DesignConfig.from_json({**cfg.to_json(), "alpha": alpha})
    state = runner(
        frame, cfg, oracle,
        prior_cfg=prior_cfg, fit_cfg=fit_cfg, initial_ids=initial_ids,
    )
    rate = remaining_rate(frame_all, state.visited_ids)
    return {
        "key": (vi, si, ci, rep),
        "result": RunResult(
            village=village_name,
            strategy=strategy,
            covset=covset,
            rep=rep,
            design_size=state.m_i,
            design_frac=state.m_i / frame.n,
            remaining_rate=rate,
            terminated_iter=state.iteration,
            initial_ids=tuple(initial_ids),
        ),
    }


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Full protocol: shared initial designs per replication, derived streams.

    Failures are recorded (and warned about), never silently dropped; results
    are returned in deterministic (village, strategy, covset, rep) order
    regardless of scheduling.
    """
    frames_by_village: dict[str, tuple[VillageFrame, VillageFrame]] = {}
    for name, gc in zip(cfg.village_names, cfg.villages):
        frame_all = generate_village(gc)
        frames_by_village[name] = (frame_all, frame_all.with_covariate_set(CovariateSet.GLOBAL_ONLY))

    tasks = []
    for vi, name in enumerate(cfg.village_names):
        frame_all = frames_by_village[name][0]
        for rep in range(cfg.reps):
            init_seed = _derived_seed(cfg.master_seed, vi, rep)
            init_cfg = DesignConfig.from_json(
                {**cfg.design.to_json(), "seed": init_seed}
            )
            initial_ids = tuple(draw_initial_design(frame_all, init_cfg))
            for si, strategy in enumerate(cfg.strategies):
                for ci, covset in enumerate(cfg.covsets):
                    tasks.append(
                        (
                            vi, si, ci, rep, name, strategy, covset, initial_ids,
                            cfg.design.to_json(), cfg.prior.to_json(),
                            cfg.fit.to_json(), cfg.master_seed,
                        )
                    )

    outputs: dict[tuple, RunResult] = {}
    failures: list[dict] = []
    if cfg.workers > 1:
        with ProcessPoolExecutor(
            max_workers=cfg.workers,
            initializer=_init_worker,
            initargs=(frames_by_village, cfg.to_json()),
        ) as pool:
            for task, res in zip(tasks, pool.map(_run_single_safe, tasks, chunksize=4)):
                if "error" in res:
                    failures.append(res)
                    warnings.warn(f"run failed: {res['error']}", stacklevel=2)
                else:
                    outputs[res["key"]] = res["result"]
    else:
        _init_worker(frames_by_village, cfg.to_json())
        for task in tasks:
            res = _run_single_safe(task)
            if "error" in res:
                failures.append(res)
                warnings.warn(f"run failed: {res['error']}", stacklevel=2)
            else:
                outputs[res["key"]] = res["result"]

    ordered = [outputs[k] for k in sorted(outputs)]
    return ExperimentResult(runs=ordered, failures=failures, config=cfg.to_json())


def _run_single_safe(task: tuple) -> dict:
    try:
        return _run_single(task)
    except Exception as exc:  # noqa: BLE001 - failures are data here
        vi, si, ci, rep = task[0], task[1], task[2], task[3]
        return {
            "key": (vi, si, ci, rep),
            "error": f"{task[4]}/{task[5]}/{task[6]}/rep{rep}: {exc!r}",
        }


# ---------------------------------------------------------------------------
# reporting


def _ci(values: np.ndarray, lo_q: float = 0.05, hi_q: float = 0.95) -> list[float]:
    return [float(np.quantile(values, lo_q)), float(np.quantile(values, hi_q))]


def summarize(result: ExperimentResult) -> dict:
    """Group-level means/CIs, target accuracies, and paired savings vs random."""
    if not result.runs:
        raise SimulationError("no runs to summarize")
    runs = result.runs
    groups: dict = {}
    keys = sorted({(r.village, r.strategy, r.covset) for r in runs})
    for village, strategy, covset in keys:
        sel = [
            r for r in runs
            if (r.village, r.strategy, r.covset) == (village, strategy, covset)
        ]
        frac = np.array([r.design_frac for r in sel]) * 100.0
        rate = np.array([r.remaining_rate for r in sel])
        groups[f"{village}|{strategy}|{covset}"] = {
            "village": village,
            "strategy": strategy,
            "covset": covset,
            "n_runs": len(sel),
            "design_pct_mean": float(frac.mean()),
            "design_pct_ci90": _ci(frac),
            "remaining_rate_mean": float(rate.mean()),
            "remaining_rate_ci90": _ci(rate),
            "accuracy_5pct": float(np.mean(rate < 0.05)),
            "accuracy_8pct": float(np.mean(rate < 0.08)),
        }

    by_key = {(r.village, r.strategy, r.covset, r.rep): r for r in runs}
    paired: dict = {}
    strategies = sorted({r.strategy for r in runs if r.strategy != "random"})
    covsets = sorted({r.covset for r in runs})
    villages = sorted({r.village for r in runs})
    for strategy in strategies:
        for covset in covsets:
            diffs = []
            per_village: dict[str, list[float]] = {v: [] for v in villages}
            for r in runs:
                if r.strategy != strategy or r.covset != covset:
                    continue
                ref = by_key.get((r.village, "random", covset, r.rep))
                if ref is None:
                    continue
                saving = (ref.design_frac - r.design_frac) * 100.0
                diffs.append(saving)
                per_village[r.village].append(saving)
            if not diffs:
                continue
            arr = np.array(diffs)
            paired[f"{strategy}|{covset}"] = {
                "strategy": strategy,
                "covset": covset,
                "n_pairs": len(diffs),
                "savings_pct_median": float(np.median(arr)),
                "savings_pct_ci95": _ci(arr, 0.025, 0.975),
                "savings_pct_median_by_village": {
                    v: (float(np.median(np.array(vals))) if vals else None)
                    for v, vals in per_village.items()
                },
            }
    return {
        "groups": groups,
        "paired_vs_random": paired,
        "n_runs": len(runs),
        "n_failures": len(result.failures),
    }


RESULTS_HEADER = [
    "village", "strategy", "covset", "rep",
    "design_size", "design_frac", "remaining_rate", "terminated_iter",
]


def write_results_csv(result: ExperimentResult, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULTS_HEADER)
        for r in result.runs:
            writer.writerow(r.to_row())


def write_summary_json(summary: dict, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_plotdata_csv(summary: dict, path: str | Path) -> None:
    """Crosshair data for a design-size vs remaining-rate chart."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "village", "strategy", "covset",
                "design_pct_mean", "design_pct_lo", "design_pct_hi",
                "remaining_rate_mean", "remaining_rate_lo", "remaining_rate_hi",
            ]
        )
        for key in sorted(summary["groups"]):
            g = summary["groups"][key]
            writer.writerow(
                [
                    g["village"], g["strategy"], g["covset"],
                    f"{g['design_pct_mean']:.4f}",
                    f"{g['design_pct_ci90'][0]:.4f}",
                    f"{g['design_pct_ci90'][1]:.4f}",
                    f"{g['remaining_rate_mean']:.6f}",
                    f"{g['remaining_rate_ci90'][0]:.6f}",
                    f"{g['remaining_rate_ci90'][1]:.6f}",
                ]
            )
