import numpy as np
import pytest

from geosampler.design import DesignConfig
from geosampler.inference import FitConfig
from geosampler.simulate import (
    ExperimentConfig,
    ExperimentResult,
    GeneratorConfig,
    RunResult,
    SimulationError,
    _derived_seed,
    _run_single_safe,
    experiment_config_from_json,
    generate_village,
    paper_scale_config,
    remaining_rate,
    run_experiment,
    summarize,
    write_plotdata_csv,
    write_results_csv,
    write_summary_json,
)
from geosampler.village import CovariateSet

from conftest import make_frame


# ---------------------------------------------------------------------------
# generator


def test_generate_deterministic():
    cfg = GeneratorConfig(n=40, seed=9)
    f1 = generate_village(cfg)
    f2 = generate_village(cfg)
    assert f1.ids == f2.ids
    assert np.array_equal(f1.design_matrix, f2.design_matrix)
    assert np.array_equal(f1.true_status, f2.true_status)
    assert f1.diameter_m == f2.diameter_m


def test_generate_has_expected_shape():
    cfg = GeneratorConfig(n=60, seed=1, n_continuous=2, n_categorical=1,
                          categorical_levels=3)
    frame = generate_village(cfg)
    assert frame.n == 60
    assert frame.covariate_set is CovariateSet.ALL
    # intercept + density + perimeter + 2 continuous + (3-1) indicators
    assert len(frame.column_names) == 7
    assert frame.true_status is not None


def test_intercept_calibration_hits_target_rate():
    # beta = 0 apart from the intercept; realized rates over many villages
    # must average the target within 0.01
    rates = []
    for seed in range(200):
        cfg = GeneratorConfig(
            n=100, seed=seed, baseline_rate=0.2, covariate_effect_sd=0.0,
            n_continuous=1, n_categorical=0,
        )
        frame = generate_village(cfg)
        rates.append(frame.true_status.mean())
    assert abs(np.mean(rates) - 0.2) < 0.01


def _morans_i(coords, values, k=6):
    # binary k-nearest-neighbour weights; inverse-distance blows up on
    # near-duplicate pairs and drowns the statistic
    d = np.sqrt(((coords[:, None] - coords[None]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    w = np.zeros_like(d)
    for i in range(len(values)):
        w[i, np.argsort(d[i])[:k]] = 1.0
    z = values - values.mean()
    num = (w * np.outer(z, z)).sum()
    den = (z**2).sum()
    n = len(values)
    return (n / w.sum()) * (num / den)


def test_no_spatial_field_means_no_autocorrelation():
    # permutation z-scores of Moran's I should be unremarkable at sigma_s ~ 0
    zs = []
    for seed in (3, 4, 5):
        cfg = GeneratorConfig(
            n=90, seed=seed, sigma_s=1e-8, sigma_e=0.3, covariate_effect_sd=0.0,
            n_continuous=1, n_categorical=0,
        )
        frame = generate_village(cfg)
        truth = frame.true_status.astype(float)
        obs = _morans_i(frame.scaled_coords, truth)
        rng = np.random.default_rng(seed)
        perms = [
            _morans_i(frame.scaled_coords, rng.permutation(truth))
            for _ in range(200)
        ]
        zs.append((obs - np.mean(perms)) / np.std(perms))
    assert all(abs(z) < 3.0 for z in zs)


def test_strong_spatial_field_detected():
    # positive control for the permutation check: balanced rate maximizes
    # the binary signal, so a strong smooth field must light up
    zs = []
    for seed in (6, 7, 8):
        cfg = GeneratorConfig(
            n=90, seed=seed, sigma_s=2.5, sigma_e=0.1, rho=0.4,
            baseline_rate=0.5, covariate_effect_sd=0.0,
            n_continuous=1, n_categorical=0,
        )
        frame = generate_village(cfg)
        truth = frame.true_status.astype(float)
        obs = _morans_i(frame.scaled_coords, truth)
        rng = np.random.default_rng(seed)
        perms = [
            _morans_i(frame.scaled_coords, rng.permutation(truth))
            for _ in range(200)
        ]
        zs.append((obs - np.mean(perms)) / np.std(perms))
    assert min(zs) > 2.0
    assert np.mean(zs) > 3.0


def test_generator_validation():
    with pytest.raises(SimulationError):
        GeneratorConfig(n=1)
    with pytest.raises(SimulationError):
        GeneratorConfig(baseline_rate=1.2)
    with pytest.raises(SimulationError):
        GeneratorConfig(layout="hexagonal")


def test_clustered_layout_within_extent():
    cfg = GeneratorConfig(n=80, seed=2, layout="clustered", cluster_parents=4)
    frame = generate_village(cfg)
    raw = frame.raw_coords()
    assert raw.min() >= 0.0 and raw.max() <= cfg.extent_m


# ---------------------------------------------------------------------------
# metrics


def test_remaining_rate_definition():
    frame = make_frame(
        [(0, 0), (100, 0), (0, 100), (100, 100)], true_status=[1, 1, 0, 0]
    )
    assert remaining_rate(frame, [frame.ids[0]]) == pytest.approx(1 / 4)
    assert remaining_rate(frame, []) == pytest.approx(2 / 4)
    assert remaining_rate(frame, list(frame.ids)) == 0.0


def test_remaining_rate_monotone_in_design():
    rng = np.random.default_rng(3)
    truth = (rng.random(20) < 0.4).astype(int)
    frame = make_frame(rng.uniform(0, 300, (20, 2)), true_status=truth)
    ids = list(frame.ids)
    rates = [remaining_rate(frame, ids[:k]) for k in range(21)]
    assert all(b <= a for a, b in zip(rates, rates[1:]))


def test_derived_seed_pure_function():
    a = _derived_seed(42, 1, 2, 0, 7)
    b = _derived_seed(42, 1, 2, 0, 7)
    c = _derived_seed(42, 1, 2, 0, 8)
    assert a == b and a != c


# ---------------------------------------------------------------------------
# experiment protocol (small but real)


def _tiny_experiment(workers=1, reps=2):
    gen = GeneratorConfig(
        n=22, seed=5, baseline_rate=0.3, n_continuous=1, n_categorical=1,
        categorical_levels=2, sigma_s=1.0,
    )
    return ExperimentConfig(
        villages=(gen,),
        village_names=("tiny",),
        alphas=(0.0, 1.0),
        include_random=True,
        covsets=("global", "all"),
        reps=reps,
        master_seed=99,
        workers=workers,
        design=DesignConfig(
            alpha=1.0, batch_size=3, initial_size=6, mc_draws=600, seed=0
        ),
        fit=FitConfig(grid_size=3, nm_max_evals=50),
    )


@pytest.fixture(scope="module")
def tiny_result():
    return run_experiment(_tiny_experiment())


def test_experiment_run_count_and_order(tiny_result):
    assert len(tiny_result.runs) == 1 * 3 * 2 * 2
    assert not tiny_result.failures
    keys = [(r.village, r.strategy, r.covset, r.rep) for r in tiny_result.runs]
    assert keys == sorted(keys, key=lambda k: (0, ["alpha=0", "alpha=1", "random"].index(k[1]), ["global", "all"].index(k[2]), k[3]))


def test_experiment_shares_initial_design_within_rep(tiny_result):
    by_rep: dict[int, set] = {}
    for r in tiny_result.runs:
        by_rep.setdefault(r.rep, set()).add(r.initial_ids)
    for rep, designs in by_rep.items():
        assert len(designs) == 1  # all strategies and covsets share it
    assert by_rep[0] != by_rep[1]  # but replications differ


def test_experiment_determinism(tiny_result, tmp_path):
    again = run_experiment(_tiny_experiment())
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_results_csv(tiny_result, p1)
    write_results_csv(again, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_experiment_parallel_equals_serial(tiny_result):
    par = run_experiment(_tiny_experiment(workers=2))
    assert [r.to_row() for r in par.runs] == [r.to_row() for r in tiny_result.runs]


def test_design_fraction_bounds(tiny_result):
    for r in tiny_result.runs:
        assert 6 / 22 <= r.design_frac <= 1.0
        assert 0.0 <= r.remaining_rate <= 1.0


def test_failure_capture_never_silently_drops():
    bad_task = (0, 0, 0, 0, "missing_village", "alpha=0", "global", ("h0",),
                DesignConfig(alpha=0.0, seed=1).to_json(), {}, {}, 1)
    out = _run_single_safe(bad_task)
    assert "error" in out and out["key"] == (0, 0, 0, 0)


# ---------------------------------------------------------------------------
# summaries


def _fake_result():
    runs = []
    rng = np.random.default_rng(0)
    for strategy, base in (("alpha=1", 0.30), ("random", 0.40)):
        for rep in range(40):
            frac = base + 0.01 * rng.standard_normal()
            runs.append(
                RunResult(
                    village="v", strategy=strategy, covset="global", rep=rep,
                    design_size=int(frac * 100), design_frac=frac,
                    remaining_rate=0.04 if rep % 10 else 0.06,
                    terminated_iter=5,
                )
            )
    return ExperimentResult(runs=runs, failures=[], config={})


def test_summarize_groups_and_accuracy():
    summary = summarize(_fake_result())
    g = summary["groups"]["v|alpha=1|global"]
    assert g["n_runs"] == 40
    assert g["accuracy_5pct"] == pytest.approx(36 / 40)
    assert g["accuracy_8pct"] == 1.0
    assert g["accuracy_8pct"] >= g["accuracy_5pct"]
    lo, hi = g["design_pct_ci90"]
    assert lo <= g["design_pct_mean"] <= hi


def test_summarize_paired_savings():
    summary = summarize(_fake_result())
    paired = summary["paired_vs_random"]["alpha=1|global"]
    assert paired["n_pairs"] == 40
    assert paired["savings_pct_median"] == pytest.approx(10.0, abs=1.5)


def test_summarize_strategy_against_itself_is_zero():
    runs = []
    for rep in range(10):
        for strategy in ("alpha=1", "random"):
            runs.append(
                RunResult(
                    village="v", strategy=strategy, covset="all", rep=rep,
                    design_size=30, design_frac=0.3, remaining_rate=0.02,
                    terminated_iter=4,
                )
            )
    summary = summarize(ExperimentResult(runs=runs, failures=[], config={}))
    paired = summary["paired_vs_random"]["alpha=1|all"]
    assert paired["savings_pct_median"] == 0.0
    assert paired["savings_pct_ci95"] == [0.0, 0.0]


def test_write_outputs(tmp_path, tiny_result):
    summary = summarize(tiny_result)
    write_results_csv(tiny_result, tmp_path / "r.csv")
    write_summary_json(summary, tmp_path / "s.json")
    write_plotdata_csv(summary, tmp_path / "p.csv")
    header = (tmp_path / "r.csv").read_text().splitlines()[0]
    assert header == "village,strategy,covset,rep,design_size,design_frac,remaining_rate,terminated_iter"
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert len(lines) == 1 + len(summary["groups"])


def test_paper_scale_config_arithmetic():
    cfg = paper_scale_config(reps=50)
    assert len(cfg.villages) == 5
    assert [g.n for g in cfg.villages] == [108, 147, 172, 207, 251]
    n_runs = len(cfg.villages) * len(cfg.strategies) * len(cfg.covsets) * cfg.reps
    assert n_runs == 3500
    assert cfg.strategies == (
        "alpha=0", "alpha=0.15", "alpha=0.3", "alpha=0.7", "alpha=1", "alpha=2",
        "random",
    )


def test_experiment_config_json_round_trip():
    cfg = _tiny_experiment()
    again = experiment_config_from_json(cfg.to_json())
    assert again.to_json() == cfg.to_json()
