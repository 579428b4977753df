"""Command-line entry point: prep, fit, generate, experiment, serve."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import __version__
from .inference import (
    FitConfig,
    ModelVariant,
    fit_report,
    laplace_fit,
    sample_posterior,
)
from .priors import PriorConfig
from .simulate import (
    GeneratorConfig,
    experiment_config_from_json,
    generate_village,
    paper_scale_config,
    run_experiment,
    summarize,
    write_plotdata_csv,
    write_results_csv,
    write_summary_json,
    write_village_files,
)
from .village import CovariateSet, HouseStatus, load_village


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _write_json(obj: dict, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _cmd_prep(args: argparse.Namespace) -> int:
    frame = load_village(
        args.village, CovariateSet(args.covset), schema_path=args.schema
    )
    cols = {name: i for i, name in enumerate(frame.column_names)}
    houses = []
    for i, h in enumerate(frame.houses):
        stats_row = {
            "id": h.id,
            "x_scaled": float(frame.scaled_coords[i, 0]),
            "y_scaled": float(frame.scaled_coords[i, 1]),
        }
        for derived in ("density", "dist_perimeter"):
            stat = frame.covariate_stats[cols[derived]]
            stats_row[derived] = float(
                frame.design_matrix[i, cols[derived]] * (stat.sd or 1.0) + stat.mean
            )
        houses.append(stats_row)
    _write_json(
        {
            "n": frame.n,
            "diameter_m": frame.diameter_m,
            "covariate_set": frame.covariate_set.value,
            "columns": list(frame.column_names),
            "covariate_stats": [
                {
                    "name": s.name,
                    "mean": s.mean,
                    "sd": s.sd,
                    "scaled": s.scaled,
                    "constant": s.constant,
                }
                for s in frame.covariate_stats
            ],
            "houses": houses,
        },
        args.out,
    )
    return 0


def _cmd_fit(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    prior = PriorConfig.from_json(cfg.get("prior", {}))
    fit_cfg = FitConfig.from_json(cfg.get("fit", {}))
    n_draws = args.draws or int(cfg.get("draws", 5000))
    frame = load_village(
        args.village, CovariateSet(args.covset), schema_path=args.schema
    )
    observed = {
        h.id: h.status is HouseStatus.INFESTED
        for h in frame.houses
        if h.status is not HouseStatus.UNKNOWN
    }
    if not observed:
        raise ValueError(
            "fit requires observed statuses; the village CSV has none "
            "(set the status column to infested/clear)"
        )
    variants = (
        [ModelVariant(args.variant)]
        if args.variant != "all"
        else [ModelVariant.FULL, ModelVariant.SPATIAL_ONLY, ModelVariant.IID_ONLY]
    )
    reports = {}
    for variant in variants:
        started = time.perf_counter()
        fit = laplace_fit(frame, observed, prior, variant, fit_cfg)
        draws = sample_posterior(fit, n_draws, seed=args.seed)
        rep = fit_report(fit, draws)
        rep["fit_seconds"] = round(time.perf_counter() - started, 3)
        reports[variant.value] = rep
    out = {
        "village": str(args.village),
        "covset": args.covset,
        "n_observed": len(observed),
        "variants": reports,
        "comparison": {
            v: {"dic": r["dic"], "log_marginal_likelihood": r["log_marginal_likelihood"]}
            for v, r in reports.items()
        },
    }
    _write_json(out, args.out)
    return 0


def _cmd_generate(args: argparse.Namespace) -> int:
    cfg_obj = _load_config(args.config)
    if args.n:
        cfg_obj["n"] = args.n
    if args.rate:
        cfg_obj["baseline_rate"] = args.rate
    if args.seed is not None:
        cfg_obj["seed"] = args.seed
    gen = GeneratorConfig.from_json(cfg_obj)
    frame = generate_village(gen)
    write_village_files(frame, args.out)
    truth = frame.true_status
    sys.stdout.write(
        json.dumps(
            {
                "out": str(args.out),
                "n": frame.n,
                "true_infested": int(truth.sum()),
                "true_rate": round(float(truth.mean()), 4),
                "diameter_m": frame.diameter_m,
            }
        )
        + "\n"
    )
    return 0


def _cmd_experiment(args: argparse.Namespace) -> int:
    cfg_obj = _load_config(args.config)
    if cfg_obj:
        cfg = experiment_config_from_json(cfg_obj)
    else:
        cfg = paper_scale_config()
    overrides = {}
    if args.reps:
        overrides["reps"] = args.reps
    if args.workers:
        overrides["workers"] = args.workers
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if overrides:
        merged = cfg.to_json()
        merged.update(overrides)
        cfg = experiment_config_from_json(merged)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    result = run_experiment(cfg)
    elapsed = time.perf_counter() - started
    summary = summarize(result)
    write_results_csv(result, out_dir / "results.csv")
    write_summary_json(summary, out_dir / "summary.json")
    write_plotdata_csv(summary, out_dir / "plotdata.csv")
    sys.stdout.write(
        json.dumps(
            {
                "out_dir": str(out_dir),
                "runs": len(result.runs),
                "failures": len(result.failures),
                "seconds": round(elapsed, 1),
            }
        )
        + "\n"
    )
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.state_dir, ui_dir=args.ui_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geosampler",
        description="Adaptive geostatistical sampling for household vector control",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="ingest a village CSV and derive covariates")
    p.add_argument("--village", required=True)
    p.add_argument("--schema", default=None)
    p.add_argument("--covset", choices=["global", "all"], default="all")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_prep)

    p = sub.add_parser("fit", help="full-village analysis with model comparison")
    p.add_argument("--village", required=True)
    p.add_argument("--schema", default=None)
    p.add_argument("--covset", choices=["global", "all"], default="all")
    p.add_argument(
        "--variant", choices=["full", "spatial-only", "iid-only", "all"], default="all"
    )
    p.add_argument("--draws", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("generate", help="generate a synthetic village with truth")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--rate", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("experiment", help="run the replication protocol")
    p.add_argument("--out-dir", default="experiment_out")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("serve", help="run the live campaign service")
    p.add_argument("--state-dir", default="campaign_state")
    p.add_argument("--ui-dir", default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.set_defaults(func=_cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        sys.stderr.write(
            json.dumps(
                {"error": {"code": type(exc).__name__, "message": str(exc)}}
            )
            + "\n"
        )
        return 2


if __name__ == "__main__":
    sys.exit(main())
