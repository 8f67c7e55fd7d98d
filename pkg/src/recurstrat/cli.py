"""Batch command line: simulate scenarios, fit models, resample variances,
run replicate studies, and export baseline-curve data.

Exit codes: 0 success, 1 usage or data error, 2 fit did not converge
(results are still written).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from ._numeric import FitError
from .fit_census import Algorithm2Config, fit_algorithm2, fit_ideal
from .fit_zt import EmConfig, em_fit
from .io import (
    DataFormatError,
    atomic_write,
    fit_result_to_dict,
    read_census_csv,
    read_dataset,
    read_scenario_json,
    write_baseline_csv,
    write_census_csv,
    write_events_csv,
    write_json,
    write_scenario_json,
    write_subjects_csv,
)
from .model import ModelSpec
from .simulate import (
    build_census,
    extract_cohort,
    extract_doubly_censored,
    scenario_preset,
    simulate_population,
)
from .variance import ResampleConfig, replicate_study, resample_variance

_MODEL_CHOICES = ("nnc", "nsc", "snc", "ssc", "nnv", "nsv", "snv", "ssv")


class UsageError(ValueError):
    pass


def _default_seed(value):
    if value is not None:
        return value
    env = os.environ.get("RECURSTRAT_SEED")
    return int(env) if env else 0


def _require_fresh(paths, force: bool):
    if force:
        return
    for path in paths:
        if os.path.exists(path):
            raise UsageError(f"refusing to overwrite {path} (pass --force)")


def cmd_simulate(args) -> int:
    if args.population is not None and args.population < 1:
        raise UsageError("--population must be >= 1")
    seed = _default_seed(args.seed)
    if args.truth:
        config = read_scenario_json(args.truth)
        if args.population:
            from dataclasses import replace
            config = replace(config, population_size=args.population, seed=seed)
    else:
        config = scenario_preset(args.scenario, population_size=args.population or 100_000,
                                 seed=seed)
    os.makedirs(args.out, exist_ok=True)
    paths = {name: os.path.join(args.out, name) for name in (
        "subjects.csv", "events.csv", "census.csv", "truth.json",
        "full_subjects.csv", "full_events.csv",
    )}
    _require_fresh(paths.values(), args.force)
    population = simulate_population(config)
    w_left, w_right = config.window
    cohort = extract_cohort(population, w_left, w_right)
    census = build_census(population, w_left, w_right)
    full = extract_doubly_censored(population, w_left, w_right, oracle_strata=True)
    write_subjects_csv(paths["subjects.csv"], cohort)
    write_events_csv(paths["events.csv"], cohort)
    write_census_csv(paths["census.csv"], census)
    write_scenario_json(paths["truth.json"], config)
    write_subjects_csv(paths["full_subjects.csv"], full, include_pre_window=True)
    write_events_csv(paths["full_events.csv"], full)
    fraction = cohort.n_subjects / population.n
    print(f"population {population.n}, cohort {cohort.n_subjects} "
          f"(fraction {fraction:.4f}), events {cohort.n_events}")
    return 0


def _load_inputs(args, need_census: bool, kind: str):
    dataset = read_dataset(args.subjects, args.events, kind=kind,
                           age_horizon=args.age_horizon)
    census = None
    if need_census:
        if not args.census:
            raise UsageError("this approach needs --census")
        census = read_census_csv(args.census, p=dataset.p, age_horizon=args.age_horizon)
    return dataset, census


def cmd_fit(args) -> int:
    spec = ModelSpec.from_code(args.model, age_horizon=args.age_horizon)
    approach = args.approach
    if approach == "zt" and spec.baseline_time_varying:
        raise UsageError(
            "the zero-truncated likelihood is limited to constant-baseline models"
        )
    if approach == "zt":
        cohort, _ = _load_inputs(args, need_census=False, kind="cohort")
        config = EmConfig(tolerance=args.tol) if args.tol else EmConfig()
        result = em_fit(cohort, spec, config)
    elif approach == "census":
        cohort, census = _load_inputs(args, need_census=True, kind="cohort")
        config = Algorithm2Config(tolerance=args.tol) if args.tol else Algorithm2Config()
        result = fit_algorithm2(cohort, census, spec, config)
    elif approach == "ideal":
        full, _ = _load_inputs(args, need_census=False, kind="full")
        if spec.scheme != "none" and not full.strata_known:
            raise UsageError(
                "ideal fits need realized strata: supply pre_window_events for "
                "every subject"
            )
        result = fit_ideal(full, spec)
    else:
        raise UsageError(f"unknown approach {approach!r}")
    doc = fit_result_to_dict(result, approach)
    write_json(args.out, doc)
    if args.baseline_out and hasattr(result, "baseline"):
        write_baseline_csv(args.baseline_out, result.baseline, spec.age_horizon)
    print(f"{approach}/{args.model}: converged={result.converged}")
    return 0 if result.converged else 2


def cmd_variance(args) -> int:
    spec = ModelSpec.from_code(args.model, age_horizon=args.age_horizon)
    cohort, census = _load_inputs(args, need_census=True, kind="cohort")
    resample = ResampleConfig(draws=args.draws, seed=_default_seed(args.seed),
                              multiplier=args.law)
    result = resample_variance(cohort, census, spec, resample=resample)
    doc = {
        "model": args.model,
        "draws": resample.draws,
        "dropped": result.n_dropped,
        "multiplier": resample.multiplier,
        "se_beta": {str(s): v.tolist() for s, v in result.se_beta.items()},
        "se_lambda0": (None if result.se_lambda0 is None
                       else {str(s): v for s, v in result.se_lambda0.items()}),
        "base_fit": fit_result_to_dict(result.base_fit, "census"),
    }
    write_json(args.out, doc)
    if args.draws_out:
        lines = ["draw,stratum,age,cumulative_baseline"]
        for s, curves in result.baseline_draws.items():
            for b in range(curves.shape[0]):
                for a, v in zip(result.baseline_grid, curves[b]):
                    lines.append(f"{b},{s},{a:.12g},{v:.12g}")
        atomic_write(args.draws_out, "\n".join(lines) + "\n")
    print(f"resampled {resample.draws} draws ({result.n_dropped} dropped)")
    return 0


def cmd_study(args) -> int:
    config = scenario_preset(args.scenario, population_size=args.population,
                             seed=_default_seed(args.seed))
    models = [m.strip() for m in args.models.split(",") if m.strip()]
    approaches = [a.strip() for a in args.approaches.split(",") if a.strip()]
    for m in models:
        if m not in _MODEL_CHOICES:
            raise UsageError(f"unknown model {m!r}")
    tasks = [(a, m) for a in approaches for m in models
             if not (a in ("zt", "zt-em") and m.endswith("v"))]
    report = replicate_study(config, args.replicates, tasks, parallel=args.parallel)
    atomic_write(args.out, report.to_csv())
    print(f"wrote {len(report.rows)} rows to {args.out}")
    return 0


def cmd_report(args) -> int:
    with open(args.fit) as handle:
        fit = json.load(handle)
    draws = {}
    grid = None
    if args.draws and os.path.exists(args.draws):
        rows = open(args.draws).read().strip().splitlines()
        if rows[0] != "draw,stratum,age,cumulative_baseline":
            raise DataFormatError(f"{args.draws}:1: unexpected header")
        per = {}
        for line in rows[1:]:
            b, s, a, v = line.split(",")
            per.setdefault((int(s), int(b)), []).append((float(a), float(v)))
        strata = sorted({s for s, _ in per})
        grid = np.asarray([a for a, _ in per[(strata[0], 0)]])
        for s in strata:
            n_draws = 1 + max(b for ss, b in per if ss == s)
            draws[s] = np.asarray([[v for _, v in per[(s, b)]] for b in range(n_draws)])
    else:
        print("note: no resample draws supplied; confidence bands omitted",
              file=sys.stderr)
    from .io import _baseline_from_dict

    baselines = {int(s): _baseline_from_dict(d) for s, d in fit["baseline"].items()}
    horizon = args.age_horizon
    if grid is None:
        grid = np.arange(0.0, horizon + 1e-9, 0.1)
    lines = ["stratum,age,estimate,lo95,hi95"]
    for s in sorted(baselines):
        est = np.asarray(baselines[s].cumulative_at(grid))
        if s in draws:
            lo = np.percentile(draws[s], 2.5, axis=0)
            hi = np.percentile(draws[s], 97.5, axis=0)
        else:
            lo = hi = None
        for k, a in enumerate(grid):
            band = f",{lo[k]:.12g},{hi[k]:.12g}" if lo is not None else ",,"
            lines.append(f"{s},{a:.12g},{est[k]:.12g}{band}")
    atomic_write(args.out, "\n".join(lines) + "\n")
    print(f"wrote curves for {len(baselines)} strata to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="recurstrat",
        description="Stratified recurrent-event models for zero-truncated cohorts",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="simulate a scenario to CSV files")
    group = sim.add_mutually_exclusive_group(required=True)
    group.add_argument("--scenario", type=int, choices=(1, 2, 3))
    group.add_argument("--truth", help="scenario JSON with inline truth")
    sim.add_argument("--population", type=int, default=None)
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--out", required=True)
    sim.add_argument("--force", action="store_true")
    sim.set_defaults(func=cmd_simulate)

    fit = sub.add_parser("fit", help="fit a model to CSV data")
    fit.add_argument("--subjects", required=True)
    fit.add_argument("--events", required=True)
    fit.add_argument("--census")
    fit.add_argument("--model", required=True, choices=_MODEL_CHOICES)
    fit.add_argument("--approach", required=True, choices=("zt", "census", "ideal"))
    fit.add_argument("--tol", type=float, default=None)
    fit.add_argument("--age-horizon", type=float, default=18.0)
    fit.add_argument("--out", required=True)
    fit.add_argument("--baseline-out")
    fit.set_defaults(func=cmd_fit)

    var = sub.add_parser("variance", help="multiplier-resampling standard errors")
    var.add_argument("--subjects", required=True)
    var.add_argument("--events", required=True)
    var.add_argument("--census", required=True)
    var.add_argument("--model", required=True, choices=_MODEL_CHOICES)
    var.add_argument("--draws", type=int, default=1000)
    var.add_argument("--law", choices=("poisson", "normal"), default="poisson")
    var.add_argument("--seed", type=int, default=None)
    var.add_argument("--age-horizon", type=float, default=18.0)
    var.add_argument("--out", required=True)
    var.add_argument("--draws-out")
    var.set_defaults(func=cmd_variance)

    study = sub.add_parser("study", help="replicate study over a scenario preset")
    study.add_argument("--scenario", type=int, required=True, choices=(1, 2, 3))
    study.add_argument("--replicates", type=int, required=True)
    study.add_argument("--population", type=int, default=100_000)
    study.add_argument("--models", required=True, help="comma list, e.g. nnc,ssc,ssv")
    study.add_argument("--approaches", required=True, help="comma list from zt,zt-em,census,ideal")
    study.add_argument("--seed", type=int, default=None)
    study.add_argument("--parallel", type=int, default=1)
    study.add_argument("--out", required=True)
    study.set_defaults(func=cmd_study)

    rep = sub.add_parser("report", help="baseline curves with percentile bands")
    rep.add_argument("--fit", required=True)
    rep.add_argument("--draws")
    rep.add_argument("--age-horizon", type=float, default=18.0)
    rep.add_argument("--out", required=True)
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, DataFormatError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except FitError as err:
        print(f"fit error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
