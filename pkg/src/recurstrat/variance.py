"""Multiplier resampling variances and the replicate-study harness.

Standard errors for the census-augmented fit come from re-solving the
weighted estimating equations under independent per-subject multiplier
draws (Poisson with mean 1 by default, uncentered).  The census table is
treated as fixed external information and is never resampled.

The study harness regenerates the simulation summaries: for each replicate
it simulates a population, extracts the cohort, census, and benchmark
datasets, runs every requested (approach, model) fit, and reports replicate
means and sample standard deviations per parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from ._numeric import FitError
from .data import CensusTable, CohortDataset
from .fit_census import (
    Algorithm2Config,
    CensusFitResult,
    MEMBERSHIP_POSTERIOR,
    fit_algorithm2,
    fit_ideal,
)
from .fit_zt import EmConfig, em_fit
from .model import ConstantBaseline, ModelSpec
from .simulate import (
    ScenarioConfig,
    build_census,
    extract_cohort,
    extract_doubly_censored,
    simulate_population,
)

__all__ = [
    "ResampleConfig",
    "ResampleResult",
    "resample_variance",
    "StudyReport",
    "replicate_study",
    "APPROACHES",
]

APPROACHES = ("zt", "zt-em", "census", "ideal")

MULTIPLIER_POISSON = "poisson"
MULTIPLIER_NORMAL = "normal"


@dataclass(frozen=True)
class ResampleConfig:
    """Multiplier-draw controls; Poisson(1) weights by default."""

    draws: int = 1000
    seed: int = 0
    multiplier: str = MULTIPLIER_POISSON
    max_dropped_fraction: float = 0.10
    curve_grid_step: float = 0.1

    def __post_init__(self):
        if self.draws < 2:
            raise ValueError("need at least 2 multiplier draws")
        if self.multiplier not in (MULTIPLIER_POISSON, MULTIPLIER_NORMAL):
            raise ValueError(f"unknown multiplier law {self.multiplier!r}")


@dataclass
class ResampleResult:
    se_beta: dict  # stratum -> (p,) standard errors
    se_lambda0: Optional[dict]
    beta_draws: dict  # stratum -> (n_kept, p)
    lambda0_draws: Optional[dict]
    baseline_grid: np.ndarray
    baseline_draws: dict  # stratum -> (n_kept, n_grid) cumulative curves
    n_requested: int
    n_dropped: int
    base_fit: CensusFitResult


def _draw_multipliers(law: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if law == MULTIPLIER_POISSON:
        return rng.poisson(1.0, size=n).astype(float)
    # mean-1 unit-variance normal perturbation; a centered draw would leave
    # the weighted equations without signal to re-solve
    return 1.0 + rng.standard_normal(n)


def resample_variance(cohort: CohortDataset, census: CensusTable, spec: ModelSpec,
                      fit_config: Algorithm2Config = Algorithm2Config(),
                      resample: ResampleConfig = ResampleConfig(),
                      membership: str = MEMBERSHIP_POSTERIOR,
                      initial_strata=None,
                      base_fit: Optional[CensusFitResult] = None) -> ResampleResult:
    """Standard errors for the census-augmented fit by multiplier resampling.

    Each draw re-runs the full alternating fit with per-subject weights
    multiplying that subject's event contributions in both the score and
    the baseline equations, warm-started at the base fit.  Draws that fail
    or do not converge are dropped and counted; more than the configured
    fraction of drops is a hard error.
    """
    if base_fit is None:
        base_fit = fit_algorithm2(cohort, census, spec, fit_config,
                                  membership=membership, initial_strata=initial_strata)
    warm = replace(fit_config, initial_params=base_fit.params,
                   max_outer_iterations=fit_config.max_outer_iterations)
    grid = np.arange(0.0, spec.age_horizon + 1e-9, resample.curve_grid_step)
    constant_cell = not spec.baseline_time_varying
    beta_draws = {s: [] for s in spec.strata}
    lam_draws = {s: [] for s in spec.strata} if constant_cell else None
    curve_draws = {s: [] for s in spec.strata}
    dropped = 0
    for b in range(resample.draws):
        rng = np.random.default_rng(np.random.SeedSequence([resample.seed, b]))
        w = _draw_multipliers(resample.multiplier, cohort.n_subjects, rng)
        try:
            fit = fit_algorithm2(cohort, census, spec, warm, membership=membership,
                                 initial_strata=initial_strata, multipliers=w)
        except (FitError, np.linalg.LinAlgError):
            dropped += 1
            continue
        if not fit.converged:
            dropped += 1
            continue
        for s in spec.strata:
            beta_draws[s].append(fit.beta[s])
            if constant_cell:
                lam_draws[s].append(fit.baseline[s].rate)
            curve_draws[s].append(np.asarray(fit.baseline[s].cumulative_at(grid)))
    if dropped > resample.max_dropped_fraction * resample.draws:
        raise FitError(
            f"{dropped} of {resample.draws} multiplier draws failed; "
            "resampled standard errors would be untrustworthy"
        )
    beta_draws = {s: np.array(v) for s, v in beta_draws.items()}
    curve_draws = {s: np.array(v) for s, v in curve_draws.items()}
    result = ResampleResult(
        se_beta={s: beta_draws[s].std(axis=0, ddof=1) for s in spec.strata},
        se_lambda0=None,
        beta_draws=beta_draws,
        lambda0_draws=None,
        baseline_grid=grid,
        baseline_draws=curve_draws,
        n_requested=resample.draws,
        n_dropped=dropped,
        base_fit=base_fit,
    )
    if constant_cell:
        lam_draws = {s: np.array(v) for s, v in lam_draws.items()}
        result.lambda0_draws = lam_draws
        result.se_lambda0 = {s: float(lam_draws[s].std(ddof=1)) for s in spec.strata}
    return result


# ---------------------------------------------------------------------------
# Replicate studies
# ---------------------------------------------------------------------------


@dataclass
class StudyRow:
    scenario: str
    approach: str
    model: str
    stratum: str
    parameter: str
    truth: Optional[float]
    mean: Optional[float]
    ssd: Optional[float]
    mean_resampled_se: Optional[float]
    n_replicates: int
    n_failed: int


@dataclass
class StudyReport:
    rows: list

    def to_csv(self) -> str:
        header = ("scenario,approach,model,stratum,parameter,truth,mean,ssd,"
                  "mean_resampled_se,n_replicates,n_failed")
        fmt = lambda v: "" if v is None else f"{v:.12g}"
        lines = [header]
        for r in self.rows:
            lines.append(
                f"{r.scenario},{r.approach},{r.model},{r.stratum},{r.parameter},"
                f"{fmt(r.truth)},{fmt(r.mean)},{fmt(r.ssd)},{fmt(r.mean_resampled_se)},"
                f"{r.n_replicates},{r.n_failed}"
            )
        return "\n".join(lines) + "\n"

    def lookup(self, approach: str, model: str, stratum, parameter: str) -> StudyRow:
        for r in self.rows:
            if (r.approach, r.model, str(r.stratum), r.parameter) == (
                approach, model, str(stratum), parameter
            ):
                return r
        raise KeyError((approach, model, stratum, parameter))


def _fit_parameters(result, spec: ModelSpec) -> dict:
    """Flatten a fit into {(stratum_label, parameter): value}."""
    out = {}
    strata = ["none"] if spec.scheme == "none" else [1, 2]
    for label in strata:
        s = 1 if label == "none" else label
        beta = result.beta[s]
        for j, value in enumerate(np.asarray(beta, dtype=float)):
            out[(str(label), f"beta{j + 1}")] = float(value)
        lam = None
        if hasattr(result, "lambda0"):
            lam_map = result.lambda0
            lam = lam_map[s] if isinstance(lam_map, dict) else lam_map
        if lam is not None and not spec.baseline_time_varying:
            out[(str(label), "lambda0")] = float(lam)
    return out


def _truth_value(config: ScenarioConfig, spec: ModelSpec, label: str, parameter: str):
    truth = config.truth
    s = 1 if label == "none" else int(label)
    if label == "none":
        # an unstratified fit has a truth only when the truth is unstratified
        if not np.array_equal(truth.beta[1], truth.beta.get(2, truth.beta[1])):
            same_beta = False
        else:
            same_beta = True
        b1, b2 = truth.baseline[1], truth.baseline.get(2, truth.baseline[1])
        same_base = (
            isinstance(b1, ConstantBaseline)
            and isinstance(b2, ConstantBaseline)
            and b1.rate == b2.rate
        )
        if parameter.startswith("beta"):
            return float(truth.beta[1][int(parameter[4:]) - 1]) if same_beta else None
        return b1.rate if same_base else None
    if parameter.startswith("beta"):
        return float(truth.beta[s][int(parameter[4:]) - 1])
    base = truth.baseline[s]
    return base.rate if isinstance(base, ConstantBaseline) else None


def _run_task(approach: str, model: str, bundle: dict, em_config: EmConfig,
              a2_config: Algorithm2Config):
    spec = ModelSpec.from_code(model, age_horizon=bundle["horizon"])
    if approach == "census":
        return fit_algorithm2(bundle["cohort"], bundle["census"], spec, a2_config), spec
    if approach == "zt":
        strata = None
        if spec.scheme != "none":
            strata = bundle["initial_strata"]
        return em_fit(bundle["cohort"], spec, em_config, initial_strata=strata), spec
    if approach == "zt-em":
        return em_fit(bundle["cohort"], spec, em_config), spec
    if approach == "ideal":
        return fit_ideal(bundle["full"], spec, a2_config), spec
    raise ValueError(f"unknown approach {approach!r}; pick from {APPROACHES}")


def _study_replicate(payload):
    """One replicate: simulate, extract, run every task.  The payload is a
    plain tuple so replicates can fan out across worker processes."""
    config, seed, tasks, em_config, a2_config, resample = payload
    rep_config = replace(config, seed=seed)
    w_left, w_right = config.window
    population = simulate_population(rep_config)
    cohort = extract_cohort(population, w_left, w_right)
    bundle = {
        "cohort": cohort,
        "census": build_census(population, w_left, w_right),
        "horizon": config.spec.age_horizon,
    }
    if any(a == "ideal" for a, _ in tasks):
        bundle["full"] = extract_doubly_censored(population, w_left, w_right,
                                                 oracle_strata=True)
    if any(a == "zt" for a, _ in tasks):
        pre = population.pre_window_counts(w_left)[cohort.subject_ids]
        bundle["initial_strata"] = np.where(pre > 0, 2, 1)
    estimates = {t: {} for t in tasks}
    ses = {t: {} for t in tasks}
    failed = {t: 0 for t in tasks}
    for task in tasks:
        approach, model = task
        try:
            fit, spec = _run_task(approach, model, bundle, em_config, a2_config)
        except (FitError, np.linalg.LinAlgError, ValueError):
            failed[task] += 1
            continue
        for key, value in _fit_parameters(fit, spec).items():
            estimates[task][key] = value
        if resample is not None and approach == "census":
            rr = resample_variance(
                bundle["cohort"], bundle["census"], spec,
                a2_config, replace(resample, seed=seed ^ 0x5EED),
                base_fit=fit,
            )
            for s in spec.strata:
                label = "none" if spec.scheme == "none" else str(s)
                for j in range(cohort.p):
                    ses[task][(label, f"beta{j + 1}")] = float(rr.se_beta[s][j])
                if rr.se_lambda0 is not None:
                    ses[task][(label, "lambda0")] = rr.se_lambda0[s]
    return estimates, ses, failed


def replicate_study(config: ScenarioConfig, n_replicates: int, tasks,
                    em_config: EmConfig = EmConfig(),
                    a2_config: Algorithm2Config = Algorithm2Config(),
                    resample: Optional[ResampleConfig] = None,
                    parallel: int = 1,
                    collect_estimates: bool = False):
    """Simulate-and-fit replicates for every requested (approach, model).

    Replicate seeds derive deterministically from the study seed and results
    reduce in replicate order, so the report is byte-identical no matter how
    many workers run.  A fit that raises is logged, excluded, and counted;
    non-convergent fits are kept (their spread is part of what the study
    measures).
    """
    tasks = [(a.lower(), m.lower()) for a, m in tasks]
    for approach, model in tasks:
        if approach in ("zt", "zt-em") and model.endswith("v"):
            raise ValueError("zero-truncated likelihood fits need a constant baseline")
    seeds = np.random.SeedSequence(config.seed).generate_state(n_replicates, dtype=np.uint64)
    payloads = [(config, int(seeds[r]), tasks, em_config, a2_config, resample)
                for r in range(n_replicates)]
    if parallel > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=parallel) as pool:
            outcomes = list(pool.map(_study_replicate, payloads))
    else:
        outcomes = [_study_replicate(p) for p in payloads]
    estimates = {t: {} for t in tasks}
    resampled_se = {t: {} for t in tasks}
    failures = {t: 0 for t in tasks}
    for rep_est, rep_se, rep_failed in outcomes:
        for task in tasks:
            failures[task] += rep_failed[task]
            for key, value in rep_est[task].items():
                estimates[task].setdefault(key, []).append(value)
            for key, value in rep_se[task].items():
                resampled_se[task].setdefault(key, []).append(value)
    rows = []
    for task in tasks:
        approach, model = task
        for (label, parameter), values in sorted(estimates[task].items()):
            arr = np.asarray(values, dtype=float)
            ses = resampled_se[task].get((label, parameter))
            rows.append(StudyRow(
                scenario=config.name,
                approach=approach,
                model=model,
                stratum=label,
                parameter=parameter,
                truth=_truth_value(config, ModelSpec.from_code(model), label, parameter),
                mean=float(arr.mean()),
                ssd=float(arr.std(ddof=1)) if arr.size >= 2 else None,
                mean_resampled_se=float(np.mean(ses)) if ses else None,
                n_replicates=int(arr.size),
                n_failed=failures[task],
            ))
    report = StudyReport(rows=rows)
    if collect_estimates:
        return report, estimates
    return report
