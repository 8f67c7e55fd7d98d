"""Census-augmented estimating equations for the full model grid.

The partial-score equations replace the unobservable population risk sums
with either realized risk sets (ideal benchmark, full doubly-censored data
with known strata) or census-count sums weighted by model-based stratum
probabilities.  Coefficients solve the weighted score; cumulative baselines
update by weighted Breslow steps (or project to a constant rate for the
constant-baseline cells); the two alternate until the coefficients settle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._numeric import FitError
from .data import CensusTable, CohortDataset, DoublyCensoredDataset
from .model import (
    SCHEME_FIRST_EVENT,
    SCHEME_NONE,
    ConstantBaseline,
    ModelSpec,
    Parameters,
    PiecewiseConstantBaseline,
    StepBaseline,
    integrated_stratum1_survival,
    log1mexp,
)

__all__ = [
    "CensusRiskProvider",
    "IdealRiskProvider",
    "Algorithm2Config",
    "CensusFitResult",
    "risk_moments",
    "event_stratum_weights",
    "score_census",
    "score_ideal",
    "baseline_update",
    "constant_baseline_projection",
    "fit_algorithm2",
    "fit_ideal",
    "fit_snc_via_indicator",
    "MEMBERSHIP_KNOWN",
    "MEMBERSHIP_POSTERIOR",
]

MEMBERSHIP_KNOWN = "known"
MEMBERSHIP_POSTERIOR = "posterior"


# ---------------------------------------------------------------------------
# Risk-moment providers
# ---------------------------------------------------------------------------


class CensusRiskProvider:
    """Risk sums approximated from aggregate census counts.

    Counts are piecewise constant over unit age bins; stratum membership
    probabilities are evaluated exactly at each query age from the current
    parameters (stratum 1 survival of the first-event hazard).
    """

    mode = "census"

    def __init__(self, census: CensusTable, spec: ModelSpec,
                 params: Optional[Parameters] = None):
        self.census = census
        self.spec = spec
        self.cells = census.cells
        self.mass = census.pooled_counts().astype(float)
        self.params = params
        horizon = census.age_horizon
        edges = np.arange(census.n_ages + 1, dtype=float)
        edges[-1] = min(edges[-1], horizon)
        self._bin_edges = edges

    def set_params(self, params: Parameters) -> None:
        self.params = params

    def _stratum_prob(self, ages, s: int) -> np.ndarray:
        """(n_cells, n_ages) stratum membership probability, left limits."""
        if self.spec.scheme == SCHEME_NONE:
            return np.ones((self.cells.shape[0], np.asarray(ages).size))
        if self.params is None:
            raise ValueError("census provider needs current parameters")
        lam = np.asarray(self.params.baseline[1].cumulative_at(ages, strict=True))
        mult = np.exp(self.cells @ self.params.beta[1])
        expo = np.outer(mult, lam)
        return np.exp(-expo) if s == 1 else -np.expm1(-expo)

    def base_mass(self, ages, s: int) -> np.ndarray:
        """(n_cells, n_ages) probability-weighted census count at each age."""
        ages = np.asarray(ages, dtype=float)
        if np.any(ages <= 0.0) or np.any(ages > self.census.age_horizon + 1e-12):
            raise ValueError("query ages must lie in (0, age horizon]")
        kbin = np.minimum(np.floor(ages).astype(int), self.census.n_ages - 1)
        return self._stratum_prob(ages, s) * self.mass[:, kbin]

    def integral_g0(self, s: int, beta_s) -> float:
        """Exact integral of the order-0 risk sum over (0, age horizon)."""
        w = np.exp(self.cells @ np.asarray(beta_s, dtype=float))
        total = 0.0
        edges = self._bin_edges
        for c in range(self.cells.shape[0]):
            for k in range(self.census.n_ages):
                if self.mass[c, k] == 0.0:
                    continue
                lo, hi = edges[k], edges[k + 1]
                if self.spec.scheme == SCHEME_NONE:
                    surv = hi - lo
                else:
                    surv = integrated_stratum1_survival(
                        self.params, self.spec, self.cells[c], lo, hi
                    )
                piece = surv if s == 1 else (hi - lo) - surv
                total += w[c] * self.mass[c, k] * piece
        return total


class IdealRiskProvider:
    """Exact risk sums from full doubly-censored data with realized strata."""

    mode = "ideal"

    def __init__(self, data: DoublyCensoredDataset, spec: ModelSpec):
        self.spec = spec
        if spec.scheme == SCHEME_FIRST_EVENT and not data.strata_known:
            raise ValueError("ideal risk sets need realized pre-window event counts")
        self.cells, cell_of = np.unique(data.covariates, axis=0, return_inverse=True)
        n_cells = self.cells.shape[0]
        self._starts = {}
        self._stops = {}
        self._lengths = np.zeros((2, n_cells))
        first = data.first_event_age
        if spec.scheme == SCHEME_NONE:
            spans = {1: (data.c_left, data.c_right, np.ones(data.n_subjects, bool))}
        else:
            in1 = data.pre_window_events == 0
            end1 = np.where(np.isnan(first), data.c_right, np.fmin(first, data.c_right))
            start2 = np.where(in1, np.where(np.isnan(first), np.nan, first), data.c_left)
            has2 = ~np.isnan(start2)
            spans = {
                1: (data.c_left, end1, in1),
                2: (np.where(has2, start2, 0.0), data.c_right, has2),
            }
        for s, (lo, hi, active) in spans.items():
            for c in range(n_cells):
                sel = active & (cell_of == c) & (hi > lo)
                self._starts[(s, c)] = np.sort(lo[sel])
                self._stops[(s, c)] = np.sort(hi[sel])
                self._lengths[s - 1, c] = np.sum(hi[sel] - lo[sel])

    def base_mass(self, ages, s: int) -> np.ndarray:
        """(n_cells, n_ages) realized at-risk counts: subjects with the
        stratum-s span covering each age (spans are left-open)."""
        ages = np.asarray(ages, dtype=float)
        out = np.empty((self.cells.shape[0], ages.size))
        for c in range(self.cells.shape[0]):
            lo = self._starts.get((s, c), np.empty(0))
            hi = self._stops.get((s, c), np.empty(0))
            out[c] = np.searchsorted(lo, ages, side="left") - np.searchsorted(
                hi, ages, side="left"
            )
        return out

    def integral_g0(self, s: int, beta_s) -> float:
        w = np.exp(self.cells @ np.asarray(beta_s, dtype=float))
        return float(w @ self._lengths[s - 1])


def _moments(provider, s, beta_s, ages, base=None, order=2):
    """Risk moments G^(0), G^(1), G^(2) at the query ages."""
    if base is None:
        base = provider.base_mass(ages, s)
    cells = provider.cells
    w = np.exp(cells @ np.asarray(beta_s, dtype=float))
    wb = base * w[:, None]
    g0 = wb.sum(axis=0)
    if order == 0:
        return g0, None, None
    g1 = cells.T @ wb
    if order == 1:
        return g0, g1, None
    g2 = np.einsum("ci,cj,ca->ija", cells, cells, wb)
    return g0, g1, g2


def risk_moments(provider, s: int, beta_s, a, q: int = 0):
    """Order-q risk moment at a single age: scalar, vector, or matrix."""
    ages = np.atleast_1d(np.asarray(a, dtype=float))
    g0, g1, g2 = _moments(provider, s, beta_s, ages, order=q)
    if q == 0:
        return float(g0[0])
    if q == 1:
        return g1[:, 0]
    return g2[:, :, 0]


# ---------------------------------------------------------------------------
# Event membership weights
# ---------------------------------------------------------------------------


def _first_event_flags(cohort: CohortDataset) -> np.ndarray:
    starts = np.searchsorted(cohort.event_subject, np.arange(cohort.n_subjects), "left")
    flags = np.zeros(cohort.n_events, dtype=bool)
    flags[starts[cohort.event_counts > 0]] = True
    return flags


def _baseline_density(baseline, ages, bandwidth, horizon):
    if isinstance(baseline, StepBaseline):
        return baseline.local_rate(ages, bandwidth=bandwidth, horizon=horizon)
    return baseline.rate_at(ages)


def event_stratum_weights(cohort: CohortDataset, spec: ModelSpec,
                          membership: str = MEMBERSHIP_POSTERIOR,
                          params: Optional[Parameters] = None,
                          initial_strata=None,
                          bandwidth: float = 1.0) -> np.ndarray:
    """Per-event stratum membership weights, shape (n_events, n_strata).

    Under the first-event scheme every event after a subject's first
    observed one belongs to stratum 2; the first observed event carries
    either its realized stratum indicator or the model posterior that it is
    the subject's first ever.  Step baselines, having no density, enter the
    posterior through locally averaged increment rates.
    """
    if spec.scheme == SCHEME_NONE:
        return np.ones((cohort.n_events, 1))
    first = _first_event_flags(cohort)
    w1 = np.zeros(cohort.n_events)
    if membership == MEMBERSHIP_KNOWN:
        if initial_strata is None:
            raise ValueError("known membership needs realized initial strata")
        s0 = np.asarray(initial_strata)
        w1[first] = (s0[cohort.event_subject[first]] == 1).astype(float)
    elif membership == MEMBERSHIP_POSTERIOR:
        if params is None:
            raise ValueError("posterior membership needs current parameters")
        sub = cohort.event_subject[first]
        a1 = cohort.event_age[first]
        z = cohort.covariates[sub]
        cl = cohort.c_left[sub]
        e1 = np.exp(z @ params.beta[1])
        e2 = np.exp(z @ params.beta[2])
        b1, b2 = params.baseline[1], params.baseline[2]
        horizon = spec.age_horizon
        d1 = np.asarray(_baseline_density(b1, a1, bandwidth, horizon), dtype=float)
        d2 = np.asarray(_baseline_density(b2, a1, bandwidth, horizon), dtype=float)
        lam1_a1 = np.asarray(b1.cumulative_at(a1)) * e1
        lam1_cl = np.asarray(b1.cumulative_at(cl)) * e1
        lam2_seg = (np.asarray(b2.cumulative_at(a1)) - np.asarray(b2.cumulative_at(cl))) * e2
        with np.errstate(divide="ignore"):
            log_nr = np.log(d1 * e1) - lam1_a1
            log_t2 = np.where(
                lam1_cl > 0.0,
                np.log(d2 * e2) + log1mexp(np.maximum(lam1_cl, 1e-300)) - lam2_seg,
                -np.inf,
            )
        diff = np.clip(log_t2 - log_nr, -745.0, 709.0)
        pi1 = 1.0 / (1.0 + np.exp(diff))
        pi1 = np.where(np.isneginf(log_t2), 1.0, pi1)
        pi1 = np.where(np.isneginf(log_nr) & np.isneginf(log_t2), 0.5, pi1)
        pi1 = np.where(np.isneginf(log_nr) & ~np.isneginf(log_t2), 0.0, pi1)
        w1[first] = pi1
    else:
        raise ValueError(f"unknown membership rule {membership!r}")
    return np.column_stack([w1, 1.0 - w1])


# ---------------------------------------------------------------------------
# Scores, baselines, projections
# ---------------------------------------------------------------------------


def _check_support(g0, ages, s, needed=None):
    """Vanishing risk sums are fatal only where an event carries weight;
    weightless terms follow the 0/0 = 0 convention."""
    bad = g0 <= 0.0
    if needed is not None:
        bad = bad & (needed > 0.0)
    if np.any(bad):
        age = float(ages[np.argmax(bad)])
        raise FitError(
            f"risk sum for stratum {s} vanishes at event age {age:.6f} "
            "(census support hole)"
        )


def _score_blocks(cohort, provider, beta: dict, weights, multipliers=None,
                  bases=None, want_jacobian=False):
    """Per-stratum score vectors and (optionally) Jacobian blocks."""
    ages = cohort.event_age
    zi = cohort.covariates[cohort.event_subject]
    mult = np.ones(cohort.n_events)
    if multipliers is not None:
        mult = np.asarray(multipliers, dtype=float)[cohort.event_subject]
    n_strata = weights.shape[1]
    scores, jacobians = {}, {}
    for s in range(1, n_strata + 1):
        base = provider.base_mass(ages, s) if bases is None else bases[s]
        cells = provider.cells
        w_cell = np.exp(cells @ np.asarray(beta[s], dtype=float))
        wb = base * w_cell[:, None]
        g0 = wb.sum(axis=0)
        ev_w = weights[:, s - 1] * mult
        _check_support(g0, ages, s, needed=ev_w)
        safe_g0 = np.where(g0 > 0.0, g0, 1.0)
        zbar = (cells.T @ wb) / safe_g0
        scores[s] = (ev_w[:, None] * (zi - zbar.T)).sum(axis=0)
        if want_jacobian:
            # sum_e ev_w (G2/G0 - zbar zbar') without the (p, p, E) tensor
            cell_mass = wb @ (ev_w / safe_g0)
            first = (cells.T * cell_mass) @ cells
            second = (zbar * ev_w) @ zbar.T
            jacobians[s] = -(first - second)
    return (scores, jacobians) if want_jacobian else scores


def score_census(cohort: CohortDataset, provider, beta: dict,
                 membership: str = MEMBERSHIP_POSTERIOR,
                 initial_strata=None, multipliers=None) -> dict:
    """Census-approximated per-stratum partial scores at ``beta``.

    Membership weights come from the provider's current parameters
    (posterior rule) or from realized initial strata (known rule).
    """
    weights = event_stratum_weights(
        cohort, provider.spec, membership, provider.params, initial_strata
    )
    return _score_blocks(cohort, provider, beta, weights, multipliers)


def score_ideal(data: DoublyCensoredDataset, spec: ModelSpec, beta: dict) -> dict:
    """Partial score on the full data with realized strata (benchmark)."""
    provider = IdealRiskProvider(data, spec)
    cohort = data.cohort_view()
    if spec.scheme == SCHEME_NONE:
        weights = np.ones((cohort.n_events, 1))
    else:
        pre = data.pre_window_events[data.event_counts > 0]
        weights = event_stratum_weights(
            cohort, spec, MEMBERSHIP_KNOWN, initial_strata=np.where(pre > 0, 2, 1)
        )
    return _score_blocks(cohort, provider, beta, weights)


def baseline_update(cohort: CohortDataset, provider, beta: dict, weights,
                    multipliers=None, pooled: bool = False) -> dict:
    """Weighted Breslow step baselines: one increment per observed event age.

    ``pooled`` ties the strata to one shared baseline (membership weights
    then sum to the event's multiplier across strata).
    """
    ages = cohort.event_age
    order = np.argsort(ages, kind="stable")
    mult = np.ones(cohort.n_events)
    if multipliers is not None:
        mult = np.asarray(multipliers, dtype=float)[cohort.event_subject]
    n_strata = weights.shape[1]
    g0 = {}
    for s in range(1, n_strata + 1):
        g = _moments(provider, s, beta[s], ages, order=0)[0]
        _check_support(g, ages, s, needed=weights[:, s - 1] * mult)
        g0[s] = g
    out = {}
    if pooled and n_strata > 1:
        denom = sum(g0.values())
        inc = weights.sum(axis=1) * mult / denom
        shared = _step_from_increments(ages[order], inc[order])
        return {s: shared for s in range(1, n_strata + 1)}
    for s in range(1, n_strata + 1):
        w = weights[:, s - 1] * mult
        inc = np.where(w > 0.0, w / np.where(g0[s] > 0.0, g0[s], 1.0), 0.0)
        out[s] = _step_from_increments(ages[order], inc[order])
    return out


def _step_from_increments(sorted_ages, increments):
    # nonnegative for any nonnegative event weights; resampling with signed
    # multipliers may produce signed increments, so skip the sign check
    keep = increments != 0.0
    obj = object.__new__(StepBaseline)
    object.__setattr__(obj, "jump_ages", sorted_ages[keep])
    object.__setattr__(obj, "increments", increments[keep])
    object.__setattr__(obj, "_cum", np.cumsum(increments[keep]))
    return obj


def constant_baseline_projection(cohort: CohortDataset, provider, beta: dict,
                                 weights, multipliers=None,
                                 pooled: bool = False) -> dict:
    """Constant rate solving the aggregated baseline equation:
    weighted events divided by the integrated risk sum."""
    mult = np.ones(cohort.n_events)
    if multipliers is not None:
        mult = np.asarray(multipliers, dtype=float)[cohort.event_subject]
    n_strata = weights.shape[1]
    nums = {s: float(np.sum(weights[:, s - 1] * mult)) for s in range(1, n_strata + 1)}
    dens = {s: provider.integral_g0(s, beta[s]) for s in range(1, n_strata + 1)}
    if pooled and n_strata > 1:
        den = sum(dens.values())
        if den <= 0:
            raise FitError("integrated risk sum vanishes for the shared baseline")
        rate = sum(nums.values()) / den
        return {s: ConstantBaseline(rate) for s in range(1, n_strata + 1)}
    out = {}
    for s in range(1, n_strata + 1):
        if dens[s] <= 0:
            if nums[s] == 0.0:
                out[s] = ConstantBaseline(0.0)
                continue
            raise FitError(f"integrated risk sum vanishes for stratum {s}")
        out[s] = ConstantBaseline(nums[s] / dens[s])
    return out


# ---------------------------------------------------------------------------
# Newton solve for the coefficients
# ---------------------------------------------------------------------------


def _solve_beta(cohort, provider, beta0: dict, weights, shared: bool,
                multipliers=None, tol: float = 1e-10, max_iter: int = 50):
    """Newton on the frozen-weight score; shared ties strata to one vector."""
    bases = {
        s: provider.base_mass(cohort.event_age, s)
        for s in range(1, weights.shape[1] + 1)
    }
    total_w = float(np.sum(weights)) if multipliers is None else float(
        np.sum(weights * np.asarray(multipliers, dtype=float)[cohort.event_subject][:, None])
    )
    scale = tol * (1.0 + total_w)
    beta = {s: np.asarray(v, dtype=float).copy() for s, v in beta0.items()}
    n_strata = weights.shape[1]

    def assemble():
        scores, jacs = _score_blocks(
            cohort, provider, beta, weights, multipliers, bases, want_jacobian=True
        )
        if shared and n_strata > 1:
            return (sum(scores.values()),), (sum(jacs.values()),)
        return tuple(scores[s] for s in range(1, n_strata + 1)), tuple(
            jacs[s] for s in range(1, n_strata + 1)
        )

    for _ in range(max_iter):
        scores, jacs = assemble()
        norm = max(np.max(np.abs(u)) if u.size else 0.0 for u in scores)
        if norm <= scale:
            break
        for block, (u, j) in enumerate(zip(scores, jacs)):
            if u.size == 0:
                continue
            try:
                step = np.linalg.solve(j, -u)
            except np.linalg.LinAlgError as err:
                raise FitError(f"singular score Jacobian in block {block + 1}") from err
            if shared and n_strata > 1:
                for s in beta:
                    beta[s] = beta[s] + step
            else:
                beta[block + 1] = beta[block + 1] + step
    scores, jacs = assemble()
    norm = max(np.max(np.abs(u)) if u.size else 0.0 for u in scores)
    min_eig = min(float(np.linalg.eigvalsh(-j).min()) for j in jacs)
    if shared and n_strata > 1:
        jac_map = {s: jacs[0] for s in beta}
    else:
        jac_map = {s: jacs[s - 1] for s in range(1, n_strata + 1)}
    return beta, norm, min_eig, jac_map


# ---------------------------------------------------------------------------
# The alternating fit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Algorithm2Config:
    """Outer-loop controls: stop on per-stratum relative L1 change of beta."""

    tolerance: float = 1e-6
    max_outer_iterations: int = 200
    inner_tol: float = 1e-10
    inner_max_iter: int = 50
    bandwidth: float = 1.0
    initial_beta: Optional[dict] = None
    initial_lambda0: Optional[float] = None
    initial_params: Optional[Parameters] = None

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")


@dataclass
class CensusFitResult:
    beta: dict
    baseline: dict
    params: Parameters
    converged: bool
    status: str  # converged | max_iterations | oscillation
    outer_iterations: int
    score_norm: dict
    jacobian_min_eig: float
    beta_trace: list
    model_code: str
    beta_covariance: Optional[dict] = None  # sandwich-free inverse curvature

    @property
    def lambda0(self) -> dict:
        return {
            s: (b.rate if isinstance(b, ConstantBaseline) else None)
            for s, b in self.baseline.items()
        }


def _jac_covariance(jac_map: dict):
    out = {}
    for s, j in jac_map.items():
        try:
            out[s] = np.linalg.inv(-j)
        except np.linalg.LinAlgError:
            out[s] = None
    return out


def _rel_l1(new: dict, old: dict) -> float:
    worst = 0.0
    for s in new:
        denom = float(np.sum(np.abs(old[s])))
        num = float(np.sum(np.abs(new[s] - old[s])))
        worst = max(worst, num / denom if denom > 0 else (0.0 if num == 0 else np.inf))
    return worst


def _initial_state(cohort, provider, spec, config):
    if config.initial_params is not None:
        return config.initial_params
    if config.initial_lambda0 is not None:
        lam = config.initial_lambda0
    elif provider.mode == "census":
        person_time = float(provider.mass.sum())  # unit-year bins
        lam = cohort.n_events / max(person_time, 1.0)
    else:
        lam = cohort.n_events / max(provider.integral_g0(1, np.zeros(cohort.p)), 1.0)
    beta = {s: np.zeros(cohort.p) for s in spec.strata}
    if config.initial_beta is not None:
        beta = {s: np.asarray(config.initial_beta[s], dtype=float).copy()
                for s in spec.strata}
    baseline = {s: ConstantBaseline(lam) for s in spec.strata}
    return Parameters(beta=beta, baseline=baseline)


def fit_algorithm2(cohort: CohortDataset, census: CensusTable, spec: ModelSpec,
                   config: Algorithm2Config = Algorithm2Config(),
                   membership: str = MEMBERSHIP_POSTERIOR,
                   initial_strata=None, multipliers=None,
                   provider=None) -> CensusFitResult:
    """Alternating census-augmented fit over any cell of the model grid.

    Each outer iteration refreshes the stratum probabilities from the
    current parameters, solves the coefficient score with them frozen, and
    updates the baselines (Breslow steps for time-varying cells, integrated
    projections for constant ones).  A period-2 cycle in the coefficients is
    reported as oscillation rather than convergence.
    """
    if cohort.n_subjects == 0:
        raise ValueError("cannot fit an empty cohort")
    if provider is None:
        census.cell_index(cohort.covariates)  # covariate cells must match
        provider = CensusRiskProvider(census, spec)
    params = _initial_state(cohort, provider, spec, config)
    shared = not spec.coefficients_stratified and spec.n_strata > 1
    pooled_baseline = not spec.baseline_stratified and spec.n_strata > 1
    trace = []
    status = "max_iterations"
    converged = False
    norm = np.inf
    min_eig = np.nan
    for outer in range(1, config.max_outer_iterations + 1):
        provider.set_params(params)
        weights = event_stratum_weights(
            cohort, spec, membership, params, initial_strata, config.bandwidth
        )
        beta_new, norm, min_eig, jac_map = _solve_beta(
            cohort, provider, params.beta, weights, shared, multipliers,
            config.inner_tol, config.inner_max_iter,
        )
        if spec.baseline_time_varying:
            baseline = baseline_update(
                cohort, provider, beta_new, weights, multipliers, pooled_baseline
            )
        else:
            baseline = constant_baseline_projection(
                cohort, provider, beta_new, weights, multipliers, pooled_baseline
            )
        trace.append({s: beta_new[s].copy() for s in beta_new})
        rel = _rel_l1(beta_new, params.beta)
        params = Parameters(beta=beta_new, baseline=baseline)
        if rel <= config.tolerance:
            converged = True
            status = "converged"
            break
        if len(trace) >= 3:
            rel_cycle = _rel_l1(trace[-1], trace[-3])
            if rel_cycle <= config.tolerance:
                status = "oscillation"
                break
    return CensusFitResult(
        beta=params.beta,
        baseline=params.baseline,
        params=params,
        converged=converged,
        status=status,
        outer_iterations=len(trace),
        score_norm={s: float(norm) for s in spec.strata},
        jacobian_min_eig=float(min_eig),
        beta_trace=trace,
        model_code=spec.code,
        beta_covariance=_jac_covariance(jac_map),
    )


def fit_ideal(data: DoublyCensoredDataset, spec: ModelSpec,
              config: Algorithm2Config = Algorithm2Config()) -> CensusFitResult:
    """Benchmark fit: realized risk sets, realized strata, single solve."""
    provider = IdealRiskProvider(data, spec)
    cohort = data.cohort_view()
    if spec.scheme == SCHEME_NONE:
        weights = np.ones((cohort.n_events, 1))
        initial = None
    else:
        pre = data.pre_window_events[data.event_counts > 0]
        initial = np.where(pre > 0, 2, 1)
        weights = event_stratum_weights(cohort, spec, MEMBERSHIP_KNOWN,
                                        initial_strata=initial)
    shared = not spec.coefficients_stratified and spec.n_strata > 1
    pooled = not spec.baseline_stratified and spec.n_strata > 1
    beta0 = {s: np.zeros(cohort.p) for s in spec.strata}
    beta, norm, min_eig, jac_map = _solve_beta(
        cohort, provider, beta0, weights, shared, None,
        config.inner_tol, config.inner_max_iter,
    )
    if spec.baseline_time_varying:
        baseline = baseline_update(cohort, provider, beta, weights, None, pooled)
    else:
        baseline = constant_baseline_projection(cohort, provider, beta, weights, None, pooled)
    params = Parameters(beta=beta, baseline=baseline)
    return CensusFitResult(
        beta=beta,
        baseline=baseline,
        params=params,
        converged=True,
        status="converged",
        outer_iterations=1,
        score_norm={s: float(norm) for s in spec.strata},
        jacobian_min_eig=float(min_eig),
        beta_trace=[{s: beta[s].copy() for s in beta}],
        model_code=spec.code,
        beta_covariance=_jac_covariance(jac_map),
    )


@dataclass
class SncIndicatorResult:
    alpha: float  # log rate ratio carried by the stratum indicator
    lambda0: float
    beta: np.ndarray
    converged: bool
    status: str
    outer_iterations: int

    @property
    def lambda02(self) -> float:
        return self.lambda0 * math.exp(self.alpha)


def fit_snc_via_indicator(cohort: CohortDataset, census: CensusTable,
                          config: Algorithm2Config = Algorithm2Config(),
                          membership: str = MEMBERSHIP_POSTERIOR,
                          initial_strata=None,
                          age_horizon: Optional[float] = None) -> SncIndicatorResult:
    """Shared-coefficient fit in the indicator parameterization.

    The stratified-baseline model with shared coefficients rewrites as one
    baseline plus a coefficient on the post-first-event indicator.  Because
    that indicator is constant within each stratum's risk set, its
    coefficient is carried by the ratio of the per-stratum baseline
    projections while the covariate coefficients solve the summed scores;
    the state is iterated in (rate, indicator coefficient, coefficients)
    form and maps one-to-one onto the stratified parameterization.
    """
    horizon = age_horizon or census.age_horizon
    spec = ModelSpec.from_code("snc", age_horizon=horizon)
    provider = CensusRiskProvider(census, spec)
    person_time = float(provider.mass.sum())
    lam0 = cohort.n_events / max(person_time, 1.0)
    alpha = 0.0
    gamma = np.zeros(cohort.p + 1)  # (alpha, beta)
    status = "max_iterations"
    converged = False
    outer = 0
    for outer in range(1, config.max_outer_iterations + 1):
        beta_shared = gamma[1:]
        params = Parameters(
            beta={1: beta_shared, 2: beta_shared},
            baseline={1: ConstantBaseline(lam0),
                      2: ConstantBaseline(lam0 * math.exp(alpha))},
        )
        provider.set_params(params)
        weights = event_stratum_weights(
            cohort, spec, membership, params, initial_strata, config.bandwidth
        )
        beta_new, _, _, _ = _solve_beta(
            cohort, provider, params.beta, weights, shared=True,
            tol=config.inner_tol, max_iter=config.inner_max_iter,
        )
        proj = constant_baseline_projection(cohort, provider, beta_new, weights)
        lam0 = proj[1].rate
        alpha_new = math.log(proj[2].rate / proj[1].rate)
        gamma_new = np.concatenate([[alpha_new], beta_new[1]])
        denom = float(np.sum(np.abs(gamma)))
        rel = float(np.sum(np.abs(gamma_new - gamma))) / denom if denom > 0 else np.inf
        alpha, gamma = alpha_new, gamma_new
        if rel <= config.tolerance:
            converged = True
            status = "converged"
            break
    return SncIndicatorResult(
        alpha=alpha,
        lambda0=lam0,
        beta=gamma[1:],
        converged=converged,
        status=status,
        outer_iterations=outer,
    )
