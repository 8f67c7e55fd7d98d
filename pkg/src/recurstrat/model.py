"""Stratified recurrent-event intensity model.

The conditional event intensity of a subject at age ``a`` is

    lambda(a | history, z) = lambda_0s(a) * exp(beta_s' z),

where the active stratum ``s`` is a left-continuous, non-decreasing summary
of the event history.  Two stratification schemes are supported: the
first-event scheme (stratum 1 before the first event, stratum 2 after) and
the degenerate single-stratum scheme.

Everything here is a pure function of immutable inputs; all other modules
evaluate model quantities through this one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

__all__ = [
    "UNKNOWN",
    "ConstantBaseline",
    "PiecewiseConstantBaseline",
    "StepBaseline",
    "Baseline",
    "ModelSpec",
    "Parameters",
    "ObservationWindow",
    "SubjectPath",
    "stratum_at",
    "intensity",
    "cumulative_intensity",
    "truncation_factor",
    "induced_intensity",
    "stratum_prob_marginal",
    "stratum_prob_posterior",
    "initial_stratum_prob_cohort",
    "integrated_stratum1_survival",
    "log1mexp",
    "log_expm1",
]

DEFAULT_AGE_HORIZON = 18.0

#: Returned by :func:`stratum_at` when the pre-window history leaves the
#: stratum undetermined.
UNKNOWN = "unknown"


def log1mexp(x):
    """log(1 - exp(-x)) for x > 0, stable for both small and large x."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(
            x > math.log(2.0),
            np.log1p(-np.exp(-np.minimum(x, 745.0))),
            np.log(-np.expm1(-np.maximum(x, 1e-300))),
        )
    return out if out.ndim else float(out)


def log_expm1(x):
    """log(exp(x) - 1) for x > 0, stable against overflow."""
    x = np.asarray(x, dtype=float)
    out = x + log1mexp(x)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConstantBaseline:
    """Constant baseline rate (events per year)."""

    rate: float

    def __post_init__(self):
        if not np.isfinite(self.rate) or self.rate < 0.0:
            raise ValueError(f"baseline rate must be finite and >= 0, got {self.rate}")

    @property
    def has_density(self) -> bool:
        return True

    def rate_at(self, a):
        return np.full_like(np.asarray(a, dtype=float), self.rate)

    def cumulative(self, a0, a1):
        a0 = np.asarray(a0, dtype=float)
        a1 = np.asarray(a1, dtype=float)
        return self.rate * (a1 - a0)

    def cumulative_at(self, a, strict: bool = False):
        return self.rate * np.asarray(a, dtype=float)


@dataclass(frozen=True)
class PiecewiseConstantBaseline:
    """Piecewise-constant baseline rate.

    ``breakpoints`` are ascending ages starting at 0.0; ``rates[j]`` applies
    on the piece (breakpoints[j], breakpoints[j+1]], the last piece extending
    to the age horizon.
    """

    breakpoints: np.ndarray
    rates: np.ndarray

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        rt = np.asarray(self.rates, dtype=float)
        if bp.ndim != 1 or rt.ndim != 1 or bp.size != rt.size or bp.size == 0:
            raise ValueError("breakpoints and rates must be 1-d of equal length")
        if bp[0] != 0.0 or np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly ascending and start at 0")
        if np.any(~np.isfinite(rt)) or np.any(rt < 0):
            raise ValueError("rates must be finite and >= 0")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "rates", rt)
        # cumulative hazard at each breakpoint
        knots = np.concatenate([[0.0], np.cumsum(rt[:-1] * np.diff(bp))])
        object.__setattr__(self, "_knots", knots)

    @property
    def has_density(self) -> bool:
        return True

    def rate_at(self, a):
        a = np.asarray(a, dtype=float)
        idx = np.clip(np.searchsorted(self.breakpoints, a, side="left") - 1, 0, None)
        return self.rates[idx]

    def cumulative_at(self, a, strict: bool = False):
        a = np.asarray(a, dtype=float)
        idx = np.clip(np.searchsorted(self.breakpoints, a, side="left") - 1, 0, None)
        return self._knots[idx] + self.rates[idx] * (a - self.breakpoints[idx])

    def cumulative(self, a0, a1):
        return self.cumulative_at(a1) - self.cumulative_at(a0)

    def inverse_cumulative(self, target):
        """Smallest a with cumulative_at(a) >= target; inf if unreachable."""
        target = np.asarray(target, dtype=float)
        idx = np.clip(np.searchsorted(self._knots, target, side="right") - 1, 0, None)
        rate = self.rates[idx]
        with np.errstate(divide="ignore", invalid="ignore"):
            a = self.breakpoints[idx] + (target - self._knots[idx]) / rate
        a = np.where(rate == 0.0, np.inf, a)
        return np.where(target <= 0.0, 0.0, a)


@dataclass(frozen=True)
class StepBaseline:
    """Nonparametric cumulative baseline with jumps at observed event ages.

    Not a density-valued object: only cumulative quantities are defined.
    """

    jump_ages: np.ndarray
    increments: np.ndarray

    def __post_init__(self):
        ja = np.asarray(self.jump_ages, dtype=float)
        inc = np.asarray(self.increments, dtype=float)
        if ja.ndim != 1 or inc.ndim != 1 or ja.size != inc.size:
            raise ValueError("jump_ages and increments must be 1-d of equal length")
        if ja.size and np.any(np.diff(ja) <= 0):
            raise ValueError("jump ages must be strictly ascending")
        if np.any(inc < 0):
            raise ValueError("increments must be >= 0")
        object.__setattr__(self, "jump_ages", ja)
        object.__setattr__(self, "increments", inc)
        object.__setattr__(self, "_cum", np.cumsum(inc))

    @property
    def has_density(self) -> bool:
        return False

    def rate_at(self, a):
        raise ValueError("step baselines carry no rate density; use cumulative forms")

    def cumulative_at(self, a, strict: bool = False):
        side = "left" if strict else "right"
        a = np.asarray(a, dtype=float)
        idx = np.searchsorted(self.jump_ages, a, side=side)
        cum = np.concatenate([[0.0], self._cum])
        return cum[idx]

    def cumulative(self, a0, a1):
        return self.cumulative_at(a1) - self.cumulative_at(a0)

    def local_rate(self, a, bandwidth: float = 1.0, horizon: float = DEFAULT_AGE_HORIZON):
        """Average increment rate over a symmetric window, clipped to [0, horizon]."""
        a = np.asarray(a, dtype=float)
        lo = np.clip(a - bandwidth, 0.0, None)
        hi = np.clip(a + bandwidth, None, horizon)
        return (self.cumulative_at(hi) - self.cumulative_at(lo)) / (hi - lo)


Baseline = Union[ConstantBaseline, PiecewiseConstantBaseline, StepBaseline]


# ---------------------------------------------------------------------------
# Model specification and parameters
# ---------------------------------------------------------------------------

SCHEME_FIRST_EVENT = "first_event"
SCHEME_NONE = "none"

_MODEL_CODES = ("nnc", "nsc", "snc", "ssc", "nnv", "nsv", "snv", "ssv")


@dataclass(frozen=True)
class ModelSpec:
    """One cell of the model grid plus the stratification scheme.

    The three flags select the cell: stratified baseline / stratified
    coefficients / time-varying baseline.  A single-stratum scheme forces
    both stratification flags off.
    """

    baseline_stratified: bool = False
    coefficients_stratified: bool = False
    baseline_time_varying: bool = False
    scheme: str = SCHEME_FIRST_EVENT
    age_horizon: float = DEFAULT_AGE_HORIZON

    def __post_init__(self):
        if self.scheme not in (SCHEME_FIRST_EVENT, SCHEME_NONE):
            raise ValueError(f"unknown stratification scheme {self.scheme!r}")
        if self.scheme == SCHEME_NONE and (
            self.baseline_stratified or self.coefficients_stratified
        ):
            raise ValueError("single-stratum scheme forbids stratified baseline/coefficients")
        if not (self.age_horizon > 0):
            raise ValueError("age horizon must be positive")

    @property
    def n_strata(self) -> int:
        return 2 if self.scheme == SCHEME_FIRST_EVENT else 1

    @property
    def strata(self) -> tuple:
        return tuple(range(1, self.n_strata + 1))

    @property
    def code(self) -> str:
        return (
            ("s" if self.baseline_stratified else "n")
            + ("s" if self.coefficients_stratified else "n")
            + ("v" if self.baseline_time_varying else "c")
        )

    @classmethod
    def from_code(cls, code: str, age_horizon: float = DEFAULT_AGE_HORIZON) -> "ModelSpec":
        code = code.lower()
        if code not in _MODEL_CODES:
            raise ValueError(f"model code must be one of {_MODEL_CODES}, got {code!r}")
        b_strat = code[0] == "s"
        c_strat = code[1] == "s"
        scheme = SCHEME_FIRST_EVENT if (b_strat or c_strat) else SCHEME_NONE
        return cls(
            baseline_stratified=b_strat,
            coefficients_stratified=c_strat,
            baseline_time_varying=code[2] == "v",
            scheme=scheme,
            age_horizon=age_horizon,
        )


@dataclass(frozen=True)
class Parameters:
    """Per-stratum coefficient vectors and baseline functions.

    Unstratified cells share one object across strata; the maps always carry
    an entry for every stratum id.
    """

    beta: dict
    baseline: dict

    def __post_init__(self):
        beta = {int(s): np.asarray(b, dtype=float) for s, b in self.beta.items()}
        for s, b in beta.items():
            if b.ndim != 1 or np.any(~np.isfinite(b)):
                raise ValueError(f"coefficients for stratum {s} must be finite 1-d")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "baseline", {int(s): b for s, b in self.baseline.items()})

    @classmethod
    def build(cls, spec: ModelSpec, beta, baseline) -> "Parameters":
        """Expand possibly-shared beta/baseline to the per-stratum maps."""
        strata = spec.strata
        if isinstance(beta, dict):
            bmap = beta
        elif spec.coefficients_stratified:
            raise ValueError("stratified coefficients need a per-stratum map")
        else:
            bmap = {s: beta for s in strata}
        if isinstance(baseline, dict):
            lmap = baseline
        elif spec.baseline_stratified:
            raise ValueError("stratified baseline needs a per-stratum map")
        else:
            lmap = {s: baseline for s in strata}
        return cls(beta=bmap, baseline=lmap)

    @property
    def dimension(self) -> int:
        return next(iter(self.beta.values())).size


@dataclass(frozen=True)
class ObservationWindow:
    """Subject-level age window (c_left, c_right]."""

    c_left: float
    c_right: float

    def __post_init__(self):
        if not (0.0 <= self.c_left < self.c_right):
            raise ValueError(f"need 0 <= c_left < c_right, got ({self.c_left}, {self.c_right})")

    @staticmethod
    def from_birthdate(birthdate: float, w_left: float, w_right: float,
                       age_horizon: float = DEFAULT_AGE_HORIZON) -> "ObservationWindow":
        return ObservationWindow(
            c_left=max(0.0, w_left - birthdate),
            c_right=min(age_horizon, w_right - birthdate),
        )

    @property
    def length(self) -> float:
        return self.c_right - self.c_left


@dataclass(frozen=True)
class SubjectPath:
    """Observed in-window record of one subject."""

    window: ObservationWindow
    covariates: np.ndarray
    event_ages: np.ndarray
    subject_id: Optional[int] = None

    def __post_init__(self):
        z = np.asarray(self.covariates, dtype=float)
        ages = np.asarray(self.event_ages, dtype=float)
        if np.any(~np.isfinite(z)):
            raise ValueError("covariates must be finite")
        if ages.size:
            if np.any(np.diff(ages) <= 0):
                raise ValueError("event ages must be strictly ascending (no ties)")
            if ages[0] <= self.window.c_left or ages[-1] > self.window.c_right:
                raise ValueError("event ages must lie in (c_left, c_right]")
        object.__setattr__(self, "covariates", z)
        object.__setattr__(self, "event_ages", ages)


# ---------------------------------------------------------------------------
# Core operations
# ---------------------------------------------------------------------------


def _check_stratum(spec: ModelSpec, s: int) -> None:
    if s not in spec.strata:
        raise ValueError(f"stratum {s} not valid for scheme {spec.scheme!r}")


def stratum_at(scheme: str, observed_event_ages, pre_window_event_count: Optional[int],
               a: float, c_left: float = 0.0):
    """Stratum occupied at age ``a``, or :data:`UNKNOWN`.

    Left-continuous: an event at exactly ``a`` changes the stratum only
    after ``a``.  With the first-event scheme the stratum is undetermined
    when the pre-window count is unavailable, the window starts after birth,
    and no observed event precedes ``a``.
    """
    if scheme == SCHEME_NONE:
        return 1
    if scheme != SCHEME_FIRST_EVENT:
        raise ValueError(f"unknown scheme {scheme!r}")
    ages = np.asarray(observed_event_ages, dtype=float)
    if ages.size and ages[0] < a:
        return 2
    if pre_window_event_count is None:
        return 1 if c_left == 0.0 else UNKNOWN
    if pre_window_event_count > 0:
        return 2
    return 1


def intensity(params: Parameters, spec: ModelSpec, s: int, z, a):
    """Model intensity lambda_0s(a) * exp(beta_s' z)."""
    _check_stratum(spec, s)
    base = params.baseline[s]
    if not base.has_density:
        raise ValueError("step baselines carry no rate density; use cumulative forms")
    return float(base.rate_at(a)) * math.exp(float(params.beta[s] @ np.asarray(z, dtype=float)))


def cumulative_intensity(params: Parameters, spec: ModelSpec, s: int, z, a0, a1):
    """Integral of the intensity over (a0, a1]; exact for every baseline kind."""
    _check_stratum(spec, s)
    if not (0.0 <= a0 <= a1 <= spec.age_horizon):
        raise ValueError(f"need 0 <= a0 <= a1 <= horizon, got ({a0}, {a1})")
    base = params.baseline[s]
    return float(base.cumulative(a0, a1)) * math.exp(
        float(params.beta[s] @ np.asarray(z, dtype=float))
    )


def truncation_factor(params: Parameters, spec: ModelSpec, z, window: ObservationWindow,
                      a: float, s: int, post_first_event: bool = False) -> float:
    """Cohort-selection adjustment R(a, z).

    Ratio of at-least-one-in-window-event probabilities without and with an
    event placed at ``a``.  The induced intensity among cohort members is the
    model intensity divided by this factor.  The value lies in [0, 1]
    whenever the post-first-event intensity dominates the pre-first-event
    intensity, which covers all shipped scenario presets.
    """
    if spec.scheme != SCHEME_FIRST_EVENT:
        raise ValueError("truncation adjustment is defined for the first-event scheme")
    _check_stratum(spec, s)
    if not (0.0 < a <= window.c_right):
        raise ValueError(f"age {a} outside (0, c_right={window.c_right}]")
    cl, cr = window.c_left, window.c_right
    if s == 2:
        if post_first_event:
            return 1.0
        return float(-np.expm1(-cumulative_intensity(params, spec, 2, z, a, cr)))
    if a > cl:
        return float(-np.expm1(-cumulative_intensity(params, spec, 1, z, a, cr)))
    # pre-window branch: mixes both strata's baselines
    q_a_r = -np.expm1(-cumulative_intensity(params, spec, 1, z, a, cr))
    q_a_l = -np.expm1(-cumulative_intensity(params, spec, 1, z, a, cl))
    lam2 = cumulative_intensity(params, spec, 2, z, cl, cr)
    return float((q_a_r - q_a_l * math.exp(-lam2)) / (-np.expm1(-lam2)))


def induced_intensity(params: Parameters, spec: ModelSpec, z, window: ObservationWindow,
                      a: float, s: int, post_first_event: bool = False) -> float:
    """Intensity induced by conditioning on at least one in-window event."""
    r = truncation_factor(params, spec, z, window, a, s, post_first_event)
    if r <= 0.0:
        raise ZeroDivisionError(
            f"truncation factor vanishes at a={a} (window right edge); "
            "the induced intensity diverges there"
        )
    return intensity(params, spec, s, z, a) / r


def stratum_prob_marginal(params: Parameters, spec: ModelSpec, z, a: float, s: int) -> float:
    """Population probability of occupying stratum ``s`` at age ``a``."""
    _check_stratum(spec, s)
    if spec.scheme == SCHEME_NONE:
        return 1.0
    p1 = math.exp(-cumulative_intensity(params, spec, 1, z, 0.0, a))
    return p1 if s == 1 else 1.0 - p1


def stratum_prob_posterior(params: Parameters, spec: ModelSpec, path: SubjectPath,
                           a: float) -> dict:
    """Stratum membership probabilities at ``a`` given an observed cohort path.

    Zero for stratum 1 once any observed event precedes ``a``; otherwise the
    first observed event at age ``a1`` is either the subject's first ever
    (stratum 1 throughout (c_left, a1]) or a later one following an
    unobserved pre-window history, and Bayes' rule over those two hypotheses
    gives a ratio constant in ``a`` over (c_left, a1].
    """
    if spec.scheme != SCHEME_FIRST_EVENT:
        raise ValueError("posterior membership is defined for the first-event scheme")
    if path.event_ages.size == 0:
        raise ValueError("posterior membership needs at least one observed event")
    w = path.window
    if not (w.c_left < a <= w.c_right):
        raise ValueError(f"age {a} outside ({w.c_left}, {w.c_right}]")
    a1 = float(path.event_ages[0])
    if a > a1:
        return {1: 0.0, 2: 1.0}
    z = path.covariates
    if w.c_left == 0.0:
        return {1: 1.0, 2: 0.0}
    i1_cl = cumulative_intensity(params, spec, 1, z, 0.0, w.c_left)
    log_nr = math.log(intensity(params, spec, 1, z, a1)) - cumulative_intensity(
        params, spec, 1, z, 0.0, a1
    )
    log_t2 = (
        math.log(intensity(params, spec, 2, z, a1))
        + log1mexp(i1_cl)
        - cumulative_intensity(params, spec, 2, z, w.c_left, a1)
    )
    p1 = 1.0 / (1.0 + math.exp(min(log_t2 - log_nr, 700.0)))
    return {1: p1, 2: 1.0 - p1}


def initial_stratum_prob_cohort(params: Parameters, spec: ModelSpec, z,
                                window: ObservationWindow) -> float:
    """Probability of stratum 1 at c_left among subjects with in-window events.

    Equals exp of minus the induced first-event cumulative hazard over
    (0, c_left]: the population marginal reweighted by each hypothesis'
    chance of producing at least one in-window event.
    """
    if spec.scheme != SCHEME_FIRST_EVENT:
        return 1.0
    cl, cr = window.c_left, window.c_right
    if cl == 0.0:
        return 1.0
    p1 = math.exp(-cumulative_intensity(params, spec, 1, z, 0.0, cl))
    q1 = -np.expm1(-cumulative_intensity(params, spec, 1, z, cl, cr))
    q2 = -np.expm1(-cumulative_intensity(params, spec, 2, z, cl, cr))
    num = p1 * q1
    return float(num / (num + (1.0 - p1) * q2))


def integrated_stratum1_survival(params: Parameters, spec: ModelSpec, z,
                                 x: float, y: float) -> float:
    """Exact integral over (x, y) of the stratum-1 marginal probability."""
    if spec.scheme == SCHEME_NONE:
        return y - x
    base = params.baseline[1]
    c = math.exp(float(params.beta[1] @ np.asarray(z, dtype=float)))
    if isinstance(base, ConstantBaseline):
        segs = [(x, y, base.rate)]
    elif isinstance(base, PiecewiseConstantBaseline):
        cuts = np.unique(np.concatenate([[x, y], base.breakpoints]))
        cuts = cuts[(cuts >= x) & (cuts <= y)]
        segs = [(a0, a1, float(base.rate_at(0.5 * (a0 + a1))))
                for a0, a1 in zip(cuts[:-1], cuts[1:])]
    else:  # StepBaseline: survival is piecewise constant between jumps
        cuts = np.unique(np.concatenate([[x, y], base.jump_ages]))
        cuts = cuts[(cuts >= x) & (cuts <= y)]
        total = 0.0
        for a0, a1 in zip(cuts[:-1], cuts[1:]):
            total += (a1 - a0) * math.exp(-c * float(base.cumulative_at(a0)))
        return total
    total = 0.0
    for a0, a1, rate in segs:
        lam0 = c * float(base.cumulative_at(a0))
        u = c * rate * (a1 - a0)
        if u < 1e-12:
            total += (a1 - a0) * math.exp(-lam0)
        else:
            total += math.exp(-lam0) * (-np.expm1(-u)) / (c * rate)
    return total
