"""Maximum likelihood for zero-truncated cohorts under constant baselines.

Per-stratum parameters are packed as alpha_s = (log lambda_0s, beta_s') with
the augmented covariate zstar = (1, z').  Two likelihoods are exposed: the
truncation-corrected log-likelihood with known initial strata, and the
mixture over the two initial-stratum hypotheses with partially known strata.
The EM fit alternates posterior membership weights with damped-Newton
maximization of the expected complete-data objective.

The key closed form: over a pre-first-event window segment the corrected
compensator integrates to

    int_x^y theta / (1 - exp(-theta (cr - a))) da
        = log(exp(theta (cr - x)) - 1) - log(exp(theta (cr - y)) - 1),

and combining it with the corrected first-event term cancels the
singularity at y = cr, leaving per-subject contributions that stay finite
for events at the window edge.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._numeric import (
    FitError,
    damped_newton_maximize,
    logsumexp_pair,
    numerical_hessian,
    rate_over_1m_exp,
    rate_over_expm1,
)
from .data import CohortDataset
from .model import ModelSpec, log1mexp, log_expm1

__all__ = [
    "EmConfig",
    "ZtFitResult",
    "loglik_zt_known_strata",
    "mixture_loglik",
    "em_fit",
    "zt_information",
    "fit_naive_poisson",
    "FitError",
]


@dataclass(frozen=True)
class EmConfig:
    """EM controls: relative-L1 stopping per stratum, iteration caps."""

    tolerance: float = 1e-6
    max_iterations: int = 500
    initial_alpha: Optional[dict] = None
    newton_grad_tol: float = 1e-9
    newton_max_iter: int = 200

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")


@dataclass
class ZtFitResult:
    alpha: dict  # stratum -> (p+1,) vector
    lambda0: dict
    beta: dict
    loglik: float
    loglik_trace: list
    converged: bool
    iterations: int
    covariance: Optional[np.ndarray]
    covariance_pd: bool
    free_layout: list  # (stratum, component) per free coordinate
    model_code: str
    grad_norm: float


# ---------------------------------------------------------------------------
# Per-cohort precomputation
# ---------------------------------------------------------------------------


class _ZtWork:
    """Flattened per-subject quantities reused across likelihood calls."""

    def __init__(self, cohort: CohortDataset):
        self.n = cohort.n_subjects
        self.zstar = np.column_stack([np.ones(self.n), cohort.covariates])
        self.m = cohort.event_counts.astype(float)
        self.a1 = cohort.first_event_age
        self.cl = cohort.c_left
        self.cr = cohort.c_right
        self.delta = self.cr - self.cl
        self.r1 = self.cr - self.a1  # window remaining after the first event
        self.gap = self.a1 - self.cl
        self.left_open = self.cl > 0.0  # pre-window history exists

    def linpred(self, alpha_s):
        return self.zstar @ alpha_s


def _alpha_pair(alpha: dict, work: _ZtWork):
    eta1 = work.linpred(np.asarray(alpha[1], dtype=float))
    eta2 = work.linpred(np.asarray(alpha[2], dtype=float)) if 2 in alpha else eta1
    return eta1, eta2


def _known_strata_terms(work: _ZtWork, eta1, eta2, initial_strata):
    """Per-subject corrected log-likelihood given the stratum at c_left."""
    s0 = np.asarray(initial_strata)
    theta1 = np.exp(eta1)
    theta2 = np.exp(eta2)
    is1 = s0 == 1
    # initial stratum 1: corrected first-event segment under stratum 1
    l1 = eta1 + theta1 * work.r1 - log_expm1(theta1 * work.delta) \
        + (work.m - 1.0) * eta2 - theta2 * work.r1
    # initial stratum 2: corrected segment under stratum 2; the plain tail
    # cancels against the corrected compensator's upper piece
    l2 = work.m * eta2 - log_expm1(theta2 * work.delta)
    return np.where(is1, l1, l2)


def loglik_zt_known_strata(alpha: dict, cohort: CohortDataset, initial_strata) -> float:
    """Truncation-corrected log-likelihood with known strata at c_left.

    ``initial_strata`` holds 1 or 2 per subject.  Constant baselines only.
    """
    work = _ZtWork(cohort)
    s0 = np.asarray(initial_strata)
    if s0.shape != (work.n,) or not np.all(np.isin(s0, (1, 2))):
        raise ValueError("initial_strata must assign stratum 1 or 2 to every subject")
    eta1, eta2 = _alpha_pair(alpha, work)
    return float(np.sum(_known_strata_terms(work, eta1, eta2, s0)))


def _mixture_parts(work: _ZtWork, eta1, eta2):
    """Log pattern densities and initial-stratum log-probabilities."""
    theta1 = np.exp(eta1)
    theta2 = np.exp(eta2)
    log_f1 = eta1 - theta1 * work.gap + (work.m - 1.0) * eta2 - theta2 * work.r1
    log_f2 = work.m * eta2 - theta2 * work.delta
    u_cl = theta1 * work.cl
    log_p1 = -u_cl
    with np.errstate(divide="ignore"):
        log_p2 = np.where(work.left_open, log1mexp(np.maximum(u_cl, 1e-300)), -np.inf)
    return log_f1, log_f2, log_p1, log_p2, theta1, theta2


def mixture_loglik(alpha: dict, cohort: CohortDataset) -> float:
    """Observed-data log-likelihood with partially known strata.

    Each subject mixes the two initial-stratum hypotheses weighted by their
    cohort-conditional probabilities; subjects observed from birth carry the
    stratum-1 branch alone.  Assembled in the raw parameterization
    log(p1 f1 + p2 f2) - log(p1 q1 + p2 q2), which equals the corrected
    per-stratum likelihoods mixed by the adjusted weights.
    """
    work = _ZtWork(cohort)
    eta1, eta2 = _alpha_pair(alpha, work)
    log_f1, log_f2, log_p1, log_p2, theta1, theta2 = _mixture_parts(work, eta1, eta2)
    log_q1 = log1mexp(theta1 * work.delta)
    log_q2 = log1mexp(theta2 * work.delta)
    num = logsumexp_pair(log_p1 + log_f1, log_p2 + log_f2)
    den = logsumexp_pair(log_p1 + log_q1, log_p2 + log_q2)
    return float(np.sum(num - den))


# ---------------------------------------------------------------------------
# Free-parameter layouts for the constant-baseline model grid
# ---------------------------------------------------------------------------


def _share_layout(spec: ModelSpec, p: int):
    """Index map free-vector -> per-stratum alpha for the four constant cells."""
    if spec.baseline_time_varying:
        raise ValueError("zero-truncated likelihood fits need a constant baseline")
    if spec.scheme == "none" or (not spec.baseline_stratified and not spec.coefficients_stratified):
        idx = {1: np.arange(p + 1), 2: np.arange(p + 1)}
        layout = [("shared", k) for k in range(p + 1)]
    elif spec.baseline_stratified and spec.coefficients_stratified:
        idx = {1: np.arange(p + 1), 2: np.arange(p + 1, 2 * (p + 1))}
        layout = [(1, k) for k in range(p + 1)] + [(2, k) for k in range(p + 1)]
    elif spec.baseline_stratified:
        # two intercepts, shared slopes
        idx = {
            1: np.concatenate([[0], np.arange(2, p + 2)]),
            2: np.concatenate([[1], np.arange(2, p + 2)]),
        }
        layout = [(1, 0), (2, 0)] + [("shared", k + 1) for k in range(p)]
    else:
        # shared intercept, two slope blocks
        idx = {
            1: np.concatenate([[0], np.arange(1, p + 1)]),
            2: np.concatenate([[0], np.arange(p + 1, 2 * p + 1)]),
        }
        layout = [("shared", 0)] + [(1, k + 1) for k in range(p)] + [(2, k + 1) for k in range(p)]
    size = max(int(v.max()) for v in idx.values()) + 1
    return idx, layout, size


def _unpack(phi, idx):
    return {1: phi[idx[1]], 2: phi[idx[2]]}


def _accumulate(g_phi, idx, g_alpha1, g_alpha2):
    np.add.at(g_phi, idx[1], g_alpha1)
    np.add.at(g_phi, idx[2], g_alpha2)


# ---------------------------------------------------------------------------
# Objectives with analytic gradients
# ---------------------------------------------------------------------------


def _known_value_grad(phi, work: _ZtWork, idx, s0):
    with np.errstate(over="ignore", invalid="ignore"):
        return _known_value_grad_impl(phi, work, idx, s0)


def _known_value_grad_impl(phi, work: _ZtWork, idx, s0):
    alpha = _unpack(phi, idx)
    eta1 = work.linpred(alpha[1])
    eta2 = work.linpred(alpha[2])
    theta1, theta2 = np.exp(eta1), np.exp(eta2)
    is1 = (s0 == 1).astype(float)
    u1 = theta1 * work.delta
    u2 = theta2 * work.delta
    value = float(np.sum(_known_strata_terms(work, eta1, eta2, s0)))
    d_eta1 = is1 * (1.0 + theta1 * work.r1 - rate_over_1m_exp(u1))
    d_eta2 = is1 * ((work.m - 1.0) - theta2 * work.r1) \
        + (1.0 - is1) * (work.m - rate_over_1m_exp(u2))
    g_phi = np.zeros_like(phi)
    _accumulate(g_phi, idx, work.zstar.T @ d_eta1, work.zstar.T @ d_eta2)
    return value, g_phi


def _mstep_value_grad(phi, work: _ZtWork, idx, pi1):
    with np.errstate(over="ignore", invalid="ignore"):
        return _mstep_value_grad_impl(phi, work, idx, pi1)


def _mstep_value_grad_impl(phi, work: _ZtWork, idx, pi1):
    """Expected complete-data objective for fixed membership weights pi1."""
    alpha = _unpack(phi, idx)
    eta1 = work.linpred(alpha[1])
    eta2 = work.linpred(alpha[2])
    log_f1, log_f2, log_p1, log_p2, theta1, theta2 = _mixture_parts(work, eta1, eta2)
    pi2 = 1.0 - pi1
    u1 = theta1 * work.delta
    u2 = theta2 * work.delta
    u_cl = theta1 * work.cl
    log_q1 = log1mexp(u1)
    log_q2 = log1mexp(u2)
    lse_d = logsumexp_pair(log_p1 + log_q1, log_p2 + log_q2)
    w1 = np.exp(log_p1 + log_q1 - lse_d)
    w2 = 1.0 - w1
    # subjects observed from birth carry no stratum-2 branch; mask the -inf
    safe_lp2 = np.where(work.left_open, log_p2, 0.0)
    value = float(np.sum(pi1 * (log_p1 + log_f1) + pi2 * (safe_lp2 + log_f2) - lse_d))
    d_logp1 = -u_cl
    d_logp2 = np.where(work.left_open, rate_over_expm1(np.maximum(u_cl, 1e-300)), 0.0)
    d_logq1 = rate_over_expm1(u1)
    d_logq2 = rate_over_expm1(u2)
    d_logf1_e1 = 1.0 - theta1 * work.gap
    d_logf1_e2 = (work.m - 1.0) - theta2 * work.r1
    d_logf2_e2 = work.m - u2
    d_eta1 = pi1 * (d_logp1 + d_logf1_e1) + pi2 * d_logp2 \
        - (w1 * (d_logp1 + d_logq1) + w2 * d_logp2)
    d_eta2 = pi1 * d_logf1_e2 + pi2 * d_logf2_e2 - w2 * d_logq2
    g_phi = np.zeros_like(phi)
    _accumulate(g_phi, idx, work.zstar.T @ d_eta1, work.zstar.T @ d_eta2)
    return value, g_phi


def _posterior_weights(work: _ZtWork, eta1, eta2):
    """E-step: probability the subject started in stratum 1, given its path."""
    log_f1, log_f2, log_p1, log_p2, _, _ = _mixture_parts(work, eta1, eta2)
    lc1 = log_p1 + log_f1
    lc2 = log_p2 + log_f2
    with np.errstate(over="ignore"):
        pi1 = 1.0 / (1.0 + np.exp(np.clip(lc2 - lc1, -745.0, 709.0)))
    return np.where(work.left_open, pi1, 1.0)


# ---------------------------------------------------------------------------
# Fits
# ---------------------------------------------------------------------------


def fit_naive_poisson(cohort: CohortDataset):
    """Poisson fit that ignores the cohort-selection truncation.

    Diagnostic only: on zero-truncated data the rate estimate is biased
    upward because event-free subjects are missing from the denominator.
    """
    work = _ZtWork(cohort)

    def value_grad(phi):
        eta = work.linpred(phi)
        theta = np.exp(eta)
        value = float(np.sum(work.m * eta - theta * work.delta))
        grad = work.zstar.T @ (work.m - theta * work.delta)
        return value, grad

    phi0 = np.zeros(work.zstar.shape[1])
    phi0[0] = np.log(work.m.sum() / work.delta.sum())
    phi, value, grad, trace, n_iter, conv = damped_newton_maximize(
        value_grad, phi0, context="naive poisson fit"
    )
    return {"alpha": phi, "lambda0": float(np.exp(phi[0])), "beta": phi[1:],
            "loglik": value, "converged": conv}


def _naive_zt_alpha(work: _ZtWork):
    """Shared starting point: single-stratum zero-truncated Poisson fit."""

    def value_grad(phi):
        eta = work.linpred(phi)
        theta = np.exp(eta)
        u = theta * work.delta
        value = float(np.sum(work.m * eta - log_expm1(u)))
        grad = work.zstar.T @ (work.m - rate_over_1m_exp(u))
        return value, grad

    phi0 = np.zeros(work.zstar.shape[1])
    phi0[0] = np.log(work.m.sum() / work.delta.sum())
    phi, *_ = damped_newton_maximize(value_grad, phi0, context="zero-truncated init fit")
    return phi


def em_fit(cohort: CohortDataset, spec: ModelSpec, config: EmConfig = EmConfig(),
           initial_strata=None) -> ZtFitResult:
    """Fit alpha on a zero-truncated cohort, with no outside information.

    With ``initial_strata`` supplied the corrected log-likelihood is
    maximized directly.  Otherwise EM alternates posterior membership
    weights with maximization of the expected complete-data objective,
    stopping when every stratum's relative L1 parameter change drops below
    the tolerance.
    """
    if cohort.n_subjects == 0:
        raise ValueError("cannot fit an empty cohort")
    work = _ZtWork(cohort)
    idx, layout, size = _share_layout(spec, cohort.p)

    if config.initial_alpha is not None:
        phi0 = np.zeros(size)
        for s in (1, 2):
            phi0[idx[s]] = np.asarray(config.initial_alpha[s], dtype=float)
    else:
        phi0 = np.zeros(size)
        naive = _naive_zt_alpha(work)
        for s in (1, 2):
            phi0[idx[s]] = naive

    if initial_strata is not None:
        s0 = np.asarray(initial_strata)
        phi, value, grad, trace, n_iter, conv = damped_newton_maximize(
            lambda v: _known_value_grad(v, work, idx, s0),
            phi0,
            grad_tol=config.newton_grad_tol,
            max_iter=config.newton_max_iter,
            context="known-strata fit",
        )
        return _finish(cohort, spec, idx, layout, phi, trace, n_iter, conv,
                       float(np.max(np.abs(grad))),
                       loglik_fun=lambda a: loglik_zt_known_strata(a, cohort, s0))

    phi = phi0.copy()
    trace = [mixture_loglik(_unpack(phi, idx), cohort)]
    converged = False
    iteration = 0
    for iteration in range(1, config.max_iterations + 1):
        alpha = _unpack(phi, idx)
        eta1, eta2 = work.linpred(alpha[1]), work.linpred(alpha[2])
        pi1 = _posterior_weights(work, eta1, eta2)
        try:
            phi_new, *_ = damped_newton_maximize(
                lambda v: _mstep_value_grad(v, work, idx, pi1),
                phi,
                grad_tol=config.newton_grad_tol,
                max_iter=config.newton_max_iter,
                context=f"EM M-step (iteration {iteration})",
            )
        except FitError as err:
            raise FitError(f"{err}; strata layout {layout}") from err
        rel = _relative_change(_unpack(phi_new, idx), _unpack(phi, idx))
        phi = phi_new
        trace.append(mixture_loglik(_unpack(phi, idx), cohort))
        if rel <= config.tolerance:
            converged = True
            break
    value, grad = _mstep_value_grad(
        phi, work, idx, _posterior_weights(work, *(_alpha_pair(_unpack(phi, idx), work)))
    )
    return _finish(cohort, spec, idx, layout, phi, trace, iteration, converged,
                   float(np.max(np.abs(grad))),
                   loglik_fun=lambda a: mixture_loglik(a, cohort))


def _relative_change(new: dict, old: dict) -> float:
    worst = 0.0
    for s in (1, 2):
        denom = np.sum(np.abs(old[s]))
        num = np.sum(np.abs(new[s] - old[s]))
        worst = max(worst, num / denom if denom > 0 else (0.0 if num == 0 else np.inf))
    return worst


def _finish(cohort, spec, idx, layout, phi, trace, n_iter, converged, grad_norm,
            loglik_fun) -> ZtFitResult:
    alpha = {s: np.array(v) for s, v in _unpack(phi, idx).items()}
    cov, cov_pd = zt_information_free(loglik_fun, phi, idx)
    return ZtFitResult(
        alpha=alpha,
        lambda0={s: float(np.exp(a[0])) for s, a in alpha.items()},
        beta={s: a[1:].copy() for s, a in alpha.items()},
        loglik=float(trace[-1]),
        loglik_trace=[float(v) for v in trace],
        converged=bool(converged),
        iterations=int(n_iter),
        covariance=cov,
        covariance_pd=cov_pd,
        free_layout=layout,
        model_code=spec.code,
        grad_norm=grad_norm,
    )


def zt_information_free(loglik_fun, phi, idx):
    """Inverse negative numerical Hessian over the free parameterization."""
    hess = numerical_hessian(lambda v: loglik_fun(_unpack(v, idx)), phi)
    info = -hess
    try:
        eigvals = np.linalg.eigvalsh(info)
        if np.any(eigvals <= 0):
            return None, False
        return np.linalg.inv(info), True
    except np.linalg.LinAlgError:
        return None, False


def zt_information(alpha: dict, cohort: CohortDataset, loglik_fun=None):
    """Covariance of the stacked (alpha_1, alpha_2) vector at a fitted point.

    Central finite differences of the mixture log-likelihood by default;
    a non-positive-definite information matrix is flagged rather than fatal.
    """
    if loglik_fun is None:
        loglik_fun = lambda a: mixture_loglik(a, cohort)
    p1 = np.asarray(alpha[1], dtype=float).size
    phi = np.concatenate([np.asarray(alpha[1], dtype=float),
                          np.asarray(alpha[2], dtype=float)])
    idx = {1: np.arange(p1), 2: np.arange(p1, 2 * p1)}
    return zt_information_free(loglik_fun, phi, idx)
