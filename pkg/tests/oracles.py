"""Independent oracles for the test suite.

Everything here re-derives expectations from scratch (direct Monte Carlo on
the two-stratum process, quadrature, closed forms written out longhand) and
deliberately avoids the package's own evaluation paths.
"""

from __future__ import annotations

import math

import numpy as np


def mc_truncation_in_window(rate1, window, a, n_paths, rng):
    """P(first event lands in (a, c_right] | event-free at a), by simulation."""
    c_right = window[1]
    t1 = rng.exponential(1.0 / rate1, size=n_paths)
    kept = t1 > a
    hits = t1[kept] <= c_right
    p = hits.mean()
    se = math.sqrt(p * (1 - p) / max(hits.size, 1))
    return p, se


def mc_truncation_pre_window(rate1, rate2, window, a, n_paths, rng):
    """Both-branch simulation of the cohort-selection ratio for a <= c_left."""
    c_left, c_right = window
    # numerator: event-free at a, then first event at rate1, recurrences at rate2
    t1 = a + rng.exponential(1.0 / rate1, size=n_paths)
    in_window = (t1 > c_left) & (t1 <= c_right)
    before = t1 <= c_left
    later = np.zeros(n_paths, dtype=bool)
    later[before] = rng.poisson(rate2 * (c_right - c_left), size=int(before.sum())) >= 1
    num = (in_window | later).mean()
    # denominator: an event at a moves the subject to the recurrent stratum
    den = (rng.poisson(rate2 * (c_right - c_left), size=n_paths) >= 1).mean()
    se = math.sqrt(num * (1 - num) / n_paths) / max(den, 1e-12)
    return num / den, se


def mc_posterior_first_event(rate1, rate2, c_left, c_right, a1, n_paths, rng,
                             delta=0.02):
    """P(no prior events | no window events before a1, event in [a1, a1+delta)).

    Retains simulated paths matching the observed pattern up to the first
    event and tabulates the first-ever-event indicator among them.
    """
    t1 = rng.exponential(1.0 / rate1, size=n_paths)
    # stratum-1 hypothesis realized: first ever event falls in the slot
    match_s1 = (t1 >= a1) & (t1 < a1 + delta)
    # stratum-2 hypothesis realized: first event before the window, then no
    # recurrences in (c_left, a1) and at least one in the slot
    pre = t1 <= c_left
    quiet = np.zeros(n_paths, dtype=bool)
    slot = np.zeros(n_paths, dtype=bool)
    n_pre = int(pre.sum())
    if n_pre:
        quiet[pre] = rng.poisson(rate2 * (a1 - c_left), size=n_pre) == 0
        slot[pre] = rng.poisson(rate2 * delta, size=n_pre) >= 1
    match_s2 = pre & quiet & slot
    kept = match_s1 | match_s2
    n_kept = int(kept.sum())
    if n_kept == 0:
        return math.nan, math.inf, 0
    p = match_s1[kept].mean()
    se = math.sqrt(p * (1 - p) / n_kept)
    return p, se, n_kept


def mc_marginal_event_free(rate1, a, n_paths, rng):
    """Fraction of the population still event-free at age a."""
    p = (rng.exponential(1.0 / rate1, size=n_paths) > a).mean()
    return p, math.sqrt(p * (1 - p) / n_paths)


def cohort_weight_closed_form(rate1, rate2, c_left, c_right):
    """Initial-stratum-1 probability among cohort members, by Bayes longhand."""
    p1 = math.exp(-rate1 * c_left)
    q1 = 1.0 - math.exp(-rate1 * (c_right - c_left))
    q2 = 1.0 - math.exp(-rate2 * (c_right - c_left))
    return p1 * q1 / (p1 * q1 + (1.0 - p1) * q2)


def brute_force_risk_moment(full_data, s, beta_s, age, q):
    """Literal subject-by-subject sum of the realized risk moment."""
    beta_s = np.asarray(beta_s, dtype=float)
    total = 0.0 if q == 0 else np.zeros((len(beta_s),) * q)
    for i in range(full_data.n_subjects):
        if not (full_data.c_left[i] < age <= full_data.c_right[i]):
            continue
        pre = full_data.pre_window_events[i]
        events = full_data.event_age[full_data.event_subject == i]
        first = events[0] if events.size else math.inf
        if pre > 0:
            stratum = 2
        elif age <= first:
            stratum = 1
        else:
            stratum = 2
        if stratum != s:
            continue
        z = full_data.covariates[i]
        w = math.exp(float(beta_s @ z))
        if q == 0:
            total += w
        elif q == 1:
            total = total + w * z
        else:
            total = total + w * np.outer(z, z)
    return total


def finite_difference_gradient(fun, x, rel_step=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for j in range(x.size):
        h = rel_step * max(1.0, abs(x[j]))
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (fun(x + e) - fun(x - e)) / (2.0 * h)
    return g


def finite_difference_jacobian(fun, x, rel_step=1e-6):
    """Jacobian of a vector-valued function by central differences."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fun(x))
    jac = np.zeros((f0.size, x.size))
    for j in range(x.size):
        h = rel_step * max(1.0, abs(x[j]))
        e = np.zeros_like(x)
        e[j] = h
        jac[:, j] = (np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2.0 * h)
    return jac
