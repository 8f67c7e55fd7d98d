import numpy as np
import pytest

from recurstrat.model import ConstantBaseline, ModelSpec, Parameters
from recurstrat.simulate import (
    build_census,
    extract_cohort,
    extract_doubly_censored,
    scenario_preset,
    simulate_population,
)


def make_params(rate1, rate2, beta1, beta2):
    return Parameters(
        beta={1: np.atleast_1d(beta1), 2: np.atleast_1d(beta2)},
        baseline={1: ConstantBaseline(rate1), 2: ConstantBaseline(rate2)},
    )


@pytest.fixture(scope="session")
def ssc_spec():
    return ModelSpec.from_code("ssc")


@pytest.fixture(scope="session")
def scenario1_small():
    """One modest scenario-1 draw shared across tests."""
    config = scenario_preset(1, population_size=30_000, seed=2024)
    population = simulate_population(config)
    w_left, w_right = config.window
    return {
        "config": config,
        "population": population,
        "cohort": extract_cohort(population, w_left, w_right),
        "census": build_census(population, w_left, w_right),
        "full": extract_doubly_censored(population, w_left, w_right, oracle_strata=True),
    }


def random_cohort(rng, n_subjects=40, p=2, horizon=18.0):
    """Small synthetic zero-truncated cohort with valid windows and events."""
    from recurstrat.data import CohortDataset

    c_left = rng.uniform(0.0, 8.0, n_subjects) * (rng.random(n_subjects) < 0.7)
    c_right = c_left + rng.uniform(1.0, 6.0, n_subjects)
    c_right = np.minimum(c_right, horizon)
    z = (rng.random((n_subjects, p)) < 0.5).astype(float)
    ev_s, ev_a = [], []
    for i in range(n_subjects):
        m = 1 + rng.poisson(0.8)
        ages = np.sort(rng.uniform(c_left[i], c_right[i], m))
        ages = np.unique(ages)
        ages = ages[ages > c_left[i]]
        if ages.size == 0:
            ages = np.array([0.5 * (c_left[i] + c_right[i])])
        ev_s.extend([i] * ages.size)
        ev_a.extend(ages.tolist())
    return CohortDataset(
        subject_ids=np.arange(n_subjects),
        c_left=c_left,
        c_right=c_right,
        covariates=z,
        event_subject=np.asarray(ev_s, dtype=np.int64),
        event_age=np.asarray(ev_a),
        age_horizon=horizon,
    )
