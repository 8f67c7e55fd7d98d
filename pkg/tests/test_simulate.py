import math

import numpy as np
import pytest
from scipy import stats

from recurstrat.data import UNKNOWN_COUNT
from recurstrat.model import ConstantBaseline, ModelSpec, Parameters
from recurstrat.simulate import (
    build_census,
    draw_birthdates,
    draw_covariates,
    extract_cohort,
    extract_doubly_censored,
    scenario_preset,
    simulate_events,
    simulate_population,
)

# normal-CDF evaluation of the lognormal cut probabilities
P_Z2 = 0.3363368012889074
P_Z3 = 0.32927056047688075


class TestDrawCovariates:
    def test_indicator_exclusivity_and_margins(self):
        rng = np.random.default_rng(0)
        z = draw_covariates(1_000_000, rng)
        assert not np.any((z[:, 1] == 1) & (z[:, 2] == 1))
        se = 3.0 / math.sqrt(4 * 1_000_000)  # binomial SE bound at p=1/2
        assert abs(z[:, 0].mean() - 0.5) <= 3 * se * 2
        for column, p in ((1, P_Z2), (2, P_Z3)):
            se = math.sqrt(p * (1 - p) / 1_000_000)
            assert abs(z[:, column].mean() - p) <= 3 * se

    def test_determinism(self):
        a = draw_covariates(1000, np.random.default_rng(5))
        b = draw_covariates(1000, np.random.default_rng(5))
        assert np.array_equal(a, b)


class TestDrawBirthdates:
    def test_support(self):
        rng = np.random.default_rng(1)
        b = draw_birthdates(100_000, 0.0, 7.0, rng)
        assert b.min() > -18.0 and b.max() < 7.0

    def test_mean(self):
        rng = np.random.default_rng(2)
        b = draw_birthdates(100_000, 0.0, 7.0, rng)
        se = 25.0 / math.sqrt(12 * 100_000)
        assert abs(b.mean() - (-5.5)) <= 3 * se

    def test_every_window_valid(self):
        rng = np.random.default_rng(3)
        b = draw_birthdates(50_000, 0.0, 7.0, rng)
        c_left = np.maximum(0.0, -b)
        c_right = np.minimum(18.0, 7.0 - b)
        assert np.all(c_left < c_right)


class TestSimulateEvents:
    def test_null_process(self):
        spec = ModelSpec.from_code("ssc")
        truth = Parameters(beta={1: np.zeros(1), 2: np.zeros(1)},
                           baseline={1: ConstantBaseline(0.0), 2: ConstantBaseline(0.0)})
        subj, age = simulate_events(np.zeros((100, 1)), truth, spec, np.random.default_rng(0))
        assert subj.size == 0 and age.size == 0

    def test_poisson_law_without_stratification(self):
        # constant hazard, no stratum change: counts on (0, A*) are Poisson
        h, horizon, n = 0.11, 18.0, 100_000
        spec = ModelSpec.from_code("nnc")
        truth = Parameters(beta={1: np.zeros(1)}, baseline={1: ConstantBaseline(h)})
        subj, age = simulate_events(np.zeros((n, 1)), truth, spec, np.random.default_rng(4))
        counts = np.bincount(subj, minlength=n)
        mean = h * horizon
        assert abs(counts.mean() - mean) <= 3 * math.sqrt(mean / n)
        assert abs(counts.var() - mean) <= 3 * mean * math.sqrt(2.0 / n) * 1.5
        observed = np.bincount(np.minimum(counts, 8))
        expected = np.array(
            [stats.poisson.pmf(k, mean) for k in range(8)] + [stats.poisson.sf(7, mean)]
        ) * n
        chi2 = ((observed - expected[: observed.size]) ** 2 / expected[: observed.size]).sum()
        assert chi2 < stats.chi2.ppf(0.99, observed.size - 1)

    def test_event_ages_strictly_increasing_per_subject(self):
        config = scenario_preset(2, population_size=20_000, seed=8)
        population = simulate_population(config)
        order = np.lexsort((population.event_age, population.event_subject))
        subj = population.event_subject[order]
        age = population.event_age[order]
        same = subj[1:] == subj[:-1]
        assert np.all(age[1:][same] > age[:-1][same])

    def test_scenario1_cohort_fraction(self):
        config = scenario_preset(1, population_size=100_000, seed=17)
        population = simulate_population(config)
        cohort = extract_cohort(population, 0.0, 7.0)
        assert 0.06 < cohort.n_subjects / population.n < 0.08

    def test_step_baseline_rejected_for_generation(self):
        from recurstrat.model import StepBaseline

        spec = ModelSpec.from_code("ssc")
        step = StepBaseline(np.array([1.0]), np.array([0.3]))
        truth = Parameters(beta={1: np.zeros(1), 2: np.zeros(1)},
                           baseline={1: step, 2: step})
        with pytest.raises(ValueError):
            simulate_events(np.zeros((10, 1)), truth, spec, np.random.default_rng(0))


@pytest.fixture(scope="module")
def sim():
    config = scenario_preset(2, population_size=30_000, seed=21)
    population = simulate_population(config)
    return config, population


class TestExtraction:
    def test_cohort_subset_of_full(self, sim):
        config, population = sim
        cohort = extract_cohort(population, 0.0, 7.0)
        full = extract_doubly_censored(population, 0.0, 7.0)
        assert set(cohort.subject_ids) <= set(full.subject_ids)
        view = full.cohort_view()
        assert np.array_equal(view.subject_ids, cohort.subject_ids)
        assert np.array_equal(view.event_age, cohort.event_age)
        assert np.array_equal(view.c_left, cohort.c_left)

    def test_full_keeps_everyone(self, sim):
        config, population = sim
        full = extract_doubly_censored(population, 0.0, 7.0)
        assert full.n_subjects == population.n

    def test_pre_window_marking(self, sim):
        config, population = sim
        full = extract_doubly_censored(population, 0.0, 7.0)
        born_in_window = full.c_left == 0.0
        assert np.all(full.pre_window_events[born_in_window] == 0)
        assert np.all(full.pre_window_events[~born_in_window] == UNKNOWN_COUNT)
        oracle = extract_doubly_censored(population, 0.0, 7.0, oracle_strata=True)
        assert oracle.strata_known
        assert np.all(oracle.pre_window_events[born_in_window] == 0)

    def test_event_at_right_edge_kept(self):
        from recurstrat.simulate import Population, ScenarioConfig

        config = scenario_preset(1, population_size=1, seed=0)
        population = Population(
            birthdates=np.array([0.0]),
            covariates=np.zeros((1, 3)),
            event_subject=np.array([0, 0]),
            event_age=np.array([2.0, 7.0]),
            config=config,
        )
        cohort = extract_cohort(population, 0.0, 7.0)
        assert cohort.n_subjects == 1
        assert np.array_equal(cohort.event_age, [2.0, 7.0])

    def test_pre_window_events_stripped_not_counted(self):
        from recurstrat.simulate import Population

        config = scenario_preset(1, population_size=2, seed=0)
        population = Population(
            birthdates=np.array([-5.0, -5.0]),
            covariates=np.zeros((2, 3)),
            event_subject=np.array([0, 0, 1]),
            event_age=np.array([1.0, 6.0, 2.0]),  # subject 1 only pre-window
            config=config,
        )
        cohort = extract_cohort(population, 0.0, 7.0)
        assert cohort.n_subjects == 1
        assert np.array_equal(cohort.event_age, [6.0])
        assert population.pre_window_counts(0.0).tolist() == [1, 1]

    def test_zero_truncation_consistency(self, sim):
        from recurstrat.model import stratum_at

        config, population = sim
        cohort = extract_cohort(population, 0.0, 7.0)
        rng = np.random.default_rng(0)
        for i in rng.choice(cohort.n_subjects, 25, replace=False):
            path = cohort.subject_path(int(i))
            first = path.event_ages[0]
            for a in (first + 1e-9, min(first + 0.5, path.window.c_right)):
                assert stratum_at("first_event", path.event_ages, None, a,
                                  path.window.c_left) == 2


class TestCensus:
    def test_empty_population_counts(self):
        config = scenario_preset(1, population_size=1, seed=0)
        from recurstrat.simulate import Population

        population = Population(
            birthdates=np.array([20.0]),  # age-ineligible every census year
            covariates=np.zeros((1, 3)),
            event_subject=np.empty(0, dtype=np.int64),
            event_age=np.empty(0),
            config=config,
        )
        census = build_census(population, 0.0, 7.0)
        assert census.counts.sum() == 0

    def test_single_subject_floor_age(self):
        from recurstrat.simulate import Population

        config = scenario_preset(1, population_size=1, seed=0)
        population = Population(
            birthdates=np.array([-4.7]),
            covariates=np.array([[1.0, 0.0, 0.0]]),
            event_subject=np.empty(0, dtype=np.int64),
            event_age=np.empty(0),
            config=config,
        )
        census = build_census(population, 0.0, 7.0)
        year0 = np.flatnonzero(census.years == 0)[0]
        cell = census.cell_index(np.array([[1.0, 0.0, 0.0]]))[0]
        assert census.counts[year0, cell, 4] == 1

    def test_census_mass_equals_eligible_subjects(self):
        config = scenario_preset(1, population_size=20_000, seed=9)
        population = simulate_population(config)
        census = build_census(population, 0.0, 7.0)
        for yi, year in enumerate(census.years):
            ages = year - population.birthdates
            eligible = int(np.sum((ages >= 0.0) & (ages < 18.0)))
            assert census.counts[yi].sum() == eligible

    def test_yearly_totals_stable(self):
        config = scenario_preset(1, population_size=100_000, seed=13)
        population = simulate_population(config)
        census = build_census(population, 0.0, 7.0)
        totals = census.counts.sum(axis=(1, 2)).astype(float)
        assert totals.max() / totals.min() < 1.05


class TestDeterminism:
    def test_bit_identical_population_and_extracts(self):
        config = scenario_preset(3, population_size=5_000, seed=99)
        a = simulate_population(config)
        b = simulate_population(config)
        assert np.array_equal(a.birthdates, b.birthdates)
        assert np.array_equal(a.covariates, b.covariates)
        assert np.array_equal(a.event_age, b.event_age)
        ca, cb = extract_cohort(a, 0.0, 7.0), extract_cohort(b, 0.0, 7.0)
        assert np.array_equal(ca.event_age, cb.event_age)
        xa, xb = build_census(a, 0.0, 7.0), build_census(b, 0.0, 7.0)
        assert np.array_equal(xa.counts, xb.counts)
