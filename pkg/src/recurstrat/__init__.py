"""Stratified recurrent-event intensity models for zero-truncated cohorts.

Simulate populations under history-stratified Cox-type intensities, fit the
model grid to zero-truncated data (with or without aggregate census
augmentation), and estimate variances by multiplier resampling.
"""

from .data import CensusTable, CohortDataset, DoublyCensoredDataset
from .fit_census import (
    Algorithm2Config,
    CensusFitResult,
    CensusRiskProvider,
    IdealRiskProvider,
    fit_algorithm2,
    fit_ideal,
    fit_snc_via_indicator,
)
from .fit_zt import EmConfig, ZtFitResult, em_fit, mixture_loglik, loglik_zt_known_strata
from .model import (
    ConstantBaseline,
    ModelSpec,
    ObservationWindow,
    Parameters,
    PiecewiseConstantBaseline,
    StepBaseline,
    SubjectPath,
)
from .simulate import (
    Population,
    ScenarioConfig,
    build_census,
    extract_cohort,
    extract_doubly_censored,
    scenario_preset,
    simulate_population,
)
from .variance import ResampleConfig, StudyReport, replicate_study, resample_variance

__version__ = "0.1.0"
