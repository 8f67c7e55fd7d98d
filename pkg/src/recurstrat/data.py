"""Dataset containers shared by the simulator, the fitters, and the CLI.

All containers hold flat numpy arrays; event rows are sorted by subject and
age so per-event computations can run vectorized with a deterministic
reduction order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

from .model import DEFAULT_AGE_HORIZON, ObservationWindow, SubjectPath

__all__ = ["CohortDataset", "DoublyCensoredDataset", "CensusTable", "UNKNOWN_COUNT"]

#: Sentinel for an unobservable pre-window event count.
UNKNOWN_COUNT = -1


def _sorted_events(event_subject, event_age, n_subjects):
    idx = np.asarray(event_subject, dtype=np.int64)
    age = np.asarray(event_age, dtype=float)
    if idx.shape != age.shape:
        raise ValueError("event subject and age arrays must align")
    if idx.size and (idx.min() < 0 or idx.max() >= n_subjects):
        raise ValueError("event subject index out of range")
    order = np.lexsort((age, idx))
    return idx[order], age[order]


@dataclass
class _SubjectTable:
    subject_ids: np.ndarray
    c_left: np.ndarray
    c_right: np.ndarray
    covariates: np.ndarray  # (n, p)
    event_subject: np.ndarray  # indices into the subject arrays
    event_age: np.ndarray
    age_horizon: float = DEFAULT_AGE_HORIZON

    def __post_init__(self):
        self.subject_ids = np.asarray(self.subject_ids, dtype=np.int64)
        self.c_left = np.asarray(self.c_left, dtype=float)
        self.c_right = np.asarray(self.c_right, dtype=float)
        self.covariates = np.atleast_2d(np.asarray(self.covariates, dtype=float))
        n = self.subject_ids.size
        if self.covariates.shape[0] != n or self.c_left.size != n or self.c_right.size != n:
            raise ValueError("subject arrays must share length")
        if np.any(self.c_left < 0) or np.any(self.c_left >= self.c_right) or np.any(
            self.c_right > self.age_horizon + 1e-9
        ):
            raise ValueError("windows must satisfy 0 <= c_left < c_right <= horizon")
        self.event_subject, self.event_age = _sorted_events(
            self.event_subject, self.event_age, n
        )
        if self.event_age.size:
            lo = self.c_left[self.event_subject]
            hi = self.c_right[self.event_subject]
            if np.any(self.event_age <= lo) or np.any(self.event_age > hi + 1e-12):
                raise ValueError("event ages must lie in (c_left, c_right]")
        self._counts = np.bincount(self.event_subject, minlength=n).astype(np.int64)
        first = np.full(n, np.nan)
        if self.event_age.size:
            starts = np.searchsorted(self.event_subject, np.arange(n), side="left")
            has = self._counts > 0
            first[has] = self.event_age[starts[has]]
        self._first_event_age = first

    @property
    def n_subjects(self) -> int:
        return self.subject_ids.size

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def n_events(self) -> int:
        return self.event_age.size

    @property
    def event_counts(self) -> np.ndarray:
        return self._counts

    @property
    def first_event_age(self) -> np.ndarray:
        """Per-subject age of the first observed event (nan when none)."""
        return self._first_event_age

    @property
    def window_length(self) -> np.ndarray:
        return self.c_right - self.c_left

    def subject_path(self, i: int) -> SubjectPath:
        mask = self.event_subject == i
        return SubjectPath(
            window=ObservationWindow(float(self.c_left[i]), float(self.c_right[i])),
            covariates=self.covariates[i],
            event_ages=self.event_age[mask],
            subject_id=int(self.subject_ids[i]),
        )


@dataclass
class CohortDataset(_SubjectTable):
    """Zero-truncated cohort: every subject has at least one in-window event.

    Pre-window history is absent by construction; fits needing realized
    initial strata receive them as a separate oracle input.
    """

    def __post_init__(self):
        super().__post_init__()
        if np.any(self._counts == 0):
            raise ValueError("zero-truncated cohorts cannot contain event-free subjects")

    @classmethod
    def from_paths(cls, paths, age_horizon: float = DEFAULT_AGE_HORIZON) -> "CohortDataset":
        ids = np.array(
            [p.subject_id if p.subject_id is not None else k for k, p in enumerate(paths)],
            dtype=np.int64,
        )
        ev_subj = np.concatenate(
            [np.full(p.event_ages.size, k, dtype=np.int64) for k, p in enumerate(paths)]
        ) if paths else np.empty(0, dtype=np.int64)
        ev_age = np.concatenate([p.event_ages for p in paths]) if paths else np.empty(0)
        return cls(
            subject_ids=ids,
            c_left=np.array([p.window.c_left for p in paths]),
            c_right=np.array([p.window.c_right for p in paths]),
            covariates=np.array([p.covariates for p in paths]),
            event_subject=ev_subj,
            event_age=ev_age,
            age_horizon=age_horizon,
        )


@dataclass
class DoublyCensoredDataset(_SubjectTable):
    """Every eligible subject with window and covariates; events may be empty.

    ``pre_window_events`` holds the number of events before c_left, with
    :data:`UNKNOWN_COUNT` marking history that was censored away.  Simulated
    datasets can carry the realized counts as oracle information for the
    ideal benchmark fit.
    """

    pre_window_events: np.ndarray = field(default=None)

    def __post_init__(self):
        super().__post_init__()
        if self.pre_window_events is None:
            pre = np.where(self.c_left == 0.0, 0, UNKNOWN_COUNT)
        else:
            pre = np.asarray(self.pre_window_events, dtype=np.int64)
            if pre.size != self.n_subjects:
                raise ValueError("pre_window_events must align with subjects")
        self.pre_window_events = np.asarray(pre, dtype=np.int64)

    @property
    def strata_known(self) -> bool:
        return bool(np.all(self.pre_window_events != UNKNOWN_COUNT))

    def cohort_view(self) -> CohortDataset:
        """Zero-truncated restriction: subjects with in-window events only."""
        keep = self._counts > 0
        new_index = np.cumsum(keep) - 1
        mask_ev = keep[self.event_subject]
        return CohortDataset(
            subject_ids=self.subject_ids[keep],
            c_left=self.c_left[keep],
            c_right=self.c_right[keep],
            covariates=self.covariates[keep],
            event_subject=new_index[self.event_subject[mask_ev]],
            event_age=self.event_age[mask_ev],
            age_horizon=self.age_horizon,
        )


@dataclass
class CensusTable:
    """Aggregate snapshot counts by (calendar year, covariate cell, integer age)."""

    years: np.ndarray  # (n_years,)
    cells: np.ndarray  # (n_cells, p) distinct covariate rows
    counts: np.ndarray  # (n_years, n_cells, n_ages) nonnegative integers
    age_horizon: float = DEFAULT_AGE_HORIZON

    def __post_init__(self):
        self.years = np.asarray(self.years, dtype=np.int64)
        self.cells = np.atleast_2d(np.asarray(self.cells, dtype=float))
        self.counts = np.asarray(self.counts, dtype=np.int64)
        expect = (self.years.size, self.cells.shape[0], self.n_ages)
        if self.counts.shape != expect:
            raise ValueError(f"counts shape {self.counts.shape} != {expect}")
        if np.any(self.counts < 0):
            raise ValueError("census counts must be nonnegative")

    @property
    def n_ages(self) -> int:
        return int(np.ceil(self.age_horizon))

    @property
    def p(self) -> int:
        return self.cells.shape[1]

    def pooled_counts(self) -> np.ndarray:
        """Counts summed over calendar years: (n_cells, n_ages)."""
        return self.counts.sum(axis=0)

    def cell_index(self, covariates: np.ndarray) -> np.ndarray:
        """Map covariate rows to cell indices; raises on unknown cells."""
        z = np.atleast_2d(np.asarray(covariates, dtype=float))
        matches = np.all(z[:, None, :] == self.cells[None, :, :], axis=2)
        found = matches.any(axis=1)
        if not found.all():
            bad = z[~found][0]
            raise ValueError(f"covariate cell {bad.tolist()} absent from census catalog")
        return matches.argmax(axis=1)
