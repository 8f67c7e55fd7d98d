"""CSV and JSON formats for datasets, fits, and study reports.

Fixed column orders, ages written with 12 significant digits, and strict
ingestion: schema violations report line numbers, and duplicated event ages
are rejected outright rather than jittered.
"""

from __future__ import annotations

import json
import os
import tempfile
from typing import Optional

import numpy as np

from .data import UNKNOWN_COUNT, CensusTable, CohortDataset, DoublyCensoredDataset
from .model import (
    ConstantBaseline,
    ModelSpec,
    Parameters,
    PiecewiseConstantBaseline,
    StepBaseline,
)
from .simulate import ScenarioConfig

__all__ = [
    "DataFormatError",
    "write_subjects_csv",
    "write_events_csv",
    "write_census_csv",
    "read_dataset",
    "read_census_csv",
    "write_scenario_json",
    "read_scenario_json",
    "fit_result_to_dict",
    "write_json",
    "write_baseline_csv",
    "atomic_write",
]


class DataFormatError(ValueError):
    """Schema violation in an input file; message carries the line number."""


def _fmt(x: float) -> str:
    return f"{x:.12g}"


def atomic_write(path: str, content: str) -> None:
    """Write via a temp file so failed runs never leave partial output."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_subjects_csv(path: str, data, include_pre_window: bool = False) -> None:
    p = data.p
    header = ["subject_id", "c_left", "c_right"] + [f"z{j + 1}" for j in range(p)]
    if include_pre_window:
        header.append("pre_window_events")
    lines = [",".join(header)]
    pre = getattr(data, "pre_window_events", None)
    for i in range(data.n_subjects):
        row = [str(int(data.subject_ids[i])), _fmt(data.c_left[i]), _fmt(data.c_right[i])]
        row += [_fmt(v) for v in data.covariates[i]]
        if include_pre_window:
            value = int(pre[i]) if pre is not None else UNKNOWN_COUNT
            row.append("" if value == UNKNOWN_COUNT else str(value))
        lines.append(",".join(row))
    atomic_write(path, "\n".join(lines) + "\n")


def write_events_csv(path: str, data) -> None:
    lines = ["subject_id,event_age"]
    for s, a in zip(data.event_subject, data.event_age):
        lines.append(f"{int(data.subject_ids[s])},{_fmt(a)}")
    atomic_write(path, "\n".join(lines) + "\n")


def write_census_csv(path: str, census: CensusTable) -> None:
    p = census.p
    header = ["year"] + [f"z{j + 1}" for j in range(p)] + ["age", "count"]
    lines = [",".join(header)]
    for yi, year in enumerate(census.years):
        for c in range(census.cells.shape[0]):
            for age in range(census.n_ages):
                count = census.counts[yi, c, age]
                if count == 0:
                    continue
                row = [str(int(year))] + [_fmt(v) for v in census.cells[c]]
                row += [str(age), str(int(count))]
                lines.append(",".join(row))
    atomic_write(path, "\n".join(lines) + "\n")


def _read_rows(path: str, expected_header, allow_extra: Optional[str] = None):
    with open(path) as handle:
        lines = [line.rstrip("\n") for line in handle]
    if not lines:
        raise DataFormatError(f"{path}: empty file")
    header = lines[0].split(",")
    base = list(expected_header)
    has_extra = False
    if header == base:
        pass
    elif allow_extra is not None and header == base + [allow_extra]:
        has_extra = True
    elif allow_extra is not None and len(header) > len(base) and header[: len(base)] == base:
        raise DataFormatError(
            f"{path}:1: unexpected trailing columns {header[len(base):]}"
        )
    else:
        raise DataFormatError(f"{path}:1: header must be {','.join(base)}"
                              + (f"[,{allow_extra}]" if allow_extra else "")
                              + f", got {lines[0]!r}")
    rows = []
    for number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != len(header):
            raise DataFormatError(
                f"{path}:{number}: expected {len(header)} fields, got {len(fields)}"
            )
        rows.append((number, fields))
    return rows, has_extra


def _parse_float(path, number, name, text):
    try:
        return float(text)
    except ValueError:
        raise DataFormatError(f"{path}:{number}: {name} is not a number: {text!r}")


def _parse_int(path, number, name, text):
    try:
        return int(text)
    except ValueError:
        raise DataFormatError(f"{path}:{number}: {name} is not an integer: {text!r}")


def read_dataset(subjects_path: str, events_path: str, p: Optional[int] = None,
                 kind: str = "auto", age_horizon: float = 18.0):
    """Load a cohort or doubly-censored dataset from the CSV pair.

    ``kind`` is "cohort", "full", or "auto" (full when any subject has no
    events or a pre_window_events column is present).
    """
    with open(subjects_path) as handle:
        header = handle.readline().rstrip("\n").split(",")
    if header[:3] != ["subject_id", "c_left", "c_right"]:
        raise DataFormatError(
            f"{subjects_path}:1: header must start subject_id,c_left,c_right"
        )
    z_cols = [h for h in header[3:] if h != "pre_window_events"]
    if p is not None and len(z_cols) != p:
        raise DataFormatError(f"{subjects_path}:1: expected {p} covariate columns")
    p = len(z_cols)
    expected = ["subject_id", "c_left", "c_right"] + [f"z{j + 1}" for j in range(p)]
    rows, has_pre = _read_rows(subjects_path, expected, allow_extra="pre_window_events")
    ids, cl, cr, zs, pre = [], [], [], [], []
    seen = set()
    for number, fields in rows:
        sid = _parse_int(subjects_path, number, "subject_id", fields[0])
        if sid in seen:
            raise DataFormatError(f"{subjects_path}:{number}: duplicate subject_id {sid}")
        seen.add(sid)
        ids.append(sid)
        left = _parse_float(subjects_path, number, "c_left", fields[1])
        right = _parse_float(subjects_path, number, "c_right", fields[2])
        if not (0.0 <= left < right <= age_horizon + 1e-9):
            raise DataFormatError(
                f"{subjects_path}:{number}: window ({left}, {right}] invalid"
            )
        cl.append(left)
        cr.append(right)
        zs.append([_parse_float(subjects_path, number, "covariate", v)
                   for v in fields[3:3 + p]])
        if has_pre:
            text = fields[3 + p]
            pre.append(UNKNOWN_COUNT if text == "" else
                       _parse_int(subjects_path, number, "pre_window_events", text))
    index_of = {sid: k for k, sid in enumerate(ids)}

    ev_rows, _ = _read_rows(events_path, ["subject_id", "event_age"])
    ev_s, ev_a = [], []
    seen_pairs = {}
    seen_ages = {}
    for number, fields in ev_rows:
        sid = _parse_int(events_path, number, "subject_id", fields[0])
        if sid not in index_of:
            raise DataFormatError(f"{events_path}:{number}: unknown subject_id {sid}")
        age = _parse_float(events_path, number, "event_age", fields[1])
        key = (sid, age)
        if key in seen_pairs:
            raise DataFormatError(
                f"{events_path}:{number}: duplicate event age {age:.12g} for subject "
                f"{sid} (first at line {seen_pairs[key]}); tied ages are rejected, "
                "not jittered"
            )
        if age in seen_ages:
            raise DataFormatError(
                f"{events_path}:{number}: event age {age:.12g} duplicates line "
                f"{seen_ages[age]} (ties across subjects are rejected)"
            )
        seen_pairs[key] = number
        seen_ages[age] = number
        i = index_of[sid]
        if not (cl[i] < age <= cr[i] + 1e-12):
            raise DataFormatError(
                f"{events_path}:{number}: event age {age:.12g} outside window "
                f"({cl[i]:.12g}, {cr[i]:.12g}] of subject {sid}"
            )
        ev_s.append(i)
        ev_a.append(age)

    counts = np.bincount(np.asarray(ev_s, dtype=int), minlength=len(ids))
    if kind == "auto":
        kind = "full" if has_pre or np.any(counts == 0) else "cohort"
    common = dict(
        subject_ids=np.asarray(ids, dtype=np.int64),
        c_left=np.asarray(cl),
        c_right=np.asarray(cr),
        covariates=np.asarray(zs),
        event_subject=np.asarray(ev_s, dtype=np.int64),
        event_age=np.asarray(ev_a),
        age_horizon=age_horizon,
    )
    if kind == "cohort":
        if np.any(counts == 0):
            bad = int(np.asarray(ids)[counts == 0][0])
            raise DataFormatError(
                f"{subjects_path}: subject {bad} has no events; a zero-truncated "
                "cohort cannot contain event-free subjects"
            )
        return CohortDataset(**common)
    return DoublyCensoredDataset(
        pre_window_events=np.asarray(pre, dtype=np.int64) if has_pre else None, **common
    )


def read_census_csv(path: str, p: int, age_horizon: float = 18.0) -> CensusTable:
    expected = ["year"] + [f"z{j + 1}" for j in range(p)] + ["age", "count"]
    rows, _ = _read_rows(path, expected)
    n_ages = int(np.ceil(age_horizon))
    records = []
    for number, fields in rows:
        year = _parse_int(path, number, "year", fields[0])
        z = tuple(_parse_float(path, number, "covariate", v) for v in fields[1:1 + p])
        age = _parse_int(path, number, "age", fields[1 + p])
        count = _parse_int(path, number, "count", fields[2 + p])
        if not (0 <= age < n_ages):
            raise DataFormatError(f"{path}:{number}: age {age} outside [0, {n_ages})")
        if count < 0:
            raise DataFormatError(f"{path}:{number}: negative count {count}")
        records.append((year, z, age, count))
    years = sorted({r[0] for r in records})
    cells = sorted({r[1] for r in records})
    year_of = {y: i for i, y in enumerate(years)}
    cell_of = {z: i for i, z in enumerate(cells)}
    counts = np.zeros((len(years), len(cells), n_ages), dtype=np.int64)
    for year, z, age, count in records:
        counts[year_of[year], cell_of[z], age] += count
    return CensusTable(
        years=np.asarray(years, dtype=np.int64),
        cells=np.asarray(cells, dtype=float),
        counts=counts,
        age_horizon=age_horizon,
    )


# ---------------------------------------------------------------------------
# Scenario and fit serialization
# ---------------------------------------------------------------------------


def _baseline_to_dict(base) -> dict:
    if isinstance(base, ConstantBaseline):
        return {"kind": "constant", "rate": base.rate}
    if isinstance(base, PiecewiseConstantBaseline):
        return {"kind": "piecewise", "breakpoints": base.breakpoints.tolist(),
                "rates": base.rates.tolist()}
    return {"kind": "step", "jump_ages": base.jump_ages.tolist(),
            "increments": base.increments.tolist()}


def _baseline_from_dict(d: dict):
    kind = d["kind"]
    if kind == "constant":
        return ConstantBaseline(d["rate"])
    if kind == "piecewise":
        return PiecewiseConstantBaseline(np.asarray(d["breakpoints"]),
                                         np.asarray(d["rates"]))
    if kind == "step":
        return StepBaseline(np.asarray(d["jump_ages"]), np.asarray(d["increments"]))
    raise DataFormatError(f"unknown baseline kind {kind!r}")


def write_scenario_json(path: str, config: ScenarioConfig) -> None:
    doc = {
        "name": config.name,
        "population_size": config.population_size,
        "window": list(config.window),
        "seed": config.seed,
        "model": {
            "baseline_stratified": config.spec.baseline_stratified,
            "coefficients_stratified": config.spec.coefficients_stratified,
            "baseline_time_varying": config.spec.baseline_time_varying,
            "scheme": config.spec.scheme,
            "age_horizon": config.spec.age_horizon,
        },
        "parameters": {
            "beta": {str(s): v.tolist() for s, v in config.truth.beta.items()},
            "baseline": {str(s): _baseline_to_dict(b)
                         for s, b in config.truth.baseline.items()},
        },
    }
    atomic_write(path, json.dumps(doc, indent=2) + "\n")


def read_scenario_json(path: str) -> ScenarioConfig:
    with open(path) as handle:
        doc = json.load(handle)
    spec = ModelSpec(**doc["model"])
    truth = Parameters(
        beta={int(s): np.asarray(v, dtype=float)
              for s, v in doc["parameters"]["beta"].items()},
        baseline={int(s): _baseline_from_dict(b)
                  for s, b in doc["parameters"]["baseline"].items()},
    )
    return ScenarioConfig(
        population_size=doc["population_size"],
        window=tuple(doc["window"]),
        spec=spec,
        truth=truth,
        seed=doc["seed"],
        name=doc.get("name", "custom"),
    )


def fit_result_to_dict(result, approach: str) -> dict:
    doc = {
        "approach": approach,
        "model": result.model_code,
        "converged": bool(result.converged),
    }
    if hasattr(result, "status"):  # census-style result
        doc.update(
            status=result.status,
            iterations=result.outer_iterations,
            beta={str(s): np.asarray(v).tolist() for s, v in result.beta.items()},
            lambda0={str(s): v for s, v in result.lambda0.items()},
            score_norm={str(s): v for s, v in result.score_norm.items()},
            jacobian_min_eig=result.jacobian_min_eig,
            baseline={str(s): _baseline_to_dict(b) for s, b in result.baseline.items()},
        )
        if result.beta_covariance is not None:
            doc["beta_covariance"] = {
                str(s): (None if c is None else np.asarray(c).tolist())
                for s, c in result.beta_covariance.items()
            }
    else:  # zero-truncated likelihood result
        doc.update(
            iterations=result.iterations,
            alpha={str(s): np.asarray(v).tolist() for s, v in result.alpha.items()},
            lambda0={str(s): v for s, v in result.lambda0.items()},
            beta={str(s): np.asarray(v).tolist() for s, v in result.beta.items()},
            loglik=result.loglik,
            covariance=(None if result.covariance is None
                        else np.asarray(result.covariance).tolist()),
            covariance_pd=result.covariance_pd,
        )
    return doc


def write_json(path: str, doc: dict) -> None:
    atomic_write(path, json.dumps(doc, indent=2) + "\n")


def write_baseline_csv(path: str, baselines: dict, age_horizon: float,
                       step: float = 0.1) -> None:
    grid = np.arange(0.0, age_horizon + 1e-9, step)
    lines = ["stratum,age,cumulative_baseline"]
    for s in sorted(baselines):
        cum = np.asarray(baselines[s].cumulative_at(grid))
        for a, v in zip(grid, cum):
            lines.append(f"{s},{_fmt(a)},{_fmt(v)}")
    atomic_write(path, "\n".join(lines) + "\n")
