"""Landmark super-dataset construction and design expansion."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from ..cohortsim import LOWFREQ_BLOCK_HOURS, LOWFREQ_COLUMNS, PatientRecord
from ..errors import ConfigError, DataError

HOURS_PER_DAY = 24.0
BASE_COLUMNS = ["patient_id", "k", "t_lm", "time", "status"]


@dataclass(frozen=True)
class LandmarkGrid:
    s0: float = 48.0
    s1: float = 240.0
    n: int = 25
    w: float = 24.0

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("landmark grid needs n >= 1")
        if self.n > 1 and not self.s1 > self.s0:
            raise ConfigError("landmark grid needs s1 > s0")
        if self.w <= 0:
            raise ConfigError("prediction window w must be positive")

    @property
    def times(self) -> np.ndarray:
        if self.n == 1:
            return np.array([float(self.s0)])
        return np.linspace(self.s0, self.s1, self.n)

    @property
    def spacing(self) -> float:
        return (self.s1 - self.s0) / (self.n - 1) if self.n > 1 else 0.0

    def index_of(self, t_lm: float, tol: float = 1e-6) -> int:
        k = int(np.argmin(np.abs(self.times - t_lm)))
        if abs(self.times[k] - t_lm) > tol:
            raise ValueError(f"{t_lm} is not a landmark time of this grid")
        return k


@dataclass
class SuperDataset:
    """Stacked landmark rows; ``frame`` columns are ``BASE_COLUMNS``, optional
    ``z_cnn`` and the covariates."""

    frame: pd.DataFrame
    grid: LandmarkGrid
    covariates: list = field(default_factory=list)

    def __len__(self):
        return len(self.frame)

    def subset(self, patient_ids) -> "SuperDataset":
        keep = self.frame["patient_id"].isin(set(patient_ids))
        return SuperDataset(self.frame[keep].reset_index(drop=True), self.grid, list(self.covariates))

    def resample(self, patient_ids: Sequence[int]) -> "SuperDataset":
        """Rows of ``patient_ids`` in order, duplicates relabelled as new patients."""
        groups = {pid: g for pid, g in self.frame.groupby("patient_id", sort=False)}
        parts = []
        for new_id, pid in enumerate(patient_ids):
            g = groups[pid].copy()
            g["source_id"] = pid
            g["patient_id"] = new_id
            parts.append(g)
        frame = pd.concat(parts, ignore_index=True) if parts else self.frame.iloc[:0].copy()
        return SuperDataset(frame, self.grid, list(self.covariates))

    def risk_set_sizes(self) -> np.ndarray:
        counts = self.frame.groupby("k").size()
        return np.array([int(counts.get(k, 0)) for k in range(self.grid.n)])


def frozen_covariates(patient: PatientRecord, t_lm: float) -> np.ndarray:
    """Low-frequency covariates from the last 8-hour block completed by ``t_lm``."""
    block = int(np.floor(t_lm / LOWFREQ_BLOCK_HOURS + 1e-9)) - 1
    block = min(max(block, 0), len(patient.lowfreq) - 1)
    return patient.lowfreq[block]


def resolve_score(series, t_lm: float) -> Optional[float]:
    """Score of the window ending at the latest end time <= ``t_lm``."""
    best = None
    for t, s in series:
        if t <= t_lm + 1e-9 and (best is None or t > best[0]):
            best = (t, s)
    return None if best is None else best[1]


def build_super_dataset(
    cohort: Sequence[PatientRecord],
    scores: Optional[Mapping[int, Sequence[tuple[float, float]]]] = None,
    grid: LandmarkGrid = LandmarkGrid(),
) -> SuperDataset:
    """Stack one administratively censored dataset per landmark time.

    A patient enters landmark ``t_lm`` if still in the ICU and infection-free
    (event time > t_lm). Event time and cause are truncated at ``t_lm + w``:
    status 0 marks administrative censoring.
    """
    rows = []
    unresolved = []
    for patient in cohort:
        t_event = patient.event_time
        for k, t_lm in enumerate(grid.times):
            if t_event <= t_lm:
                break
            horizon = t_lm + grid.w
            if t_event <= horizon:
                time, status = t_event, patient.cause
            else:
                time, status = horizon, 0
            row = [patient.id, k, t_lm, time, status]
            if scores is not None:
                z = resolve_score(scores.get(patient.id, ()), t_lm)
                if z is None:
                    unresolved.append((patient.id, float(t_lm)))
                row.append(z)
            row.extend(frozen_covariates(patient, t_lm))
            rows.append(row)
    if unresolved:
        shown = ", ".join(f"({p}, {t:g})" for p, t in unresolved[:20])
        more = "" if len(unresolved) <= 20 else f" and {len(unresolved) - 20} more"
        raise DataError(f"no CNN score resolvable for (patient, t_LM): {shown}{more}")
    columns = BASE_COLUMNS + (["z_cnn"] if scores is not None else []) + list(LOWFREQ_COLUMNS)
    frame = pd.DataFrame(rows, columns=columns)
    frame = frame.astype({"patient_id": int, "k": int, "status": int})
    covs = (["z_cnn"] if scores is not None else []) + list(LOWFREQ_COLUMNS)
    return SuperDataset(frame, grid, covs)


@dataclass
class Design:
    """Covariates expanded with landmark-time interactions.

    Column ``(degree + 1) * i + d`` holds ``Z_i * t**d`` with ``t`` the
    landmark time in days. ``degree`` is 2 unless the data span fewer than
    three distinct landmarks, where higher powers would be collinear.
    """

    X: np.ndarray
    covariates: list
    column_names: list
    standardized: bool
    center: np.ndarray
    scale: np.ndarray
    time_unit_hours: float = HOURS_PER_DAY
    degree: int = 2

    def transform(self, Z: np.ndarray, t_lm) -> np.ndarray:
        Z = (np.atleast_2d(np.asarray(Z, dtype=float)) - self.center) / self.scale
        t = np.broadcast_to(np.asarray(t_lm, dtype=float), (Z.shape[0],)) / self.time_unit_hours
        powers = np.stack([t**d for d in range(self.degree + 1)], axis=1)
        return (Z[:, :, None] * powers[:, None, :]).reshape(Z.shape[0], -1)

    def triples(self, v) -> np.ndarray:
        """Per-covariate (v0, v1, v2) with absent powers filled by 0."""
        v = np.asarray(v, dtype=float).reshape(-1, self.degree + 1)
        return np.pad(v, ((0, 0), (0, 2 - self.degree)))


def expand_design(super_dataset: SuperDataset, covariates: Optional[Sequence[str]] = None, standardize: bool = False) -> Design:
    """Append ``Z * t`` and ``Z * t**2`` columns for every covariate.

    Covariates that are constant over all rows are dropped with a warning.
    """
    frame = super_dataset.frame
    covariates = list(super_dataset.covariates if covariates is None else covariates)
    missing = [c for c in covariates if c not in frame.columns]
    if missing:
        raise ConfigError(f"unknown covariates {missing}")
    kept = []
    for c in covariates:
        col = frame[c].to_numpy(float)
        if np.ptp(col) == 0:
            warnings.warn(f"covariate {c!r} is constant in the super-dataset and is excluded", stacklevel=2)
        else:
            kept.append(c)
    Z = frame[kept].to_numpy(float) if kept else np.empty((len(frame), 0))
    if standardize and kept:
        center, scale = Z.mean(axis=0), Z.std(axis=0)
    else:
        center, scale = np.zeros(len(kept)), np.ones(len(kept))
    degree = int(min(2, max(frame["t_lm"].nunique() - 1, 0)))
    names = [f"{c}{suffix}" for c in kept for suffix in ("", "*t", "*t^2")[: degree + 1]]
    design = Design(np.empty((len(frame), 0)), kept, names, standardize, center, scale, degree=degree)
    design.X = design.transform(Z, frame["t_lm"].to_numpy(float)) if kept else np.empty((len(frame), 0))
    return design
