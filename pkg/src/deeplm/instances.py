"""Time-series instance extraction: windows, labels, LOCF, rescaling and PAA."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .cohortsim import CHANNELS, PatientRecord
from .errors import (
    ConfigError,
    DataConsistencyError,
    EmptyClassError,
    EmptyInputError,
    ScalerError,
)

N_VITALS = len(CHANNELS)
N_ROWS = N_VITALS + 1  # vitals + missingness indicator
DEFAULT_SHIFTS = (0.0, 8.0, 16.0)
_EPS = 1e-9


@dataclass(frozen=True)
class Interval:
    start: float
    end: float
    shift_family: float = 0.0

    @property
    def width(self) -> float:
        return self.end - self.start


@dataclass
class TimeSeriesInstance:
    patient_id: int
    interval: Interval
    matrix: np.ndarray
    label: int


@dataclass(frozen=True)
class ChannelScaler:
    """Per-vital (min, max) bounds in physical units."""

    mins: tuple
    maxs: tuple

    def __post_init__(self):
        lo = np.asarray(self.mins, float)
        hi = np.asarray(self.maxs, float)
        if lo.shape != (N_VITALS,) or hi.shape != (N_VITALS,):
            raise ScalerError(f"scaler needs {N_VITALS} channel bounds")
        bad = [CHANNELS[i] for i in np.flatnonzero(~(hi > lo))]
        if bad:
            raise ScalerError(f"degenerate channel range (max <= min) for {', '.join(bad)}")


def partition_windows(t0: float, t_end: float, width: float, shifts: Iterable[float] = DEFAULT_SHIFTS) -> list[Interval]:
    """Consecutive windows of ``width`` hours plus their translated families.

    Trailing windows are truncated at ``t_end``; a shifted family is present
    only if ``t_end >= t0 + shift``.
    """
    if width <= 0:
        raise ValueError(f"width must be positive, got {width}")
    if t_end <= t0:
        raise ValueError(f"t_end ({t_end}) must exceed t0 ({t0})")
    shifts = sorted(set(float(s) for s in shifts))
    if any(s < 0 or s >= width for s in shifts):
        raise ValueError("shifts must lie in [0, width)")
    out = []
    for delta in shifts:
        if t_end < t0 + delta:
            continue
        k = 1
        while True:
            start = t0 + delta + (k - 1) * width
            if start >= t_end:
                break
            out.append(Interval(start, min(t0 + delta + k * width, t_end), delta))
            k += 1
    return out


def locf(x: np.ndarray) -> np.ndarray:
    """Last observation carried forward along the last axis.

    Leading gaps take the first observed value. A row with no observation at
    all is returned unchanged (all NaN).
    """
    x = np.asarray(x, dtype=float)
    flat = x.reshape(-1, x.shape[-1])
    out = np.empty_like(flat)
    n = flat.shape[1]
    for r, row in enumerate(flat):
        valid = ~np.isnan(row)
        if not valid.any():
            out[r] = row
            continue
        idx = np.where(valid, np.arange(n), 0)
        np.maximum.accumulate(idx, out=idx)
        first = np.argmax(valid)
        idx[:first] = first
        out[r] = row[idx]
    return out.reshape(x.shape)


def imputed_record(patient: PatientRecord, fill_values: Optional[Sequence[float]] = None) -> np.ndarray:
    """(6, n_minutes) matrix: LOCF-imputed vitals and the missingness row."""
    raw = patient.channels
    missing = np.isnan(raw).any(axis=0)
    vitals = locf(raw)
    if np.isnan(vitals).any():
        # A channel never observed during the stay.
        fill = fill_values if fill_values is not None else _NOMINAL
        for c in range(N_VITALS):
            if np.isnan(vitals[c]).any():
                vitals[c] = fill[c]
    return np.vstack([vitals, missing[None, :].astype(float)])


_NOMINAL = (80.0, 88.0, 52.0, 97.6, 16.5)


def _label_windows(windows: list[Interval], onset: Optional[float], rule: str) -> list[tuple[Interval, int]]:
    if onset is None:
        return [(iv, 0) for iv in windows]
    labelled = []
    families = sorted({iv.shift_family for iv in windows})
    for fam in families:
        fam_windows = [iv for iv in windows if iv.shift_family == fam]
        onset_win = next((iv for iv in fam_windows if iv.start <= onset < iv.end), None)
        if onset_win is None:
            # Onset at the very end of the trimmed record.
            onset_win = next((iv for iv in fam_windows if abs(iv.end - onset) < _EPS), None)
        for iv in fam_windows:
            if iv.start > onset:
                continue  # after the first infection
            if iv is onset_win:
                label = 1
            elif onset_win is None:
                label = 0
            elif rule == "adjacent":
                label = int(abs(iv.end - onset_win.start) < _EPS)
            else:
                label = int(iv.end <= onset_win.start + _EPS)
            labelled.append((iv, label))
    return labelled


def patient_instances(
    patient: PatientRecord,
    width: float = 24.0,
    shifts: Iterable[float] = DEFAULT_SHIFTS,
    label_rule: str = "adjacent",
    imputed: Optional[np.ndarray] = None,
) -> list[TimeSeriesInstance]:
    if label_rule not in ("adjacent", "all_preceding"):
        raise ConfigError(f"label_rule must be 'adjacent' or 'all_preceding', got {label_rule!r}")
    if patient.infection_time is not None and patient.cause != 1:
        raise DataConsistencyError(
            f"patient {patient.id} has an infection_time but cause {patient.cause}"
        )
    onset = patient.infection_time if patient.cause == 1 else None
    t_end = patient.end_time - 24.0 if patient.died else patient.end_time
    if t_end <= patient.admission_time:
        return []
    windows = partition_windows(patient.admission_time, t_end, width, shifts)
    if imputed is None:
        imputed = imputed_record(patient)
    imputed.flags.writeable = False
    n_cols = int(round(width * 60))
    out = []
    for iv, label in _label_windows(windows, onset, label_rule):
        if iv.width < width - _EPS:
            continue
        c0 = int(round((iv.start - patient.admission_time) * 60))
        out.append(TimeSeriesInstance(patient.id, iv, imputed[:, c0:c0 + n_cols], label))
    return out


def build_instances(
    cohort: Sequence[PatientRecord],
    width: float = 24.0,
    shifts: Iterable[float] = DEFAULT_SHIFTS,
    label_rule: str = "adjacent",
) -> list[TimeSeriesInstance]:
    """Labelled full-width instances for every patient in ``cohort``.

    ``label_rule="adjacent"`` marks the onset window and the single window
    just before it (per shift family) as cases; ``"all_preceding"`` marks the
    whole history before the onset window. Instance matrices are read-only
    views into a per-patient imputed array.
    """
    if len(cohort) == 0:
        raise EmptyInputError("build_instances needs a non-empty cohort")
    shifts = tuple(shifts)
    out = []
    for patient in cohort:
        out.extend(patient_instances(patient, width, shifts, label_rule))
    return out


def stack(instances: Sequence[TimeSeriesInstance]) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([inst.matrix for inst in instances])
    y = np.array([inst.label for inst in instances], dtype=float)
    return X, y


def fit_scaler(instances: Union[Sequence[TimeSeriesInstance], np.ndarray]) -> ChannelScaler:
    if isinstance(instances, np.ndarray):
        vit = instances[..., :N_VITALS, :]
        lo = vit.min(axis=(0, 2))
        hi = vit.max(axis=(0, 2))
    else:
        if len(instances) == 0:
            raise EmptyInputError("fit_scaler needs at least one instance")
        lo = np.min([inst.matrix[:N_VITALS].min(axis=1) for inst in instances], axis=0)
        hi = np.max([inst.matrix[:N_VITALS].max(axis=1) for inst in instances], axis=0)
    return ChannelScaler(tuple(float(v) for v in lo), tuple(float(v) for v in hi))


def _rescale_array(x: np.ndarray, scaler: ChannelScaler) -> np.ndarray:
    lo = np.asarray(scaler.mins)[:, None]
    hi = np.asarray(scaler.maxs)[:, None]
    out = np.array(x, dtype=float, copy=True)
    out[..., :N_VITALS, :] = (2.0 * out[..., :N_VITALS, :] - lo - hi) / (hi - lo)
    return out


def rescale(x, scaler: ChannelScaler):
    """Map each vital row to ``(2x - min - max) / (max - min)``.

    Accepts an instance or an array whose last two axes are (6, time); the
    missingness row is passed through.
    """
    if isinstance(x, TimeSeriesInstance):
        return dataclasses.replace(x, matrix=_rescale_array(x.matrix, scaler))
    return _rescale_array(x, scaler)


def _paa_array(x: np.ndarray, bin_minutes: int) -> np.ndarray:
    length = x.shape[-1]
    if bin_minutes <= 0 or length % bin_minutes:
        raise ValueError(f"series length {length} is not divisible by bin size {bin_minutes}")
    return x.reshape(*x.shape[:-1], length // bin_minutes, bin_minutes).mean(axis=-1)


def paa(x, bin_minutes: int = 9):
    """Piecewise aggregate approximation: per-bin means along time.

    On the missingness row this yields the per-bin missing fraction.
    """
    if isinstance(x, TimeSeriesInstance):
        return dataclasses.replace(x, matrix=_paa_array(x.matrix, bin_minutes))
    return _paa_array(np.asarray(x, dtype=float), bin_minutes)


def undersample(instances: Sequence[TimeSeriesInstance], ratio: float = 8, seed: int = 0) -> list[TimeSeriesInstance]:
    """Keep every case and a uniform subset of ``ratio * n_cases`` controls."""
    if ratio < 1:
        raise ValueError(f"ratio must be >= 1, got {ratio}")
    labels = np.array([inst.label for inst in instances])
    cases = np.flatnonzero(labels == 1)
    controls = np.flatnonzero(labels == 0)
    if len(cases) == 0:
        raise EmptyClassError("undersample needs at least one case instance")
    n_keep = min(int(ratio * len(cases)), len(controls))
    rng = np.random.default_rng(seed)
    kept = np.sort(np.concatenate([cases, rng.choice(controls, size=n_keep, replace=False)]))
    return [instances[i] for i in kept]


# ---------------------------------------------------------------------------
# Instance store

def write_instance_store(instances: Sequence[TimeSeriesInstance], directory) -> list[Path]:
    """Manifest CSV plus one little-endian float64 row-major matrix per instance."""
    directory = Path(directory)
    (directory / "matrices").mkdir(parents=True, exist_ok=True)
    rows = []
    paths = [directory / "manifest.csv"]
    for i, inst in enumerate(instances):
        rows.append(
            dict(
                instance_id=i,
                patient_id=inst.patient_id,
                start=inst.interval.start,
                end=inst.interval.end,
                shift_family=inst.interval.shift_family,
                label=inst.label,
            )
        )
        path = directory / "matrices" / f"instance_{i}.f64"
        path.write_bytes(np.ascontiguousarray(inst.matrix, dtype="<f8").tobytes())
        paths.append(path)
    pd.DataFrame(rows, columns=["instance_id", "patient_id", "start", "end", "shift_family", "label"]).to_csv(
        paths[0], index=False
    )
    return paths


def read_instance_store(directory, n_rows: int = N_ROWS) -> list[TimeSeriesInstance]:
    directory = Path(directory)
    manifest = pd.read_csv(directory / "manifest.csv", float_precision="round_trip")
    out = []
    for row in manifest.itertuples(index=False):
        raw = np.frombuffer((directory / "matrices" / f"instance_{row.instance_id}.f64").read_bytes(), dtype="<f8")
        out.append(
            TimeSeriesInstance(
                int(row.patient_id),
                Interval(float(row.start), float(row.end), float(row.shift_family)),
                raw.reshape(n_rows, -1).astype(float),
                int(row.label),
            )
        )
    return out

