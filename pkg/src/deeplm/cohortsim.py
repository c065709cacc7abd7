"""Synthetic ICU admissions with a planted pre-infection vital-sign signature.

Every admission is generated from its own random substream derived from
``(seed, patient id)``, so cohorts are reproducible bit for bit and patients
can be generated in any order.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy import signal, stats

from .errors import ConfigError, EmptyInputError

CHANNELS = ("hr", "map", "pulse_pressure", "sao2", "rr")
LOWFREQ_COLUMNS = ("fever", "crp", "mech_vent", "age", "sex")
LOWFREQ_BLOCK_HOURS = 8.0

# Physiological clipping ranges. HR matches the rescaling bounds used downstream.
PHYSIO_RANGES = {
    "hr": (41.0, 239.0),
    "map": (30.0, 160.0),
    "pulse_pressure": (10.0, 120.0),
    "sao2": (70.0, 100.0),
    "rr": (4.0, 60.0),
}

# (mean, sd, lower, upper) of the per-patient baseline level.
_BASELINES = {
    "hr": (80.0, 9.0, 55.0, 115.0),
    "map": (88.0, 7.0, 65.0, 115.0),
    "pulse_pressure": (52.0, 9.0, 25.0, 85.0),
    "sao2": (97.6, 0.9, 94.0, 100.0),
    "rr": (16.5, 2.5, 10.0, 24.0),
}
# Circadian amplitude and stationary AR(1) noise sd per channel.
_CIRCADIAN = {"hr": 4.0, "map": 3.0, "pulse_pressure": 3.0, "sao2": 0.4, "rr": 1.0}
_NOISE_SD = {"hr": 3.0, "map": 3.0, "pulse_pressure": 3.0, "sao2": 0.5, "rr": 1.2}
_AR_COEF = 0.98
_COVARIATE_LEAD_HOURS = 24.0


@dataclass(frozen=True)
class SimConfig:
    n_patients: int = 500
    mean_los_hours: float = 168.0
    icuai_daily_rate: float = 0.04
    signature_lead_hours: float = 36.0
    signature_strength: float = 1.0
    missing_rate: float = 0.05
    seed: int = 0
    # Drift added at full signature strength, in physical units.
    drift_hr: float = 20.0
    drift_map: float = -12.0
    drift_pulse_pressure: float = 0.0
    drift_sao2: float = -2.5
    drift_rr: float = 8.0
    death_fraction: float = 0.2
    post_infection_mean_hours: float = 72.0
    mean_gap_minutes: float = 20.0

    def __post_init__(self):
        if int(self.n_patients) != self.n_patients or self.n_patients < 1:
            raise ConfigError(f"n_patients must be a positive integer, got {self.n_patients}")
        if self.mean_los_hours <= 0:
            raise ConfigError(f"mean_los_hours must be positive, got {self.mean_los_hours}")
        if self.icuai_daily_rate < 0:
            raise ConfigError(f"icuai_daily_rate must be >= 0, got {self.icuai_daily_rate}")
        if self.icuai_daily_rate / 24.0 >= 1.0 / self.mean_los_hours:
            raise ConfigError(
                "icuai_daily_rate leaves no room for a discharge hazard at the "
                f"requested mean_los_hours={self.mean_los_hours}"
            )
        if not 0.0 <= self.missing_rate < 1.0:
            raise ConfigError(f"missing_rate must lie in [0, 1), got {self.missing_rate}")
        if not 0.0 <= self.signature_strength <= 2.0:
            raise ConfigError(
                f"signature_strength must lie in [0, 2], got {self.signature_strength}"
            )
        if self.signature_lead_hours <= 0:
            raise ConfigError("signature_lead_hours must be positive")
        if not 0.0 <= self.death_fraction <= 1.0:
            raise ConfigError("death_fraction must lie in [0, 1]")
        if self.post_infection_mean_hours <= 0:
            raise ConfigError("post_infection_mean_hours must be positive")
        if self.mean_gap_minutes < 1:
            raise ConfigError("mean_gap_minutes must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    @property
    def drift_vector(self) -> np.ndarray:
        return np.array([getattr(self, f"drift_{c}") for c in CHANNELS])

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_mapping(cls, values: dict) -> "SimConfig":
        kwargs = {}
        known = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown simulation field {key!r}")
            caster = int if key in ("n_patients", "seed") else float
            try:
                kwargs[key] = caster(raw)
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {raw!r}") from None
        return cls(**kwargs)


@dataclass
class PatientRecord:
    """One admission. Times are hours since ICU admission.

    ``channels`` has shape (5, ceil(end_time * 60)) with NaN marking missing
    minutes. ``lowfreq`` has one row per 8-hour block; row ``b`` summarises
    ``[8b, 8b + 8)`` and columns follow :data:`LOWFREQ_COLUMNS`.
    """

    id: int
    end_time: float
    cause: int
    channels: np.ndarray
    lowfreq: np.ndarray
    infection_time: Optional[float] = None
    died: bool = False
    admission_time: float = 0.0

    @property
    def event_time(self) -> float:
        """Time of the first competing event (infection, or discharge/death)."""
        return self.infection_time if self.cause == 1 else self.end_time

    @property
    def n_minutes(self) -> int:
        return self.channels.shape[1]


@dataclass(frozen=True)
class SummaryStats:
    n: int
    n_infected: int
    n_uninfected: int
    daily_rate: float
    median_onset_days: float
    median_los_days: float


def signature_ramp(hours: np.ndarray, infection_time: Optional[float], lead_hours: float) -> np.ndarray:
    """Piecewise-linear 0 -> 1 ramp ending at onset and held at 1 afterwards."""
    hours = np.asarray(hours, dtype=float)
    if infection_time is None:
        return np.zeros_like(hours)
    return np.clip((hours - (infection_time - lead_hours)) / lead_hours, 0.0, 1.0)


def injected_drift(config: SimConfig, hours: np.ndarray, infection_time: Optional[float]) -> np.ndarray:
    """Drift (5 x len(hours)) that the generator adds on top of the baseline vitals."""
    ramp = signature_ramp(hours, infection_time, config.signature_lead_hours)
    return config.signature_strength * config.drift_vector[:, None] * ramp[None, :]


def _missing_mask(rng: np.random.Generator, n: int, rate: float, mean_gap: float) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    if rate <= 0.0:
        return mask
    mean_obs = mean_gap * (1.0 - rate) / rate
    missing = rng.random() < rate
    pos = 0
    while pos < n:
        mean_len = mean_gap if missing else mean_obs
        length = int(rng.geometric(1.0 / max(mean_len, 1.0)))
        if missing:
            mask[pos:pos + length] = True
        pos += length
        missing = not missing
    return mask


def _simulate_patient(config: SimConfig, pid: int) -> PatientRecord:
    rng = np.random.default_rng([config.seed, pid])

    age = float(np.clip(rng.normal(64.0, 14.0), 18.0, 95.0))
    sex = float(rng.random() < 0.6)
    vent0 = rng.random() < 0.55

    # Patient-level infection frailty, normalised to mean one.
    frailty = math.exp(0.5 * vent0 + 0.015 * (age - 64.0))
    frailty /= (0.45 + 0.55 * math.exp(0.5)) * math.exp(0.5 * (0.015 * 14.0) ** 2)
    lam_inf = config.icuai_daily_rate / 24.0 * frailty
    lam_exit = 1.0 / config.mean_los_hours - config.icuai_daily_rate / 24.0

    t_inf = rng.exponential(1.0 / lam_inf) if lam_inf > 0 else math.inf
    t_exit = rng.exponential(1.0 / lam_exit)
    death_draw = rng.random()
    post_stay = rng.exponential(config.post_infection_mean_hours)
    if t_inf < t_exit:
        cause, infection_time, died = 1, float(t_inf), False
        end_time = float(t_inf + post_stay)
    else:
        cause, infection_time = 2, None
        died = bool(death_draw < config.death_fraction)
        end_time = float(t_exit)
    end_time = max(end_time, 1.0 / 60.0)

    n = math.ceil(end_time * 60.0)
    hours = np.arange(n) / 60.0
    channels = np.empty((len(CHANNELS), n))
    for c, name in enumerate(CHANNELS):
        mu, sd, lo, hi = _BASELINES[name]
        base = stats.truncnorm.rvs((lo - mu) / sd, (hi - mu) / sd, loc=mu, scale=sd, random_state=rng)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        innov_sd = _NOISE_SD[name] * math.sqrt(1.0 - _AR_COEF**2)
        x0 = rng.normal(0.0, _NOISE_SD[name])
        noise, _ = signal.lfilter([1.0], [1.0, -_AR_COEF], rng.normal(0.0, innov_sd, n), zi=[_AR_COEF * x0])
        channels[c] = base + _CIRCADIAN[name] * np.sin(2.0 * math.pi * hours / 24.0 + phase) + noise
    channels += injected_drift(config, hours, infection_time)
    for c, name in enumerate(CHANNELS):
        np.clip(channels[c], *PHYSIO_RANGES[name], out=channels[c])
    channels[:, _missing_mask(rng, n, config.missing_rate, config.mean_gap_minutes)] = np.nan

    n_blocks = math.ceil(end_time / LOWFREQ_BLOCK_HOURS)
    block_end = np.minimum(LOWFREQ_BLOCK_HOURS * (np.arange(n_blocks) + 1), end_time)
    cov_ramp = signature_ramp(block_end, infection_time, _COVARIATE_LEAD_HOURS)
    fever = (rng.random(n_blocks) < 0.08 + 0.30 * cov_ramp).astype(float)
    crp_base = math.exp(rng.normal(math.log(60.0), 0.5))
    crp = crp_base * np.exp(rng.normal(0.0, 0.25, n_blocks)) * (1.0 + 1.0 * cov_ramp)
    flips = rng.random(n_blocks) < 0.05
    vent = np.logical_xor(vent0, np.cumsum(flips) % 2 == 1).astype(float)
    lowfreq = np.column_stack([fever, crp, vent, np.full(n_blocks, age), np.full(n_blocks, sex)])

    return PatientRecord(
        id=pid,
        end_time=end_time,
        cause=cause,
        channels=channels,
        lowfreq=lowfreq,
        infection_time=infection_time,
        died=died,
    )


def generate_cohort(config: SimConfig) -> list[PatientRecord]:
    return [_simulate_patient(config, pid) for pid in range(config.n_patients)]


def cohort_summary(cohort: Sequence[PatientRecord]) -> SummaryStats:
    if len(cohort) == 0:
        raise EmptyInputError("cohort_summary needs at least one patient")
    infected = [p for p in cohort if p.cause == 1]
    days_at_risk = sum(p.event_time for p in cohort) / 24.0
    onset = [p.infection_time / 24.0 for p in infected]
    return SummaryStats(
        n=len(cohort),
        n_infected=len(infected),
        n_uninfected=len(cohort) - len(infected),
        daily_rate=len(infected) / days_at_risk if days_at_risk > 0 else 0.0,
        median_onset_days=float(np.median(onset)) if onset else float("nan"),
        median_los_days=float(np.median([p.end_time for p in cohort])) / 24.0,
    )


# ---------------------------------------------------------------------------
# Serialization

def write_cohort(cohort: Sequence[PatientRecord], directory) -> list[Path]:
    """Write metadata.csv, lowfreq.csv and channels/patient_<id>.csv.

    Floats are written with round-trip precision so a reload is bit-identical.
    """
    directory = Path(directory)
    (directory / "channels").mkdir(parents=True, exist_ok=True)
    meta = pd.DataFrame(
        {
            "id": [p.id for p in cohort],
            "end_time": [p.end_time for p in cohort],
            "cause": [p.cause for p in cohort],
            "died": [int(p.died) for p in cohort],
            "infection_time": [p.infection_time for p in cohort],
            "age": [p.lowfreq[0, 3] for p in cohort],
            "sex": [p.lowfreq[0, 4] for p in cohort],
        }
    )
    written = [directory / "metadata.csv", directory / "lowfreq.csv"]
    meta.to_csv(written[0], index=False)
    low = pd.concat(
        [
            pd.DataFrame(
                {
                    "id": p.id,
                    "block": np.arange(len(p.lowfreq)),
                    "fever": p.lowfreq[:, 0],
                    "crp": p.lowfreq[:, 1],
                    "mech_vent": p.lowfreq[:, 2],
                }
            )
            for p in cohort
        ],
        ignore_index=True,
    )
    low.to_csv(written[1], index=False)
    for p in cohort:
        path = directory / "channels" / f"patient_{p.id}.csv"
        frame = pd.DataFrame(p.channels.T, columns=CHANNELS)
        frame.insert(0, "minute_index", np.arange(p.n_minutes))
        frame.to_csv(path, index=False)
        written.append(path)
    return written


def read_cohort(directory) -> list[PatientRecord]:
    directory = Path(directory)
    meta = pd.read_csv(directory / "metadata.csv", float_precision="round_trip")
    low = pd.read_csv(directory / "lowfreq.csv", float_precision="round_trip")
    blocks = {pid: g.sort_values("block") for pid, g in low.groupby("id")}
    cohort = []
    for row in meta.itertuples(index=False):
        frame = pd.read_csv(directory / "channels" / f"patient_{row.id}.csv", float_precision="round_trip")
        g = blocks[row.id]
        n_blocks = len(g)
        lowfreq = np.column_stack(
            [
                g["fever"].to_numpy(float),
                g["crp"].to_numpy(float),
                g["mech_vent"].to_numpy(float),
                np.full(n_blocks, row.age),
                np.full(n_blocks, row.sex),
            ]
        )
        inf = None if pd.isna(row.infection_time) else float(row.infection_time)
        cohort.append(
            PatientRecord(
                id=int(row.id),
                end_time=float(row.end_time),
                cause=int(row.cause),
                channels=frame[list(CHANNELS)].to_numpy(float).T.copy(),
                lowfreq=lowfreq,
                infection_time=inf,
                died=bool(row.died),
            )
        )
    return cohort


def read_config_file(path) -> dict:
    """Parse a flat ``key=value`` file; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values
