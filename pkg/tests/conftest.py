import math

import numpy as np
import pytest

from deeplm.cohortsim import PatientRecord, SimConfig, generate_cohort


def make_patient(pid=0, end_time=48.0, cause=2, infection_time=None, died=False, channels=None, lowfreq=None, seed=0):
    """Hand-built record with smooth physiological vitals and no missing data."""
    n = math.ceil(end_time * 60)
    if channels is None:
        rng = np.random.default_rng(seed)
        base = np.array([80.0, 85.0, 50.0, 97.0, 16.0])[:, None]
        channels = base + rng.normal(0.0, 1.0, (5, n))
    if lowfreq is None:
        n_blocks = math.ceil(end_time / 8)
        lowfreq = np.column_stack(
            [np.zeros(n_blocks), np.full(n_blocks, 50.0), np.ones(n_blocks), np.full(n_blocks, 60.0), np.zeros(n_blocks)]
        )
    return PatientRecord(
        id=pid, end_time=end_time, cause=cause, channels=channels, lowfreq=lowfreq,
        infection_time=infection_time, died=died,
    )


@pytest.fixture(scope="session")
def small_cohort():
    return generate_cohort(SimConfig(n_patients=60, seed=11))


@pytest.fixture(scope="session")
def cohort_500():
    return generate_cohort(SimConfig(n_patients=500, seed=1))
