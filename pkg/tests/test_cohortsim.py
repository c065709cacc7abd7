import numpy as np
import pytest

from deeplm.cohortsim import (
    CHANNELS,
    PHYSIO_RANGES,
    SimConfig,
    cohort_summary,
    generate_cohort,
    injected_drift,
    read_cohort,
    read_config_file,
    signature_ramp,
    write_cohort,
)
from deeplm.errors import ConfigError, EmptyInputError


@pytest.mark.parametrize(
    "field, value",
    [("n_patients", 0), ("icuai_daily_rate", -0.1), ("missing_rate", 1.0), ("signature_strength", 2.5), ("mean_los_hours", 0)],
)
def test_invalid_config_names_field(field, value):
    with pytest.raises(ConfigError, match=field):
        SimConfig(**{field: value})


def test_zero_hazard_single_patient_is_cause_two():
    (p,) = generate_cohort(SimConfig(n_patients=1, icuai_daily_rate=0.0, seed=7))
    assert p.cause == 2
    assert p.infection_time is None


def test_same_seed_is_bit_identical():
    a = generate_cohort(SimConfig(n_patients=5, seed=3))
    b = generate_cohort(SimConfig(n_patients=5, seed=3))
    for pa, pb in zip(a, b):
        assert pa.end_time == pb.end_time
        assert np.array_equal(pa.channels, pb.channels, equal_nan=True)
        assert np.array_equal(pa.lowfreq, pb.lowfreq)
    c = generate_cohort(SimConfig(n_patients=5, seed=4))
    assert any(pa.end_time != pc.end_time for pa, pc in zip(a, c))


def test_patient_substreams_do_not_depend_on_cohort_size():
    small = generate_cohort(SimConfig(n_patients=3, seed=9))
    large = generate_cohort(SimConfig(n_patients=6, seed=9))
    assert np.array_equal(small[2].channels, large[2].channels, equal_nan=True)


def test_record_invariants(small_cohort):
    for p in small_cohort:
        assert p.end_time > 0
        assert p.channels.shape == (5, int(np.ceil(p.end_time * 60)))
        if p.infection_time is not None:
            assert p.cause == 1 and 0 < p.infection_time <= p.end_time
        else:
            assert p.cause == 2
        for c, name in enumerate(CHANNELS):
            vals = p.channels[c][~np.isnan(p.channels[c])]
            lo, hi = PHYSIO_RANGES[name]
            assert vals.min() >= lo and vals.max() <= hi


def test_calibration_targets(cohort_500):
    s = cohort_summary(cohort_500)
    assert 0.02 <= s.daily_rate <= 0.06
    assert 3.0 <= s.median_onset_days <= 10.0
    assert s.n_infected + s.n_uninfected == s.n == 500


def test_missingness_rate_band(cohort_500):
    ch = np.concatenate([p.channels[0] for p in cohort_500[:100]])
    frac = np.isnan(ch).mean()
    assert 0.025 <= frac <= 0.075


def test_missing_gaps_are_contiguous(small_cohort):
    miss = np.concatenate([np.isnan(p.channels[0]) for p in small_cohort]).astype(int)
    edges = np.flatnonzero(np.diff(np.r_[0, miss, 0]))
    runs = edges[1::2] - edges[::2]
    assert runs.mean() > 3
    # gaps are shared by all channels
    p = small_cohort[0]
    assert np.array_equal(np.isnan(p.channels).any(axis=0), np.isnan(p.channels).all(axis=0))


def test_summary_single_uninfected_patient(small_cohort):
    p = next(p for p in small_cohort if p.cause == 2)
    s = cohort_summary([p])
    assert s.n_infected == 0 and s.daily_rate == 0.0


def test_summary_empty():
    with pytest.raises(EmptyInputError):
        cohort_summary([])


def test_drift_is_monotone_in_strength():
    hours = np.linspace(0, 100, 401)
    means = [injected_drift(SimConfig(signature_strength=s), hours, 80.0)[0].mean() for s in (0.0, 0.5, 1.0, 2.0)]
    assert means[0] == 0.0
    assert all(b >= a for a, b in zip(means, means[1:]))


def test_ramp_shape():
    r = signature_ramp(np.array([0.0, 44.0, 62.0, 80.0, 90.0]), 80.0, 36.0)
    assert np.allclose(r, [0.0, 0.0, 0.5, 1.0, 1.0])
    assert np.all(signature_ramp(np.arange(5.0), None, 36.0) == 0)


def test_strength_zero_leaves_infected_vitals_undrifted():
    cfg0 = SimConfig(n_patients=40, seed=5, signature_strength=0.0)
    cfg1 = SimConfig(n_patients=40, seed=5, signature_strength=1.0)
    p0 = next(p for p in generate_cohort(cfg0) if p.cause == 1)
    p1 = next(p for p in generate_cohort(cfg1) if p.id == p0.id)
    hours = np.arange(p0.n_minutes) / 60.0
    early = hours < p0.infection_time - cfg0.signature_lead_hours
    assert np.array_equal(p0.channels[:, early], p1.channels[:, early], equal_nan=True)


def test_cohort_round_trip(tmp_path, small_cohort):
    cohort = small_cohort[:4]
    write_cohort(cohort, tmp_path)
    header = (tmp_path / "channels" / "patient_0.csv").read_text().splitlines()[0]
    assert header == "minute_index,hr,map,pulse_pressure,sao2,rr"
    back = read_cohort(tmp_path)
    for a, b in zip(cohort, back):
        assert (a.id, a.end_time, a.cause, a.died, a.infection_time) == (b.id, b.end_time, b.cause, b.died, b.infection_time)
        assert np.array_equal(a.channels, b.channels, equal_nan=True)
        assert np.array_equal(a.lowfreq, b.lowfreq)


def test_config_file(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("# comment\nn_patients = 12\nseed=3  # trailing\n")
    cfg = SimConfig.from_mapping(read_config_file(f))
    assert cfg.n_patients == 12 and cfg.seed == 3
    f.write_text("nonsense\n")
    with pytest.raises(ConfigError):
        read_config_file(f)
    with pytest.raises(ConfigError, match="bogus"):
        SimConfig.from_mapping({"bogus": "1"})
