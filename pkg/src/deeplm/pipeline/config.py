"""Flat key=value pipeline configuration.

Every key has a type and a default; unknown keys and unparsable values raise
ConfigError naming the key. Lists are comma separated.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Optional

from ..cohortsim import SimConfig, read_config_file
from ..convnet.network import NetworkArch
from ..convnet.training import TrainConfig
from ..errors import ConfigError
from ..experiment import CNNSettings
from ..landmark.superdata import LandmarkGrid


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str


SCHEMA: dict[str, Key] = {
    "seed": Key(int, 0, "master seed for every stage"),
    # cohort
    "n_patients": Key(int, 500, "cohort size"),
    "mean_los_hours": Key(float, 168.0, "mean ICU length of stay"),
    "icuai_daily_rate": Key(float, 0.04, "infection rate per patient-day"),
    "signature_lead_hours": Key(float, 36.0, "hours over which the pre-onset drift ramps up"),
    "signature_strength": Key(float, 1.0, "multiplier of the planted drift (0 = none)"),
    "missing_rate": Key(float, 0.05, "fraction of monitor minutes missing"),
    "mean_gap_minutes": Key(float, 20.0, "mean length of a missing gap"),
    "death_fraction": Key(float, 0.2, "share of non-infected exits that are deaths"),
    "post_infection_mean_hours": Key(float, 72.0, "mean stay after infection"),
    "drift_hr": Key(float, 20.0, "heart-rate drift at onset (bpm)"),
    "drift_map": Key(float, -12.0, "mean arterial pressure drift at onset (mmHg)"),
    "drift_pulse_pressure": Key(float, 0.0, "pulse-pressure drift at onset (mmHg)"),
    "drift_sao2": Key(float, -2.5, "SaO2 drift at onset (%)"),
    "drift_rr": Key(float, 8.0, "respiratory-rate drift at onset (1/min)"),
    # instances
    "window_hours": Key(float, 24.0, "instance width"),
    "shifts": Key(_floats, (0.0, 8.0, 16.0), "partition offsets in hours"),
    "undersample_ratio": Key(float, 8.0, "controls per case after undersampling"),
    "bin_minutes": Key(int, 9, "PAA bin width"),
    # CNN
    "cnn_folds": Key(int, 5, "cross-validation folds for the CNN"),
    "n_blocks": Key(int, 5, "convolutional blocks"),
    "filters": Key(int, 128, "filters per block"),
    "kernel_size": Key(int, 3, "convolution kernel size"),
    "pool_size": Key(int, 2, "max-pool size"),
    "dropout": Key(float, 0.25, "dropout rate"),
    "epochs": Key(int, 30, "training epochs"),
    "batch_size": Key(int, 32, "mini-batch size"),
    "learning_rate": Key(float, 1e-3, "ADAM step size"),
    "score_stride_hours": Key(float, 8.0, "stride of the scoring windows"),
    # landmarking
    "landmark_start": Key(float, 48.0, "first landmark (hours)"),
    "landmark_end": Key(float, 240.0, "last landmark (hours)"),
    "landmark_count": Key(int, 25, "number of landmarks"),
    "prediction_window": Key(float, 24.0, "prediction horizon w (hours)"),
    "standardize": Key(_bool, False, "standardize covariates before fitting"),
    "lm_folds": Key(int, 1, "1 = single patient split, >1 = cross-validation"),
    "test_fraction": Key(float, 0.3, "held-out share for the single split"),
    "bootstrap_replicates": Key(int, 200, "bootstrap replicates"),
    "confidence_level": Key(float, 0.95, "bootstrap interval level"),
    "warning_threshold": Key(float, 0.08, "CIF warning level for lead times"),
    # saliency
    "layer_weights": Key(_floats, (), "per-block saliency weights (empty = 1..n_blocks)"),
    "salient_window_hours": Key(float, 8.0, "width of the extracted salient window"),
    "saliency_instances": Key(int, 20, "test instances exported by the saliency stage"),
    "cluster_days": Key(_ints, (3, 7, 10), "landmark days of the clustering CNNs"),
    "cluster_band_hours": Key(float, 48.0, "window-end distance from the day for its training instances"),
}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    return repr(value)


class PipelineConfig:
    """Resolved configuration: defaults, then file, then overrides."""

    def __init__(self, values: Optional[Mapping[str, Any]] = None):
        self._values = {k: spec.default for k, spec in SCHEMA.items()}
        if values:
            for k, v in values.items():
                self.set(k, v)
        self.validate()

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown configuration key {key!r}")
        if isinstance(value, str):
            try:
                value = SCHEMA[key].parse(value)
            except ValueError as exc:
                raise ConfigError(f"{key}: cannot parse {value!r} ({exc})") from None
        self._values[key] = value

    def __getattr__(self, key):
        try:
            return self.__dict__["_values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def as_dict(self) -> dict:
        return dict(self._values)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(self._values[k])}\n" for k in SCHEMA)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    # Module configs -----------------------------------------------------

    def sim_config(self) -> SimConfig:
        v = self._values
        return SimConfig(
            n_patients=v["n_patients"], mean_los_hours=v["mean_los_hours"], icuai_daily_rate=v["icuai_daily_rate"],
            signature_lead_hours=v["signature_lead_hours"], signature_strength=v["signature_strength"],
            missing_rate=v["missing_rate"], seed=v["seed"], drift_hr=v["drift_hr"], drift_map=v["drift_map"],
            drift_pulse_pressure=v["drift_pulse_pressure"], drift_sao2=v["drift_sao2"], drift_rr=v["drift_rr"],
            death_fraction=v["death_fraction"], post_infection_mean_hours=v["post_infection_mean_hours"],
            mean_gap_minutes=v["mean_gap_minutes"],
        )

    def arch(self) -> NetworkArch:
        v = self._values
        return NetworkArch(
            n_blocks=v["n_blocks"], filters=v["filters"], kernel_size=v["kernel_size"], pool_size=v["pool_size"],
            dropout_rate=v["dropout"], input_length=int(round(v["window_hours"] * 60 / v["bin_minutes"])),
        )

    def cnn_settings(self) -> CNNSettings:
        v = self._values
        return CNNSettings(
            arch=self.arch(),
            train=TrainConfig(epochs=v["epochs"], batch_size=v["batch_size"], seed=v["seed"], lr=v["learning_rate"]),
            k=v["cnn_folds"], ratio=v["undersample_ratio"], width=v["window_hours"], shifts=tuple(v["shifts"]),
            bin_minutes=v["bin_minutes"], stride=v["score_stride_hours"], seed=v["seed"],
        )

    def grid(self) -> LandmarkGrid:
        v = self._values
        return LandmarkGrid(v["landmark_start"], v["landmark_end"], v["landmark_count"], v["prediction_window"])

    def validate(self) -> None:
        v = self._values
        for key in ("n_patients", "cnn_folds", "epochs", "batch_size", "bin_minutes", "landmark_count", "bootstrap_replicates"):
            if v[key] < 1:
                raise ConfigError(f"{key} must be positive, got {v[key]}")
        if v["cnn_folds"] < 2:
            raise ConfigError(f"cnn_folds must be >= 2, got {v['cnn_folds']}")
        if v["bootstrap_replicates"] < 50:
            raise ConfigError(f"bootstrap_replicates must be >= 50, got {v['bootstrap_replicates']}")
        if not 0 < v["confidence_level"] < 1:
            raise ConfigError(f"confidence_level must lie in (0, 1), got {v['confidence_level']}")
        if not 0 < v["test_fraction"] < 1:
            raise ConfigError(f"test_fraction must lie in (0, 1), got {v['test_fraction']}")
        if (v["window_hours"] * 60) % v["bin_minutes"]:
            raise ConfigError("bin_minutes must divide the window length in minutes")
        if v["layer_weights"] and len(v["layer_weights"]) != v["n_blocks"]:
            raise ConfigError("layer_weights needs one weight per block")
        self.sim_config()
        self.arch().validate()
        self.grid()


def load_config(path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None) -> PipelineConfig:
    values = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        values.update(read_config_file(path))
    values.update(overrides or {})
    return PipelineConfig(values)


def schema_text() -> str:
    """Documented schema: one ``key = default  # help`` line per key."""
    return "".join(f"{k} = {_format(s.default)}  # {s.help}\n" for k, s in SCHEMA.items())
