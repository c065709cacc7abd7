"""End-to-end experiment building blocks shared by the CLI and the acceptance suite.

Step 1 trains the CNN with patient-grouped cross-fitting so every patient is
scored by a network that never saw them. Step 2 compares the landmark model
on low-frequency covariates alone (pi1) with the same model plus the CNN
score (pi2), using out-of-fold CIF predictions and a paired patient bootstrap.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .cohortsim import LOWFREQ_COLUMNS, PatientRecord
from .convnet.network import NetworkArch
from .convnet.training import ScoreModel, TrainConfig, assign_folds, kfold_evaluate, score_patient
from .errors import ConfigError, UndefinedMetricError
from .instances import DEFAULT_SHIFTS, TimeSeriesInstance, build_instances, undersample
from .landmark.cox import MonotoneLikelihoodWarning, fit_competing_risks
from .landmark.evaluation import BootstrapCI, auroc_global, bootstrap_ci, landmark_aurocs, out_of_fold_cif, split_patients
from .landmark.predict import cif_curves
from .landmark.superdata import LandmarkGrid, SuperDataset, build_super_dataset
from .metrics import auroc

log = logging.getLogger(__name__)

PI1_COVARIATES = list(LOWFREQ_COLUMNS)
PI2_COVARIATES = ["z_cnn"] + list(LOWFREQ_COLUMNS)


@dataclass(frozen=True)
class CNNSettings:
    arch: NetworkArch = NetworkArch()
    train: TrainConfig = TrainConfig()
    k: int = 5
    ratio: float = 8.0
    width: float = 24.0
    shifts: tuple = DEFAULT_SHIFTS
    bin_minutes: int = 9
    stride: float = 8.0
    seed: int = 0


@dataclass
class CrossfitResult:
    scores: dict  # patient id -> [(window end hour, score)]
    fold_of_patient: dict
    models: list
    fold_aurocs: list
    histories: list = field(default_factory=list)

    @property
    def mean_auroc(self) -> float:
        return float(np.mean(self.fold_aurocs))


def cohort_folds(cohort: Sequence[PatientRecord], k: int, seed: int) -> dict:
    """Patient -> fold over the whole cohort, stratified by infection."""
    return assign_folds([p.id for p in cohort], [p.cause == 1 for p in cohort], k, seed)


def crossfit_scores(cohort: Sequence[PatientRecord], settings: CNNSettings = CNNSettings()) -> CrossfitResult:
    """Train one CNN per patient fold and score each patient with its held-out network.

    Instances are undersampled over the whole pool before the patient split.
    """
    instances = build_instances(cohort, settings.width, settings.shifts)
    pool = undersample(instances, settings.ratio, settings.seed)
    folds = cohort_folds(cohort, settings.k, settings.seed)
    res = kfold_evaluate(pool, settings.k, settings.arch, settings.train, settings.seed, folds, settings.bin_minutes)
    scores = {
        p.id: score_patient(res.models[folds[p.id]], p, settings.stride, settings.width) for p in cohort
    }
    return CrossfitResult(scores, folds, res.models, res.fold_aurocs, res.histories)


# ---------------------------------------------------------------------------
# Step 2 comparison

@dataclass
class ModelEvaluation:
    name: str
    covariates: list
    predictions: np.ndarray  # out-of-fold F_1(t_LM + w) per evaluated row
    aurocs: np.ndarray
    global_auroc: float
    ci_global: BootstrapCI
    ci_landmarks: BootstrapCI


@dataclass
class Evaluation:
    super_dataset: SuperDataset  # evaluated rows only
    risk_sets: np.ndarray
    models: dict  # name -> ModelEvaluation
    ci_difference: Optional[BootstrapCI] = None  # last model minus first

    def landmark_table(self) -> pd.DataFrame:
        t = pd.DataFrame(dict(t_lm=self.super_dataset.grid.times, risk_set=self.risk_sets))
        for name, m in self.models.items():
            t[f"auroc_{name}"] = m.aurocs
            t[f"lo_{name}"], t[f"hi_{name}"] = m.ci_landmarks.lo, m.ci_landmarks.hi
        if len(self.models) >= 2:
            first, last = list(self.models.values())[0], list(self.models.values())[-1]
            with np.errstate(divide="ignore", invalid="ignore"):
                t["relative_increase"] = (last.aurocs - first.aurocs) / first.aurocs
        return t


@dataclass
class Comparison(Evaluation):
    """Evaluation of exactly pi1 and pi2."""

    @property
    def global_pi1(self) -> float:
        return self.models["pi1"].global_auroc

    @property
    def global_pi2(self) -> float:
        return self.models["pi2"].global_auroc

    @property
    def difference(self) -> float:
        return self.global_pi2 - self.global_pi1

    @property
    def relative_increase(self) -> np.ndarray:
        """Per-landmark (AUROC_pi2 - AUROC_pi1) / AUROC_pi1."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return (self.models["pi2"].aurocs - self.models["pi1"].aurocs) / self.models["pi1"].aurocs


def _rows_by_patient(frame: pd.DataFrame) -> dict:
    return {pid: np.asarray(idx) for pid, idx in frame.groupby("patient_id").indices.items()}


def _landmark_aurocs_fast(k, status, pred, n):
    out = np.full(n, np.nan)
    sizes = np.bincount(k, minlength=n)
    cases = status == 1
    for j in range(n):
        sel = k == j
        try:
            out[j] = auroc(pred[sel], cases[sel])
        except UndefinedMetricError:
            pass
    return out, sizes


def _validated(frame, grid, covariates, covariate_sets, infected, n_folds, seed, test_fraction, standardize, source=None):
    """Held-out predictions of every model on ``frame``; returns (rows mask, preds).

    ``source`` maps patient ids to the original patient; copies of one
    original patient are kept on the same side of every split.
    """
    sd = SuperDataset(frame, grid, covariates)
    ids = np.unique(frame["patient_id"].to_numpy())
    if source is None:
        tests = split_patients(ids, n_folds, seed, test_fraction, events=[infected[i] for i in ids])
    else:
        src = np.array([source[i] for i in ids])
        uniq = np.unique(src)
        src_tests = split_patients(uniq, n_folds, seed, test_fraction, events=[infected[u] for u in uniq])
        tests = [ids[np.isin(src, t)] for t in src_tests]
    preds = [out_of_fold_cif(sd, list(covs), tests, standardize) for covs in covariate_sets.values()]
    evaluated = ~np.isnan(preds[0])
    return evaluated, [p[evaluated] for p in preds]


def _summary_vector(k, status, preds, n):
    lms, gl = [], []
    for p in preds:
        a, r = _landmark_aurocs_fast(k, status, p, n)
        lms.append(a)
        gl.append(auroc_global(a, r))
    return np.concatenate([gl, [gl[-1] - gl[0]], *lms])


def evaluate_models(
    super_dataset: SuperDataset,
    cohort: Sequence[PatientRecord],
    covariate_sets: Mapping[str, Sequence[str]],
    n_folds: int = 1,
    seed: int = 0,
    B: int = 200,
    level: float = 0.95,
    standardize: bool = False,
    test_fraction: float = 0.3,
    result_type=Evaluation,
    bootstrap: str = "refit",
) -> Evaluation:
    """Held-out CIF predictions, per-landmark and global AUROC with bootstrap CIs.

    ``n_folds=1`` uses a single patient-grouped split (``test_fraction`` held
    out, stratified by infection) and evaluates only the test patients;
    ``n_folds > 1`` evaluates every patient out of fold.

    ``bootstrap="refit"`` resamples patients, rebuilds the super-dataset from
    the resampled patients, re-splits (copies of a patient stay together),
    refits every model and re-evaluates.
    ``bootstrap="fixed"`` resamples patients over the fixed held-out
    predictions (cheaper; ignores fitting variability). All models share the
    same replicates, so the difference interval is paired.
    """
    if bootstrap not in ("refit", "fixed"):
        raise ConfigError(f"bootstrap must be 'refit' or 'fixed', got {bootstrap!r}")
    infected = {p.id: p.cause == 1 for p in cohort}
    names = list(covariate_sets)
    grid = super_dataset.grid
    full = super_dataset.frame
    evaluated, preds = _validated(
        full, grid, super_dataset.covariates, covariate_sets, infected, n_folds, seed, test_fraction, standardize
    )
    sd = SuperDataset(full[evaluated].reset_index(drop=True), grid, super_dataset.covariates)

    per = [landmark_aurocs(sd, p) for p in preds]
    sizes = per[0][1]
    globals_ = [auroc_global(a, sizes) for a, _ in per]
    n = grid.n
    m = len(names)

    if bootstrap == "fixed":
        f = sd.frame
        k = f["k"].to_numpy(int)
        status = f["status"].to_numpy(int)
        rows = _rows_by_patient(f)

        def statistic(units):
            idx = np.concatenate([rows[u] for u in units])
            return _summary_vector(k[idx], status[idx], [p[idx] for p in preds], n)
    else:
        rows = _rows_by_patient(full)
        k_all = full["k"].to_numpy(int)
        status_all = full["status"].to_numpy(int)

        def statistic(units):
            idx = np.concatenate([rows[u] for u in units])
            new_ids = np.repeat(np.arange(len(units)), [len(rows[u]) for u in units])
            frame = full.iloc[idx].reset_index(drop=True)
            frame["patient_id"] = new_ids
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", MonotoneLikelihoodWarning)
                ev_b, preds_b = _validated(
                    frame, grid, super_dataset.covariates, covariate_sets, infected, n_folds, seed, test_fraction,
                    standardize, source=dict(enumerate(units)),
                )
            return _summary_vector(k_all[idx][ev_b], status_all[idx][ev_b], preds_b, n)

    ci = bootstrap_ci(statistic, sorted(rows), B, level, seed)

    def part(sl):
        return BootstrapCI(ci.lo[sl], ci.hi[sl], ci.replicates[:, sl], ci.failures, level)

    def scalar(j):
        return BootstrapCI(float(ci.lo[j]), float(ci.hi[j]), ci.replicates[:, j], ci.failures, level)

    models = {}
    for i, name in enumerate(names):
        lm = slice(m + 1 + i * n, m + 1 + (i + 1) * n)
        models[name] = ModelEvaluation(name, list(covariate_sets[name]), preds[i], per[i][0], globals_[i], scalar(i), part(lm))
    return result_type(sd, sizes, models, scalar(m) if m >= 2 else None)


def compare_models(
    super_dataset: SuperDataset,
    cohort: Sequence[PatientRecord],
    n_folds: int = 1,
    seed: int = 0,
    B: int = 200,
    level: float = 0.95,
    standardize: bool = False,
    test_fraction: float = 0.3,
    bootstrap: str = "refit",
) -> Comparison:
    """pi1 (low-frequency covariates) against pi2 (plus the CNN score)."""
    sets = {"pi1": PI1_COVARIATES, "pi2": PI2_COVARIATES}
    return evaluate_models(
        super_dataset, cohort, sets, n_folds, seed, B, level, standardize, test_fraction, Comparison, bootstrap
    )


def run_comparison(
    cohort: Sequence[PatientRecord],
    settings: CNNSettings = CNNSettings(),
    grid: LandmarkGrid = LandmarkGrid(),
    n_folds: int = 1,
    B: int = 200,
    seed: Optional[int] = None,
    bootstrap: str = "refit",
) -> tuple[CrossfitResult, Comparison]:
    """Cross-fitted CNN scores, then the pi1/pi2 comparison on the landmark grid."""
    seed = settings.seed if seed is None else seed
    crossfit = crossfit_scores(cohort, settings)
    sd = build_super_dataset(cohort, crossfit.scores, grid)
    return crossfit, compare_models(sd, cohort, n_folds, seed, B, bootstrap=bootstrap)


# ---------------------------------------------------------------------------
# CIF trajectories and warning lead time

def quartile_trajectories(super_dataset: SuperDataset, model, cause: int = 1, n_points: int = 25) -> pd.DataFrame:
    """CIF curves over each landmark window for the median covariate row of
    every quartile of the cause-specific linear predictor."""
    f = super_dataset.frame
    cov = model.covariates
    out = []
    for k, idx in f.groupby("k").indices.items():
        t_lm = float(super_dataset.grid.times[k])
        Z = f.iloc[idx][cov].to_numpy(float)
        lp = model.causes[cause].linear_predictor(Z, t_lm)
        cuts = np.quantile(lp, [0.25, 0.5, 0.75])
        q = np.searchsorted(cuts, lp, side="right")
        grid_t = np.linspace(t_lm, t_lm + super_dataset.grid.w, n_points)
        for quart in range(4):
            members = np.flatnonzero(q == quart)
            if len(members) == 0:
                continue
            rep = members[np.argsort(lp[members], kind="stable")[len(members) // 2]]
            times, _, F = cif_curves(model, Z[rep], t_lm)
            pos = np.searchsorted(times, grid_t, side="right")
            vals = np.where(pos > 0, F[cause][0][np.maximum(pos - 1, 0)], 0.0)
            out += [dict(t_lm=t_lm, quartile=quart + 1, t=t, cif=v) for t, v in zip(grid_t, vals)]
    return pd.DataFrame(out, columns=["t_lm", "quartile", "t", "cif"])


def warning_lead_times(super_dataset: SuperDataset, predictions, cohort: Sequence[PatientRecord], threshold: float = 0.08) -> pd.DataFrame:
    """Hours between the first landmark whose predicted CIF reaches ``threshold``
    and the infection, for every infected patient that was ever at risk."""
    f = super_dataset.frame.assign(pred=np.asarray(predictions))
    onset = {p.id: p.infection_time for p in cohort if p.cause == 1}
    rows = []
    for pid, g in f[f["patient_id"].isin(list(onset))].groupby("patient_id"):
        hit = g[g["pred"] >= threshold]
        first = float(hit["t_lm"].min()) if len(hit) else np.nan
        rows.append(dict(patient_id=int(pid), onset=onset[pid], first_warning=first, lead_hours=onset[pid] - first))
    return pd.DataFrame(rows, columns=["patient_id", "onset", "first_warning", "lead_hours"])


def fit_pi_models(super_dataset: SuperDataset, standardize: bool = False):
    return (
        fit_competing_risks(super_dataset, PI1_COVARIATES, standardize),
        fit_competing_risks(super_dataset, PI2_COVARIATES, standardize),
    )


# ---------------------------------------------------------------------------
# Day-specific CNNs for the clustering analysis

def day_band_instances(
    instances: Sequence[TimeSeriesInstance],
    cohort: Sequence[PatientRecord],
    day: float,
    band_hours: float = 48.0,
) -> list[TimeSeriesInstance]:
    """Instances whose window ends within ``band_hours`` of day ``day`` for
    patients still at risk 24 hours before the window end."""
    t = 24.0 * day
    event = {p.id: p.event_time for p in cohort}
    return [
        inst for inst in instances
        if abs(inst.interval.end - t) <= band_hours and event[inst.patient_id] > inst.interval.end - 24.0
    ]


def day_models(
    cohort: Sequence[PatientRecord],
    days: Sequence[int] = (3, 7, 10),
    settings: CNNSettings = CNNSettings(),
    band_hours: float = 48.0,
) -> dict:
    """day -> [(ScoreModel, test instances)] from a patient-grouped k-fold fit."""
    instances = build_instances(cohort, settings.width, settings.shifts)
    out = {}
    for day in days:
        pool = undersample(day_band_instances(instances, cohort, day, band_hours), settings.ratio, settings.seed)
        res = kfold_evaluate(pool, settings.k, settings.arch, settings.train, settings.seed, bin_minutes=settings.bin_minutes)
        log.info("day %s CNN mean AUROC %.3f", day, res.mean_auroc)
        out[day] = [(m, [pool[i] for i in idx]) for m, idx in zip(res.models, res.test_indices)]
    return out


__all__ = [
    "CNNSettings", "Comparison", "CrossfitResult", "Evaluation", "ModelEvaluation", "ScoreModel",
    "compare_models", "crossfit_scores", "evaluate_models",
    "day_band_instances", "day_models", "fit_pi_models", "quartile_trajectories", "run_comparison",
    "warning_lead_times",
]
