"""Dynamic discrimination, bootstrap intervals and covariate impact."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
import pandas as pd

from ..errors import BootstrapError, DeepLMError, UndefinedMetricError
from ..metrics import auroc
from .cox import fit_competing_risks
from .predict import predict_rows
from .superdata import SuperDataset

log = logging.getLogger(__name__)


def auroc_at_landmark(super_dataset: SuperDataset, cif_predictions, k: int) -> tuple[float, int]:
    """AUROC of F̂_1(t_LM + w) at landmark ``k``: cases are status-1 rows.

    Returns ``(auroc, risk_set_size)``; the AUROC is NaN when a class is absent.
    """
    f = super_dataset.frame
    sel = (f["k"] == k).to_numpy()
    size = int(sel.sum())
    labels = (f["status"].to_numpy()[sel] == 1).astype(int)
    try:
        return auroc(np.asarray(cif_predictions)[sel], labels), size
    except UndefinedMetricError:
        return float("nan"), size


def landmark_aurocs(super_dataset: SuperDataset, cif_predictions) -> tuple[np.ndarray, np.ndarray]:
    res = [auroc_at_landmark(super_dataset, cif_predictions, k) for k in range(super_dataset.grid.n)]
    return np.array([r[0] for r in res]), np.array([r[1] for r in res])


def auroc_global(per_landmark_aurocs, risk_set_sizes) -> float:
    """Risk-set weighted mean of the defined per-landmark AUROCs."""
    a = np.asarray(per_landmark_aurocs, dtype=float)
    r = np.asarray(risk_set_sizes, dtype=float)
    ok = np.isfinite(a) & (r > 0)
    if not ok.any():
        raise UndefinedMetricError("AUROC is undefined at every landmark")
    return float(np.sum(r[ok] * a[ok]) / np.sum(r[ok]))


def global_auroc_of(super_dataset: SuperDataset, cif_predictions) -> float:
    return auroc_global(*landmark_aurocs(super_dataset, cif_predictions))


@dataclass
class BootstrapCI:
    lo: Union[float, np.ndarray]
    hi: Union[float, np.ndarray]
    replicates: np.ndarray
    failures: int = 0
    level: float = 0.95

    def contains(self, value) -> bool:
        return bool(np.all((self.lo <= value) & (value <= self.hi)))


def bootstrap_ci(
    statistic: Callable[[list], float],
    units: Sequence,
    B: int = 200,
    level: float = 0.95,
    seed: int = 0,
    max_failure_rate: float = 0.2,
) -> BootstrapCI:
    """Percentile interval of ``statistic`` over resamples of ``units``.

    ``units`` are patients (ids or records); each replicate passes a list of
    ``len(units)`` units drawn with replacement. Replicates raising a package
    error count as failures. A vector-valued statistic gives elementwise
    intervals.
    """
    if B < 50:
        raise ValueError(f"B must be >= 50, got {B}")
    units = list(units)
    rng = np.random.default_rng(seed)
    values, failures = [], 0
    for _ in range(B):
        draw = rng.integers(0, len(units), len(units))
        try:
            values.append(np.asarray(statistic([units[i] for i in draw]), dtype=float))
        except (DeepLMError, np.linalg.LinAlgError) as exc:
            failures += 1
            log.debug("bootstrap replicate failed: %s", exc)
    if failures > max_failure_rate * B:
        raise BootstrapError(f"{failures} of {B} bootstrap replicates failed")
    values = np.array(values)
    alpha = (1.0 - level) / 2.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN slices of vector statistics
        lo, hi = np.nanquantile(values, [alpha, 1.0 - alpha], axis=0)
    if values.ndim == 1:
        lo, hi = float(lo), float(hi)
    return BootstrapCI(lo, hi, values, failures, level)


def split_patients(patient_ids, n_folds: int = 1, seed: int = 0, test_fraction: float = 0.3, events=None) -> list:
    """Patient-grouped test sets: one random split or ``n_folds`` folds.

    ``events`` (optional, aligned with ``patient_ids``) stratifies the split.
    """
    ids = np.asarray(sorted(set(patient_ids)))
    rng = np.random.default_rng(seed)
    if events is None:
        groups = [ids[rng.permutation(len(ids))]]
    else:
        ev = dict(zip(patient_ids, events))
        flag = np.array([bool(ev[i]) for i in ids])
        groups = [g[rng.permutation(len(g))] for g in (ids[flag], ids[~flag])]
    if n_folds <= 1:
        return [np.concatenate([g[: int(round(test_fraction * len(g)))] for g in groups])]
    folds = [[] for _ in range(n_folds)]
    offset = 0
    for g in groups:
        for j, pid in enumerate(g):
            folds[(offset + j) % n_folds].append(pid)
        offset += len(g)
    return [np.array(sorted(f)) for f in folds]


def out_of_fold_cif(
    super_dataset: SuperDataset,
    covariates: Optional[Sequence[str]],
    test_sets: Sequence,
    standardize: bool = False,
    cause: int = 1,
) -> np.ndarray:
    """F̂_cause(t_LM + w) for rows of each test set, from a model fit on the rest.

    Rows not in any test set are NaN.
    """
    f = super_dataset.frame
    out = np.full(len(f), np.nan)
    pids = f["patient_id"].to_numpy()
    for test in test_sets:
        in_test = np.isin(pids, test)
        train = SuperDataset(f[~in_test].reset_index(drop=True), super_dataset.grid, super_dataset.covariates)
        test_sd = SuperDataset(f[in_test].reset_index(drop=True), super_dataset.grid, super_dataset.covariates)
        model = fit_competing_risks(train, covariates, standardize)
        out[in_test] = predict_rows(model, test_sd, cause)
    return out


def covariate_impact(
    super_dataset: SuperDataset,
    full_covariate_list: Sequence[str],
    test: Optional[SuperDataset] = None,
    standardize: bool = False,
) -> pd.DataFrame:
    """Relative per-landmark AUROC change from dropping each covariate.

    Entry (Z, k) is ``(AUROC_full - AUROC_without_Z) / AUROC_without_Z`` at
    landmark ``k``; the reduced model is refit without Z and its time
    interactions. AUROCs are computed on ``test`` (default: the fitting data).
    Failed refits leave NaN entries.
    """
    test = super_dataset if test is None else test
    full = fit_competing_risks(super_dataset, full_covariate_list, standardize)
    full_auc, _ = landmark_aurocs(test, predict_rows(full, test))
    rows = {}
    for cov in full_covariate_list:
        reduced_list = [c for c in full_covariate_list if c != cov]
        try:
            reduced = fit_competing_risks(super_dataset, reduced_list, standardize)
            red_auc, _ = landmark_aurocs(test, predict_rows(reduced, test))
            with np.errstate(divide="ignore", invalid="ignore"):
                rows[cov] = (full_auc - red_auc) / red_auc
        except DeepLMError as exc:
            log.warning("reduced model without %s failed: %s", cov, exc)
            rows[cov] = np.full(super_dataset.grid.n, np.nan)
    return pd.DataFrame.from_dict(rows, orient="index", columns=[float(t) for t in super_dataset.grid.times])
