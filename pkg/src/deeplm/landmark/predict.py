"""Plug-in survival and cumulative incidence from a fitted model pair."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .cox import LP_BOUND, LandmarkCoxModel
from .superdata import SuperDataset


def _stratum_hazards(model: LandmarkCoxModel, k: int):
    causes = sorted(model.causes)
    times = np.unique(np.concatenate([model.causes[j].baseline.get(k, (np.empty(0),))[0] for j in causes]))
    h = np.zeros((len(causes), len(times)))
    for c, j in enumerate(causes):
        if k in model.causes[j].baseline:
            et, inc = model.causes[j].baseline[k]
            h[c, np.searchsorted(times, et)] = inc
    return causes, times, h


def cif_curves(model: LandmarkCoxModel, Z, t_lm: float):
    """Event times of the landmark stratum with Ŝ and F̂_j after each time.

    Returns ``(times, S, F)`` with ``S`` of shape (n, m) and ``F`` a dict
    cause -> (n, m), for covariate rows ``Z`` (n, p).
    """
    k = model.grid.index_of(t_lm)
    causes, times, h = _stratum_hazards(model, k)
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    lp = np.stack([model.causes[j].linear_predictor(Z, t_lm) for j in causes])  # (J, n)
    dL = h[:, None, :] * np.exp(np.clip(lp, -LP_BOUND, LP_BOUND))[:, :, None]  # (J, n, m)
    total = dL.sum(axis=0)
    over = total > 1.0
    if np.any(over):
        # Cap the all-cause jump at 1 so that Ŝ stays in [0, 1].
        dL = np.where(over[None], dL / np.where(over, total, 1.0)[None], dL)
        total = np.minimum(total, 1.0)
    S = np.cumprod(1.0 - total, axis=1)
    S_before = np.concatenate([np.ones((Z.shape[0], 1)), S[:, :-1]], axis=1)
    F = {j: np.cumsum(S_before * dL[c], axis=1) for c, j in enumerate(causes)}
    return times, S, F


def _check_window(model, t_lm, t):
    if not (t_lm - 1e-9 <= t <= t_lm + model.grid.w + 1e-9):
        raise ValueError(f"t={t} lies outside the prediction window [{t_lm}, {t_lm + model.grid.w}]")


def predict_survival(model: LandmarkCoxModel, z, t_lm: float, t: float):
    _check_window(model, t_lm, t)
    times, S, _ = cif_curves(model, z, t_lm)
    n = np.searchsorted(times, t, side="right")
    out = S[:, n - 1] if n else np.ones(S.shape[0])
    return float(out[0]) if np.ndim(z) == 1 else out


def predict_cif(model: LandmarkCoxModel, z, cause: int, t_lm: float, t: float):
    _check_window(model, t_lm, t)
    times, _, F = cif_curves(model, z, t_lm)
    n = np.searchsorted(times, t, side="right")
    out = F[cause][:, n - 1] if n else np.zeros(F[cause].shape[0])
    return float(out[0]) if np.ndim(z) == 1 else out


def predict_rows(model: LandmarkCoxModel, super_dataset: SuperDataset, cause: int = 1, horizon: Optional[float] = None) -> np.ndarray:
    """F̂_cause(t_LM + horizon) for every row of ``super_dataset`` (horizon defaults to w)."""
    f = super_dataset.frame
    horizon = model.grid.w if horizon is None else horizon
    out = np.full(len(f), np.nan)
    cov = model.covariates
    for k, idx in f.groupby("k").indices.items():
        t_lm = float(model.grid.times[k])
        Z = f.iloc[idx][cov].to_numpy(float) if cov else np.zeros((len(idx), 0))
        times, _, F = cif_curves(model, Z, t_lm)
        n = np.searchsorted(times, t_lm + horizon, side="right")
        out[idx] = F[cause][:, n - 1] if n else 0.0
    return out
