"""Cause-specific Cox super-model on a landmark super-dataset.

The partial likelihood is stratified by landmark index (one unspecified
baseline hazard per landmark) and handles tied event times with Breslow's
approximation. Rows whose status is the competing cause are censored.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..errors import ConvergenceError, DataError
from .superdata import Design, LandmarkGrid, SuperDataset, expand_design

log = logging.getLogger(__name__)


# Linear predictors are clipped to this range before exponentiation so capped
# (diverging) fits still give finite baselines and predictions.
LP_BOUND = 700.0


class MonotoneLikelihoodWarning(RuntimeWarning):
    """Partial likelihood keeps increasing as a coefficient diverges."""


@dataclass
class _Stratum:
    rows: np.ndarray  # indices into the design, sorted by time ascending
    time: np.ndarray
    event: np.ndarray
    first_at_risk: np.ndarray  # per distinct event time: first sorted index with time >= t
    n_events: np.ndarray
    event_times: np.ndarray


def _prepare(time, event, strata) -> list[_Stratum]:
    out = []
    for s in np.unique(strata):
        idx = np.flatnonzero(strata == s)
        order = idx[np.argsort(time[idx], kind="stable")]
        t = time[order]
        e = event[order]
        ev_times, counts = np.unique(t[e], return_counts=True)
        out.append(_Stratum(order, t, e, np.searchsorted(t, ev_times, side="left"), counts, ev_times))
    return out


def _suffix(a: np.ndarray) -> np.ndarray:
    return np.cumsum(a[::-1], axis=0)[::-1]


def partial_loglik(beta, X, strata_data: list[_Stratum], need_hessian: bool = True):
    """Stratified Breslow log partial likelihood, score vector and Hessian."""
    p = X.shape[1]
    ll = 0.0
    grad = np.zeros(p)
    hess = np.zeros((p, p))
    for st in strata_data:
        if len(st.event_times) == 0:
            continue
        Xs = X[st.rows]
        eta = Xs @ beta
        c = eta.max()
        w = np.exp(eta - c)
        S0 = _suffix(w)[st.first_at_risk]
        S1 = _suffix(w[:, None] * Xs)[st.first_at_risk]
        d = st.n_events
        ll += eta[st.event].sum() - np.sum(d * (c + np.log(S0)))
        xbar = S1 / S0[:, None]
        grad += Xs[st.event].sum(axis=0) - (d[:, None] * xbar).sum(axis=0)
        if need_hessian:
            S2 = _suffix(w[:, None, None] * Xs[:, :, None] * Xs[:, None, :])[st.first_at_risk]
            hess -= np.einsum("u,uij->ij", d, S2 / S0[:, None, None] - xbar[:, :, None] * xbar[:, None, :])
    return ll, grad, hess


@dataclass
class CauseFit:
    cause: int
    design: Design
    beta: np.ndarray
    se: np.ndarray
    loglik: float
    loglik_null: float
    n_iter: int
    converged: bool
    grad_max: float
    baseline: dict = field(default_factory=dict)  # k -> (event times, increments)
    notes: list = field(default_factory=list)

    @property
    def covariates(self) -> list:
        return self.design.covariates

    def coefficient_triples(self) -> dict:
        """covariate -> (beta0, beta1, beta2), time measured in days."""
        b = self.design.triples(self.beta)
        return {c: tuple(float(v) for v in b[i]) for i, c in enumerate(self.covariates)}

    def beta_at(self, t_lm: float) -> np.ndarray:
        """Time-varying coefficient vector at landmark ``t_lm`` (hours)."""
        t = t_lm / self.design.time_unit_hours
        return self.design.triples(self.beta) @ np.array([1.0, t, t * t])

    def linear_predictor(self, Z, t_lm) -> np.ndarray:
        if not self.covariates:
            return np.zeros(np.atleast_2d(Z).shape[0])
        return self.design.transform(Z, t_lm) @ self.beta


@dataclass
class LandmarkCoxModel:
    grid: LandmarkGrid
    causes: dict  # cause -> CauseFit

    @property
    def covariates(self) -> list:
        return next(iter(self.causes.values())).covariates


def _design_and_strata(sd: SuperDataset, design: Design):
    f = sd.frame
    Z = f[design.covariates].to_numpy(float) if design.covariates else np.empty((len(f), 0))
    X = design.transform(Z, f["t_lm"].to_numpy(float)) if design.covariates else np.empty((len(f), 0))
    return X, f["time"].to_numpy(float), f["k"].to_numpy(int)


def fit_landmark_supermodel(
    super_dataset: SuperDataset,
    cause: int,
    covariates: Optional[Sequence[str]] = None,
    standardize: bool = False,
    max_iter: int = 100,
    grad_tol: float = 1e-8,
    rel_ll_tol: float = 1e-10,
    max_abs_coef: float = 50.0,
    design: Optional[Design] = None,
) -> CauseFit:
    """Newton-Raphson with step halving on the stratified Breslow likelihood."""
    if design is None:
        design = expand_design(super_dataset, covariates, standardize)
    X, time, strata = _design_and_strata(super_dataset, design)
    event = super_dataset.frame["status"].to_numpy(int) == cause
    if not event.any():
        raise DataError(f"no events of cause {cause} in the super-dataset")
    p = X.shape[1]
    if p and np.linalg.matrix_rank(X) < p:
        raise DataError("design matrix is rank deficient")
    sdata = _prepare(time, event, strata)
    beta = np.zeros(p)
    ll, grad, hess = partial_loglik(beta, X, sdata)
    ll_null = ll
    notes = []
    converged = p == 0 or np.max(np.abs(grad)) < grad_tol
    it = 0

    def newton(beta, ll, grad, hess):
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        scale = 1.0
        for _ in range(60):
            cand = beta - scale * step
            ll_c, grad_c, hess_c = partial_loglik(cand, X, sdata)
            if np.isfinite(ll_c) and ll_c >= ll - 1e-12 * abs(ll):
                return step, cand, ll_c, grad_c, hess_c
            scale *= 0.5
        raise ConvergenceError(
            f"step halving failed for cause {cause} after {it} iterations",
            gradient_norm=float(np.max(np.abs(grad))),
        )

    while not converged and it < max_iter:
        it += 1
        _, beta_n, ll_n, grad, hess = newton(beta, ll, grad, hess)
        rel = abs(ll_n - ll) / max(abs(ll), 1e-300)
        beta, ll = beta_n, ll_n
        converged = np.max(np.abs(grad)) < grad_tol or rel < rel_ll_tol
    # The likelihood criterion can stop early along flat, nearly collinear
    # directions. Extra Newton steps settle a finite optimum within a few
    # (quadratically convergent) steps, while a coefficient drifting to
    # infinity keeps taking steps of similar size until the score underflows.
    drifting = False
    if p and converged:
        for n_polish in range(25):
            step, beta_n, ll_n, grad_n, hess_n = newton(beta, ll, grad, hess)
            if np.all(np.abs(step) <= 1e-6 * (1.0 + np.abs(beta))):
                break
            beta, ll, grad, hess = beta_n, ll_n, grad_n, hess_n
        drifting = n_polish >= 8
    if drifting:
        # The cap applies to the effect of a one-SD change of each design column.
        bound = max_abs_coef / np.maximum(X.std(axis=0), 1e-12)
        warnings.warn(
            f"cause {cause}: coefficients diverge (monotone likelihood); capping at {max_abs_coef} per design-column SD",
            MonotoneLikelihoodWarning,
            stacklevel=2,
        )
        beta = np.clip(beta, -bound, bound)
        ll, grad, hess = partial_loglik(beta, X, sdata)
        notes.append("monotone likelihood: coefficients capped")
    if not converged and not notes:
        raise ConvergenceError(
            f"cause {cause} did not converge in {max_iter} iterations "
            f"(max |score| = {np.max(np.abs(grad)):.3e})",
            gradient_norm=float(np.max(np.abs(grad))),
        )
    try:
        cov = np.linalg.inv(-hess) if p else np.zeros((0, 0))
        se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        se = np.full(p, np.nan)
    fit = CauseFit(
        cause, design, beta, se, float(ll), float(ll_null), it, bool(converged),
        float(np.max(np.abs(grad))) if p else 0.0, notes=notes,
    )
    fit.baseline = breslow_baseline(fit, super_dataset, cause)
    log.debug("cause %d: %d iterations, loglik %.6f, max|score| %.2e", cause, it, ll, fit.grad_max)
    return fit


def breslow_baseline(fit: CauseFit, super_dataset: SuperDataset, cause: Optional[int] = None) -> dict:
    """Per-stratum Breslow increments ``d_j(t) / sum_{risk set} exp(lp)``."""
    cause = fit.cause if cause is None else cause
    X, time, strata = _design_and_strata(super_dataset, fit.design)
    event = super_dataset.frame["status"].to_numpy(int) == cause
    eta = X @ fit.beta if X.shape[1] else np.zeros(len(time))
    out = {}
    for st in _prepare(time, event, strata):
        k = int(strata[st.rows[0]])
        w = np.exp(np.clip(eta[st.rows], -LP_BOUND, LP_BOUND))
        S0 = _suffix(w)[st.first_at_risk]
        out[k] = (st.event_times.copy(), st.n_events / S0)
    return out


def fit_competing_risks(
    super_dataset: SuperDataset,
    covariates: Optional[Sequence[str]] = None,
    standardize: bool = False,
    causes: Sequence[int] = (1, 2),
    **kwargs,
) -> LandmarkCoxModel:
    design = expand_design(super_dataset, covariates, standardize)
    fits = {j: fit_landmark_supermodel(super_dataset, j, design=design, **kwargs) for j in causes}
    return LandmarkCoxModel(super_dataset.grid, fits)


def model_to_text(model: LandmarkCoxModel) -> str:
    """Coefficient triples per cause plus the baseline increment table per stratum."""
    grid = model.grid
    lines = [f"# landmark grid s0={grid.s0!r} s1={grid.s1!r} n={grid.n} w={grid.w!r}; time in days inside the expansion"]
    for j in sorted(model.causes):
        fit = model.causes[j]
        d = fit.design
        lines.append(f"[cause {j}]")
        lines.append(f"loglik = {fit.loglik!r}")
        lines.append(f"loglik_null = {fit.loglik_null!r}")
        lines.append(f"iterations = {fit.n_iter}")
        lines.append(f"converged = {str(fit.converged).lower()}")
        lines.append(f"max_abs_score = {fit.grad_max!r}")
        for note in fit.notes:
            lines.append(f"note = {note}")
        lines.append("covariate\tcenter\tscale\tbeta0\tbeta1\tbeta2\tse0\tse1\tse2")
        se = d.triples(fit.se) if len(fit.se) else np.empty((0, 3))
        for i, (c, b) in enumerate(fit.coefficient_triples().items()):
            vals = [d.center[i], d.scale[i], *b, *se[i]]
            lines.append("\t".join([c] + [repr(float(v)) for v in vals]))
        lines.append("stratum\tt_lm\ttime\tincrement")
        for k in sorted(fit.baseline):
            for t, inc in zip(*fit.baseline[k]):
                lines.append(f"{k}\t{grid.times[k]!r}\t{float(t)!r}\t{float(inc)!r}")
    return "\n".join(lines) + "\n"
