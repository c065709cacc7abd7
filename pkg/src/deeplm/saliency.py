"""SMOE-scale saliency over activated feature maps and condition clustering.

The SMOE scale of a depth column is the maximum-likelihood Gamma scale
parameter with the shape replaced by its first-order estimate, which reduces
to ``mean * mean_j log(mean / chi_j)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .convnet.network import forward
from .errors import ConfigError, ContractViolation
from .instances import TimeSeriesInstance, stack
from .metrics import ks_two_sample

SMOE_EPS = 1e-7
CONDITION_NAMES = ("Tachycardia", "Hypotension", "Desaturation", "Hyperventilation")
# Table thresholds in physical units: HR >= 90, mean ABP <= 80, SaO2 <= 95, RR >= 24.
TACHYCARDIA_HR = 90.0
HYPOTENSION_MAP = 80.0
DESATURATION_SAO2 = 95.0
HYPERVENTILATION_RR = 24.0


# ---------------------------------------------------------------------------
# Special functions

def digamma(x: float) -> float:
    """psi(x) for x > 0 via upward recurrence and the asymptotic series."""
    if x <= 0:
        raise ValueError("digamma is only implemented for x > 0")
    acc = 0.0
    while x < 10.0:
        acc -= 1.0 / x
        x += 1.0
    inv2 = 1.0 / (x * x)
    series = inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (1.0 / 240 - inv2 * (1.0 / 132 - inv2 * 691.0 / 32760)))))
    return acc + math.log(x) - 0.5 / x - series


def trigamma(x: float) -> float:
    if x <= 0:
        raise ValueError("trigamma is only implemented for x > 0")
    acc = 0.0
    while x < 10.0:
        acc += 1.0 / (x * x)
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv + 0.5 * inv2 + inv * inv2 * (1.0 / 6 - inv2 * (1.0 / 30 - inv2 * (1.0 / 42 - inv2 * (1.0 / 30 - inv2 * 5.0 / 66))))
    return acc + series


def gamma_shape_initial(s: float) -> float:
    """Closed-form first-order root of ``log k - psi(k) = s``."""
    return (0.25 + 0.5 * math.sqrt(1.0 + 3.0 * s)) / s


def estimate_gamma_shape(s: float, tol: float = 1e-10, max_iter: int = 100) -> float:
    """Solve ``log k - psi(k) = s`` for the Gamma shape ``k``.

    Newton iterations start from :func:`gamma_shape_initial`; if an iterate
    leaves (0, inf) the root is bracketed and bisected instead.
    """
    if not s > 0:
        raise ValueError(f"s must be positive, got {s}")

    def f(k):
        return math.log(k) - digamma(k) - s

    k = gamma_shape_initial(s)
    for _ in range(max_iter):
        fk = f(k)
        if abs(fk) < tol:
            return k
        step = fk / (1.0 / k - trigamma(k))
        k_new = k - step
        if not (k_new > 0 and math.isfinite(k_new)):
            break
        k = k_new
    if abs(f(k)) < tol:
        return k
    return _bisect_shape(f, s, tol)


def _bisect_shape(f, s, tol):
    lo = hi = gamma_shape_initial(s)
    while f(lo) < 0:
        lo /= 2.0
    while f(hi) > 0:
        hi *= 2.0
    for _ in range(500):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if abs(fm) < tol:
            return mid
        if fm > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Saliency maps

def smoe_scale(activated: np.ndarray) -> np.ndarray:
    """SMOE scale per spatial position of a (..., depth, length) activated map."""
    chi = np.asarray(activated, dtype=float)
    if chi.ndim < 2 or chi.shape[-2] < 2:
        raise ValueError("activated map needs a depth axis of size >= 2")
    if np.any(chi < 0):
        raise ContractViolation("SMOE scale needs non-negative (post-ReLU) activations")
    mean = chi.mean(axis=-2)
    safe_mean = np.maximum(mean, SMOE_EPS)
    logs = np.log(safe_mean[..., None, :] / np.maximum(chi, SMOE_EPS)).mean(axis=-2)
    return np.where(mean > 0, mean * logs, 0.0)


def gamma_fit_column(column: np.ndarray) -> tuple[float, float]:
    """(shape, scale) maximum-likelihood Gamma fit of one positive depth column."""
    x = np.maximum(np.asarray(column, dtype=float), SMOE_EPS)
    m = x.mean()
    s = math.log(m) - np.log(x).mean()
    if s <= 0:
        return math.inf, 0.0
    k = estimate_gamma_shape(s)
    return k, m / k


def _minmax(x: np.ndarray) -> np.ndarray:
    lo = x.min(axis=-1, keepdims=True)
    span = x.max(axis=-1, keepdims=True) - lo
    return np.where(span > 0, (x - lo) / np.where(span > 0, span, 1.0), 0.0)


def combine_saliency(per_layer_maps: Sequence[np.ndarray], layer_weights: Optional[Sequence[float]] = None, input_length: int = 160) -> np.ndarray:
    """Weighted average of min-max normalised, upsampled per-layer maps.

    Each map (shape ``(L_l,)`` or ``(batch, L_l)``) is repeated
    ``input_length // L_l`` times per position. Default weights are 1, 2, ...
    so deeper layers count more.
    """
    if layer_weights is None:
        layer_weights = np.arange(1, len(per_layer_maps) + 1, dtype=float)
    w = np.asarray(layer_weights, dtype=float)
    if w.shape != (len(per_layer_maps),):
        raise ValueError("need exactly one weight per layer map")
    if np.any(w < 0) or not np.any(w > 0):
        raise ValueError("layer weights must be non-negative and not all zero")
    total = None
    for weight, m in zip(w, per_layer_maps):
        m = np.asarray(m, dtype=float)
        length = m.shape[-1]
        if input_length % length:
            raise ContractViolation(f"map length {length} does not divide input length {input_length}")
        up = np.repeat(_minmax(m), input_length // length, axis=-1)
        total = weight * up if total is None else total + weight * up
    return total / w.sum()


@dataclass(frozen=True)
class SalientWindow:
    start_pos: int
    stop_pos: int  # exclusive
    start_hours: float
    end_hours: float
    minutes_per_position: int = 9

    @property
    def minute_slice(self) -> slice:
        return slice(self.start_pos * self.minutes_per_position, self.stop_pos * self.minutes_per_position)


def extract_salient_window(combined_map: np.ndarray, width_hours: float = 8.0, minutes_per_position: int = 9) -> SalientWindow:
    """Contiguous run of ``ceil(width * 60 / minutes)`` positions with maximal sum.

    Ties go to the earliest start.
    """
    x = np.asarray(combined_map, dtype=float)
    n = math.ceil(width_hours * 60.0 / minutes_per_position)
    if n > len(x):
        raise ValueError(f"window of {n} positions exceeds map length {len(x)}")
    sums = np.lib.stride_tricks.sliding_window_view(x, n).sum(axis=1)
    # sums that differ only by rounding count as ties
    tol = 1e-12 * max(1.0, float(np.max(np.abs(sums))))
    start = int(np.flatnonzero(sums >= sums.max() - tol)[0])
    span_hours = len(x) * minutes_per_position / 60.0
    return SalientWindow(
        start,
        start + n,
        start * minutes_per_position / 60.0,
        min((start + n) * minutes_per_position / 60.0, span_hours),
        minutes_per_position,
    )


def saliency_maps(network, X: np.ndarray, layer_weights=None, batch_size: int = 256):
    """Per-layer SMOE maps (list of (n, L_l)) and combined maps (n, input_length)."""
    X = np.asarray(X, dtype=float)
    n_blocks = network.arch.n_blocks
    per_layer = [[] for _ in range(n_blocks)]
    for i in range(0, len(X), batch_size):
        _, cache = forward(network, X[i:i + batch_size], mode="infer")
        for b in range(n_blocks):
            per_layer[b].append(smoe_scale(cache.activated_maps(b)))
    per_layer = [np.concatenate(m) for m in per_layer]
    return per_layer, combine_saliency(per_layer, layer_weights, network.arch.input_length)


# ---------------------------------------------------------------------------
# Clinical condition classes

@dataclass(frozen=True)
class ConditionClass:
    id: int
    imputed_only: bool = False

    @property
    def conditions(self) -> list[str]:
        """Condition names, highest bit first (as listed in the class table)."""
        return [CONDITION_NAMES[b] for b in reversed(range(4)) if self.id >> b & 1]

    @property
    def label(self) -> str:
        return ", ".join(self.conditions) or "None"


def condition_bits(hr: float, map_: float, sao2: float, rr: float) -> int:
    return (
        int(hr >= TACHYCARDIA_HR)
        | int(map_ <= HYPOTENSION_MAP) << 1
        | int(sao2 <= DESATURATION_SAO2) << 2
        | int(rr >= HYPERVENTILATION_RR) << 3
    )


def classify_conditions(raw_instance, window: SalientWindow) -> ConditionClass:
    """Condition class from vital means over ``window`` of a physical-unit instance.

    ``raw_instance`` is a (6, minutes) LOCF-imputed matrix or an instance.
    """
    m = raw_instance.matrix if isinstance(raw_instance, TimeSeriesInstance) else np.asarray(raw_instance)
    seg = m[:, window.minute_slice]
    if seg.shape[1] == 0:
        raise ValueError("window lies outside the instance")
    hr, map_, _, sao2, rr = seg[:5].mean(axis=1)
    imputed_only = bool(m.shape[0] > 5 and np.all(seg[5] >= 1.0))
    return ConditionClass(condition_bits(hr, map_, sao2, rr), imputed_only)


@dataclass
class ClusterReport:
    histogram: pd.DataFrame  # day, label, class, count
    ks: dict  # day -> {"statistic", "p_value", "n_infected", "n_control"}
    records: pd.DataFrame  # one row per classified test instance


def cluster_report(
    day_models: Mapping[int, Sequence[tuple]],
    days: Sequence[int] = (3, 7, 10),
    layer_weights=None,
    width_hours: float = 8.0,
) -> ClusterReport:
    """Histogram salient-window condition classes by label, per day model.

    ``day_models[day]`` is a sequence of ``(score_model, test_instances)``
    pairs, one per cross-validation fold.
    """
    missing = [d for d in days if d not in day_models]
    if missing:
        raise ConfigError(f"no trained models supplied for day(s) {missing}")
    rows = []
    for day in days:
        for fold, (model, test_instances) in enumerate(day_models[day]):
            if len(test_instances) == 0:
                continue
            raw, y = stack(test_instances)
            _, combined = saliency_maps(model.network, model.preprocess(raw), layer_weights)
            for inst, lab, cmap, mat in zip(test_instances, y, combined, raw):
                win = extract_salient_window(cmap, width_hours, model.bin_minutes)
                cls = classify_conditions(mat, win)
                rows.append(
                    dict(day=day, fold=fold, patient_id=inst.patient_id, label=int(lab), cls=cls.id,
                         imputed_only=cls.imputed_only, window_start=win.start_hours, window_end=win.end_hours)
                )
    records = pd.DataFrame(rows, columns=["day", "fold", "patient_id", "label", "cls", "imputed_only", "window_start", "window_end"])
    hist_rows, ks = [], {}
    for day in days:
        sub = records[records["day"] == day]
        for label in (0, 1):
            counts = np.bincount(sub.loc[sub["label"] == label, "cls"].to_numpy(int), minlength=16)
            hist_rows += [dict(day=day, label=label, cls=c, count=int(counts[c])) for c in range(16)]
        inf = sub.loc[sub["label"] == 1, "cls"].to_numpy()
        ctl = sub.loc[sub["label"] == 0, "cls"].to_numpy()
        if len(inf) and len(ctl):
            d, p = ks_two_sample(inf, ctl)
        else:
            d, p = float("nan"), float("nan")
        ks[day] = dict(statistic=d, p_value=p, n_infected=int(len(inf)), n_control=int(len(ctl)))
    histogram = pd.DataFrame(hist_rows, columns=["day", "label", "cls", "count"]).rename(columns={"cls": "class"})
    return ClusterReport(histogram, ks, records.rename(columns={"cls": "class"}))
