"""Training, cross-validation and risk-score extraction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from ..cohortsim import PatientRecord
from ..errors import EmptyClassError, SplitError
from ..instances import ChannelScaler, TimeSeriesInstance, fit_scaler, imputed_record, paa, rescale, stack
from ..metrics import auroc
from .network import Network, NetworkArch, backward, bce_loss, build_network, forward, predict
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def train(network: Network, X: np.ndarray, y: np.ndarray, config: TrainConfig = TrainConfig()):
    """Mini-batch ADAM on binary cross-entropy.

    Works on a copy; returns ``(trained_network, per_epoch_loss)``. The loss
    is the batch-size weighted mean of the training-mode batch losses.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(X) == 0:
        raise EmptyClassError("empty training set")
    if len(np.unique(y)) < 2:
        raise EmptyClassError("training set must contain both labels")
    net = network.copy()
    state = AdamState.for_network(net, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for i in range(0, len(X), config.batch_size):
            idx = order[i:i + config.batch_size]
            scores, cache = forward(net, X[idx], mode="train", dropout_seed=int(rng.integers(2**63)))
            total += bce_loss(scores, y[idx]) * len(idx)
            adam_step(net, backward(net, cache, y[idx]), state)
        history.append(total / len(X))
        log.debug("epoch %d loss %.5f", epoch + 1, history[-1])
    return net, history


@dataclass
class ScoreModel:
    """A trained network together with the preprocessing it was fitted with."""

    network: Network
    scaler: ChannelScaler
    bin_minutes: int = 9

    def preprocess(self, matrices: np.ndarray) -> np.ndarray:
        return paa(rescale(np.asarray(matrices, dtype=float), self.scaler), self.bin_minutes)

    def score(self, matrices: np.ndarray) -> np.ndarray:
        return predict(self.network, self.preprocess(matrices))


def fit_score_model(
    instances: Sequence[TimeSeriesInstance],
    arch: NetworkArch = NetworkArch(),
    config: TrainConfig = TrainConfig(),
    bin_minutes: int = 9,
):
    """Fit the scaler on ``instances``, preprocess, and train a fresh network."""
    raw, y = stack(instances)
    scaler = fit_scaler(raw)
    model = ScoreModel(build_network(arch, config.seed), scaler, bin_minutes)
    model.network, history = train(model.network, model.preprocess(raw), y, config)
    return model, history


def assign_folds(patient_ids: Sequence[int], positive: Sequence[bool], k: int, seed: int = 0) -> dict[int, int]:
    """Patient -> fold, dealing positive and negative patients round-robin."""
    if k < 2:
        raise SplitError(f"k must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    ids = np.asarray(patient_ids)
    pos = np.asarray(positive, dtype=bool)
    folds = {}
    offset = 0
    for group in (ids[pos], ids[~pos]):
        shuffled = group[rng.permutation(len(group))]
        for j, pid in enumerate(shuffled):
            folds[int(pid)] = (offset + j) % k
        offset += len(group)
    return folds


@dataclass
class KFoldResult:
    fold_aurocs: list
    mean_auroc: float
    models: list
    test_indices: list
    fold_of_patient: dict
    histories: list = field(default_factory=list)


def kfold_evaluate(
    instances: Sequence[TimeSeriesInstance],
    k: int = 5,
    arch: NetworkArch = NetworkArch(),
    config: TrainConfig = TrainConfig(),
    seed: int = 0,
    folds: Optional[Mapping[int, int]] = None,
    bin_minutes: int = 9,
) -> KFoldResult:
    """Patient-grouped, label-stratified k-fold cross-validation.

    A patient counts as positive for stratification if any of its instances is
    a case. ``folds`` may pin the patient -> fold assignment (e.g. to reuse
    it for out-of-fold scoring of a whole cohort).
    """
    pids = np.array([inst.patient_id for inst in instances])
    labels = np.array([inst.label for inst in instances])
    if folds is None:
        uniq = np.unique(pids)
        pos_patients = set(pids[labels == 1].tolist())
        folds = assign_folds(uniq, [p in pos_patients for p in uniq], k, seed)
    fold_idx = np.array([folds[int(p)] for p in pids])
    for f in range(k):
        for part, sel in (("test", fold_idx == f), ("train", fold_idx != f)):
            if len(np.unique(labels[sel])) < 2:
                raise SplitError(f"fold {f} {part} split lacks one of the classes")
    aurocs, models, tests, histories = [], [], [], []
    for f in range(k):
        train_sel = np.flatnonzero(fold_idx != f)
        test_sel = np.flatnonzero(fold_idx == f)
        model, history = fit_score_model([instances[i] for i in train_sel], arch, config, bin_minutes)
        raw_test, y_test = stack([instances[i] for i in test_sel])
        aurocs.append(auroc(model.score(raw_test), y_test))
        log.info("fold %d/%d AUROC %.4f", f + 1, k, aurocs[-1])
        models.append(model)
        tests.append(test_sel)
        histories.append(history)
    return KFoldResult(aurocs, float(np.mean(aurocs)), models, tests, dict(folds), histories)


def score_patient(
    model: ScoreModel,
    patient: PatientRecord,
    stride: float = 8.0,
    width: float = 24.0,
) -> list[tuple[float, float]]:
    """(window end, score) for every full window from admission on an 8h stride."""
    n_cols = int(round(width * 60))
    step = int(round(stride * 60))
    usable = min(patient.n_minutes, int(np.floor(patient.end_time * 60 + 1e-9)))
    starts = list(range(0, usable - n_cols + 1, step))
    if not starts:
        return []
    imputed = imputed_record(patient)
    windows = np.stack([imputed[:, s:s + n_cols] for s in starts])
    scores = model.score(windows)
    return [(patient.admission_time + (s + n_cols) / 60.0, float(v)) for s, v in zip(starts, scores)]
