"""Antiphase-sine toy task used to sanity check training and saliency."""

from __future__ import annotations

import numpy as np


def toy_sine_dataset(n_per_class: int, length: int = 160, seed: int = 0):
    """Class 0 is ``sin(2 pi (t + phi))``, class 1 its negation, t in [0, 1).

    The phase jitter ``phi`` is uniform on [-0.125, 0.125]. Returns
    ``(X, y, trough)`` with ``X`` of shape (n, 1, length) and ``trough`` the
    sample index of each series' minimum.
    """
    rng = np.random.default_rng(seed)
    n = 2 * n_per_class
    y = np.repeat([0.0, 1.0], n_per_class)
    phi = rng.uniform(-0.125, 0.125, n)
    t = np.arange(length) / length
    sign = np.where(y == 1, -1.0, 1.0)
    X = sign[:, None] * np.sin(2 * np.pi * (t[None, :] + phi[:, None]))
    # sin has its trough at 3/4 of a period, -sin at 1/4.
    trough_t = np.where(y == 1, 0.25, 0.75) - phi
    trough = np.rint(trough_t * length).astype(int) % length
    order = rng.permutation(n)
    return X[order, None, :], y[order], trough[order]
