"""1-D convolutional network with hand-written forward and backward passes.

Layout: each block is a same-padded stride-1 convolution, ReLU, max-pool and
(in training) inverted dropout; the last feature map is flattened into a
single sigmoid unit. Activations are kept channels-last, ``(batch, length,
filters)``, internally; the public batch layout is ``(batch, channels, length)``.
"""

from __future__ import annotations

import copy
import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import ArchitectureError, ContractViolation

BCE_EPS = 1e-12
_ids = itertools.count()


@dataclass(frozen=True)
class NetworkArch:
    n_blocks: int = 5
    filters: int = 128
    kernel_size: int = 3
    pool_size: int = 2
    dropout_rate: float = 0.25
    input_channels: int = 6
    input_length: int = 160

    def validate(self) -> None:
        if self.n_blocks < 1 or self.filters < 1 or self.input_channels < 1:
            raise ArchitectureError("n_blocks, filters and input_channels must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ArchitectureError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.pool_size < 1:
            raise ArchitectureError("pool_size must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ArchitectureError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        factor = self.pool_size ** self.n_blocks
        if self.input_length % factor:
            raise ArchitectureError(
                f"input_length {self.input_length} is not divisible by "
                f"pool_size**n_blocks = {factor}"
            )

    def block_lengths(self) -> list[int]:
        """Spatial length entering each block (i.e. of its activated map)."""
        return [self.input_length // self.pool_size**b for b in range(self.n_blocks)]

    @property
    def final_length(self) -> int:
        return self.input_length // self.pool_size**self.n_blocks

    @property
    def dense_inputs(self) -> int:
        return self.filters * self.final_length


@dataclass
class Network:
    arch: NetworkArch
    conv_w: list  # (filters, in_channels, kernel) per block
    conv_b: list  # (filters,) per block
    dense_w: np.ndarray  # (final_length * filters,), flattened length-major
    dense_b: np.ndarray  # (1,)
    seed: Optional[int] = None
    version: int = 0
    uid: int = field(default_factory=lambda: next(_ids))

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in declaration order (block weights, biases, dense)."""
        out = []
        for w, b in zip(self.conv_w, self.conv_b):
            out += [w, b]
        return out + [self.dense_w, self.dense_b]

    def copy(self) -> "Network":
        new = copy.deepcopy(self)
        new.uid = next(_ids)
        return new


@dataclass
class ForwardCache:
    network_uid: int
    version: int
    mode: str
    batch_size: int
    cols: list
    pre: list  # pre-activation per block, (B, L, F)
    act: list  # activated map per block, (B, L, F)
    argmax: list
    masks: list
    flat: np.ndarray
    scores: np.ndarray

    def activated_maps(self, block: int) -> np.ndarray:
        """Activated feature map of ``block`` as (batch, depth, length)."""
        return self.act[block].transpose(0, 2, 1)


def build_network(arch: NetworkArch, seed: int = 0) -> Network:
    """Fan-in scaled uniform weights, zero biases."""
    arch.validate()
    rng = np.random.default_rng(seed)
    conv_w, conv_b = [], []
    in_ch = arch.input_channels
    for _ in range(arch.n_blocks):
        fan_in = in_ch * arch.kernel_size
        bound = np.sqrt(6.0 / fan_in)
        conv_w.append(rng.uniform(-bound, bound, (arch.filters, in_ch, arch.kernel_size)))
        conv_b.append(np.zeros(arch.filters))
        in_ch = arch.filters
    bound = np.sqrt(3.0 / arch.dense_inputs)
    dense_w = rng.uniform(-bound, bound, arch.dense_inputs)
    return Network(arch, conv_w, conv_b, dense_w, np.zeros(1), seed=seed)


def _im2col(x: np.ndarray, kernel: int) -> np.ndarray:
    """(B, L, C) -> (B*L, C*kernel) with zero same-padding."""
    B, L, C = x.shape
    pad = kernel // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, kernel, axis=1)  # (B, L, C, K)
    return win.reshape(B * L, C * kernel)


def forward(network: Network, batch: np.ndarray, mode: str = "infer", dropout_seed: Optional[int] = None):
    """Scores in (0, 1) for a (B, channels, length) batch, plus the activation cache."""
    arch = network.arch
    batch = np.asarray(batch, dtype=float)
    if batch.ndim == 2:
        batch = batch[None]
    if batch.ndim != 3 or batch.shape[1:] != (arch.input_channels, arch.input_length):
        raise ValueError(
            f"batch shape {batch.shape} does not match "
            f"(*, {arch.input_channels}, {arch.input_length})"
        )
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    rng = np.random.default_rng(dropout_seed)
    rate = arch.dropout_rate
    B = batch.shape[0]
    p = arch.pool_size
    h = batch.transpose(0, 2, 1)
    cols_l, pre_l, act_l, arg_l, mask_l = [], [], [], [], []
    for w, b in zip(network.conv_w, network.conv_b):
        L = h.shape[1]
        cols = _im2col(h, arch.kernel_size)
        z = (cols @ w.reshape(w.shape[0], -1).T + b).reshape(B, L, -1)
        a = np.maximum(z, 0.0)
        windows = a.reshape(B, L // p, p, -1)
        idx = windows.argmax(axis=2)
        h = np.take_along_axis(windows, idx[:, :, None, :], axis=2)[:, :, 0, :]
        mask = None
        if mode == "train" and rate > 0:
            mask = (rng.random(h.shape) >= rate) / (1.0 - rate)
            h = h * mask
        cols_l.append(cols)
        pre_l.append(z)
        act_l.append(a)
        arg_l.append(idx)
        mask_l.append(mask)
    flat = h.reshape(B, -1)
    scores = expit(flat @ network.dense_w + network.dense_b[0])
    cache = ForwardCache(network.uid, network.version, mode, B, cols_l, pre_l, act_l, arg_l, mask_l, flat, scores)
    return scores, cache


def bce_loss(scores, labels) -> float:
    p = np.clip(np.asarray(scores, dtype=float), BCE_EPS, 1.0 - BCE_EPS)
    y = np.asarray(labels, dtype=float)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def backward(network: Network, cache: ForwardCache, labels) -> list[np.ndarray]:
    """Gradients of the mean BCE loss, in :meth:`Network.parameters` order."""
    if cache.network_uid != network.uid or cache.version != network.version:
        raise ContractViolation("activation cache is stale: parameters changed since forward()")
    arch = network.arch
    y = np.asarray(labels, dtype=float).reshape(-1)
    B = cache.batch_size
    if y.shape[0] != B:
        raise ContractViolation(f"{y.shape[0]} labels for a batch of {B}")
    p = arch.pool_size
    K = arch.kernel_size
    pad = K // 2

    dlogit = (cache.scores - y) / B
    g_dense_w = cache.flat.T @ dlogit
    g_dense_b = np.array([dlogit.sum()])
    dh = np.outer(dlogit, network.dense_w).reshape(B, arch.final_length, arch.filters)

    grads = [None] * (2 * arch.n_blocks)
    for blk in reversed(range(arch.n_blocks)):
        if cache.masks[blk] is not None:
            dh = dh * cache.masks[blk]
        z = cache.pre[blk]
        L = z.shape[1]
        d_act = np.zeros((B, L // p, p, z.shape[2]))
        np.put_along_axis(d_act, cache.argmax[blk][:, :, None, :], dh[:, :, None, :], axis=2)
        dz = d_act.reshape(z.shape) * (z > 0)
        dz2 = dz.reshape(B * L, -1)
        w = network.conv_w[blk]
        grads[2 * blk] = (dz2.T @ cache.cols[blk]).reshape(w.shape)
        grads[2 * blk + 1] = dz2.sum(axis=0)
        if blk > 0:
            C = w.shape[1]
            dcols = (dz2 @ w.reshape(w.shape[0], -1)).reshape(B, L, C, K)
            dxp = np.zeros((B, L + 2 * pad, C))
            for k in range(K):
                dxp[:, k:k + L, :] += dcols[:, :, :, k]
            dh = dxp[:, pad:pad + L, :]
    return grads + [g_dense_w, g_dense_b]


def predict(network: Network, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Inference-mode scores for an array of inputs."""
    X = np.asarray(X, dtype=float)
    out = np.empty(len(X))
    for i in range(0, len(X), batch_size):
        out[i:i + batch_size], _ = forward(network, X[i:i + batch_size], mode="infer")
    return out
