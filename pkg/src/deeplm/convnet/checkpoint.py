"""Versioned binary checkpoints.

Layout (little-endian): 8-byte magic, uint32 format version, seven arch
fields (n_blocks, filters, kernel_size, pool_size, input_channels,
input_length as uint32; dropout_rate as float64), then every parameter array
as float64 in :meth:`Network.parameters` order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import DataError
from .network import NetworkArch, build_network

MAGIC = b"DLMCNN\x00\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sI6Id")


def checkpoint_bytes(network) -> bytes:
    a = network.arch
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, a.n_blocks, a.filters, a.kernel_size, a.pool_size,
        a.input_channels, a.input_length, a.dropout_rate,
    )
    blobs = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in network.parameters())
    return header + blobs


def save_checkpoint(network, path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(network))
    return path


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise DataError(f"{path}: truncated checkpoint header")
    magic, version, nb, nf, ks, ps, ic, il, dr = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DataError(f"{path}: not a network checkpoint")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    arch = NetworkArch(nb, nf, ks, ps, dr, ic, il)
    net = build_network(arch, seed=0)
    flat = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    expected = sum(p.size for p in net.parameters())
    if flat.size != expected:
        raise DataError(f"{path}: expected {expected} parameters, found {flat.size}")
    pos = 0
    for p in net.parameters():
        p[...] = flat[pos:pos + p.size].reshape(p.shape)
        pos += p.size
    net.seed = None
    return net
