"""Shared random-input builders for the test suite.

Everything is seeded through an explicit numpy Generator so each test owns
its randomness; there are no shared stateful fixtures.
"""

from __future__ import annotations

import numpy as np

from bevsparse import (
    BatchNormParams,
    ConvLayerWeights,
    KIND_STANDARD,
    KIND_SUBMANIFOLD,
    KIND_TRANSPOSE,
    SparsePseudoimage,
)


def random_sparse(
    rng: np.random.Generator,
    height: int,
    width: int,
    channels: int,
    density: float,
    zero_site_fraction: float = 0.0,
) -> SparsePseudoimage:
    """Uniformly random site set at the requested site density. A fraction of
    sites can be stored as explicit all-zero vectors to decouple value density
    from site density."""
    n = max(0, min(height * width, round(density * height * width)))
    enc = rng.choice(height * width, size=n, replace=False)
    enc.sort()
    coords = np.stack([enc // width, enc % width], axis=1).astype(np.int64)
    vals = rng.standard_normal((n, channels)).astype(np.float32)
    if zero_site_fraction > 0.0 and n > 0:
        kill = rng.random(n) < zero_site_fraction
        vals[kill] = 0.0
    return SparsePseudoimage(height, width, channels, coords, vals)


def clustered_sparse(
    rng: np.random.Generator,
    height: int,
    width: int,
    channels: int,
    target_density: float,
    cluster_cells: int = 40,
    spread: float = 4.0,
) -> SparsePseudoimage:
    """Gaussian blobs of occupied cells, the occupancy shape pillarized lidar
    produces. The realized density lands near (at most) the target."""
    want = max(1, round(target_density * height * width))
    n_clusters = max(1, round(want / cluster_cells))
    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    for _ in range(n_clusters):
        cr = rng.uniform(0, height)
        cc = rng.uniform(0, width)
        rr = np.clip(np.round(cr + rng.normal(0, spread, cluster_cells)), 0, height - 1)
        cc_ = np.clip(np.round(cc + rng.normal(0, spread, cluster_cells)), 0, width - 1)
        rows.append(rr.astype(np.int64))
        cols.append(cc_.astype(np.int64))
    enc = np.unique(np.concatenate(rows) * width + np.concatenate(cols))
    if enc.size > want:
        enc = np.sort(rng.choice(enc, size=want, replace=False))
    coords = np.stack([enc // width, enc % width], axis=1)
    vals = rng.standard_normal((enc.size, channels)).astype(np.float32)
    return SparsePseudoimage(height, width, channels, coords, vals)


def random_layer(
    rng: np.random.Generator,
    kh: int,
    kw: int,
    cin: int,
    cout: int,
    stride: int = 1,
    kind: str = KIND_STANDARD,
) -> ConvLayerWeights:
    scale = np.sqrt(2.0 / (kh * kw * cin))
    kernel = (rng.standard_normal((kh, kw, cin, cout)) * scale).astype(np.float32)
    return ConvLayerWeights(kernel, stride, kind)


def random_subm_layer(rng: np.random.Generator, k: int, c: int) -> ConvLayerWeights:
    return random_layer(rng, k, k, c, c, stride=1, kind=KIND_SUBMANIFOLD)


def random_transpose_layer(
    rng: np.random.Generator, k: int, cin: int, cout: int
) -> ConvLayerWeights:
    return random_layer(rng, k, k, cin, cout, stride=k, kind=KIND_TRANSPOSE)


def random_bn(rng: np.random.Generator, channels: int, eps: float = 1e-5) -> BatchNormParams:
    return BatchNormParams(
        gamma=rng.uniform(0.5, 1.5, channels).astype(np.float32),
        beta=rng.normal(0.0, 0.2, channels).astype(np.float32),
        mean=rng.normal(0.0, 0.5, channels).astype(np.float32),
        var=rng.uniform(0.25, 2.0, channels).astype(np.float32),
        eps=eps,
    )
