"""Point-cloud pillarization and the pillar feature vectorizer.

Points inside the configured range bucket into vertical pillars on an x/y
grid (columns index x, rows index y, half-open [min, max) intervals on every
axis). Each retained point is decorated to 9 features: its raw (x, y, z, r),
its offset from the arithmetic mean of the pillar's retained points, and its
x/y offset from the pillar's cell center. A linear layer + batch norm + ReLU
followed by a per-pillar max turns each pillar into one feature vector, which
lands in a COO pseudoimage at the pillar's cell.

Capacity limits make the feature tensor rectangular: pillars holding more
than max_points_per_pillar points keep a seeded uniform subsample, and when
more than max_pillars pillars are occupied the fullest ones win (raw point
count before subsampling, row-major order breaking ties).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kernels import BatchNormParams, _bn_fold
from .pseudoimage import DensePseudoimage, SparsePseudoimage, to_dense

__all__ = [
    "PointCloud",
    "PillarGridConfig",
    "PillarSet",
    "VectorizerWeights",
    "read_point_cloud",
    "read_point_cloud_file",
    "pillarize",
    "vectorize",
    "scatter",
]

FEATURE_DIM = 9


@dataclass(frozen=True)
class PointCloud:
    """(N, 4) float32 rows of x, y, z, reflectance."""

    points: np.ndarray

    def __post_init__(self) -> None:
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float32))
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"points must be (n, 4), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def num_points(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class PillarGridConfig:
    """Pillar geometry. The derived grid (rows over y, columns over x) must
    divide by 8 so that three halvings stay integral."""

    pillar_size_x: float
    pillar_size_y: float
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float
    out_channels: int
    max_pillars: int = 12000
    max_points_per_pillar: int = 100

    def __post_init__(self) -> None:
        for name in ("pillar_size_x", "pillar_size_y"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v}")
        for lo, hi in (("x_min", "x_max"), ("y_min", "y_max"), ("z_min", "z_max")):
            a, b = getattr(self, lo), getattr(self, hi)
            if not (math.isfinite(a) and math.isfinite(b) and a < b):
                raise ValueError(f"need finite {lo} < {hi}, got {a}, {b}")
        if self.out_channels < 1:
            raise ValueError(f"out_channels must be >= 1, got {self.out_channels}")
        if self.max_pillars < 1 or self.max_points_per_pillar < 1:
            raise ValueError("capacity limits must be >= 1")
        for side, n in (("width", self.grid_width), ("height", self.grid_height)):
            if n < 8 or n % 8:
                raise ValueError(f"derived grid {side} {n} must be a positive multiple of 8")

    @property
    def grid_width(self) -> int:
        return int(round((self.x_max - self.x_min) / self.pillar_size_x))

    @property
    def grid_height(self) -> int:
        return int(round((self.y_max - self.y_min) / self.pillar_size_y))


@dataclass(frozen=True)
class PillarSet:
    """Occupied pillars in canonical row-major order.

    features is (P, max_points, 9) with all-zero padding rows past each
    pillar's point_counts entry; point_counts holds retained (post-subsample)
    counts.
    """

    grid_height: int
    grid_width: int
    coordinates: np.ndarray
    features: np.ndarray
    point_counts: np.ndarray

    def __post_init__(self) -> None:
        coords = np.ascontiguousarray(np.asarray(self.coordinates, dtype=np.int64))
        feats = np.ascontiguousarray(np.asarray(self.features, dtype=np.float32))
        counts = np.ascontiguousarray(np.asarray(self.point_counts, dtype=np.int64))
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError(f"coordinates must be (p, 2), got {coords.shape}")
        p = coords.shape[0]
        if feats.ndim != 3 or feats.shape[0] != p or feats.shape[2] != FEATURE_DIM:
            raise ValueError(f"features must be ({p}, max_points, {FEATURE_DIM}), got {feats.shape}")
        if counts.shape != (p,):
            raise ValueError(f"point_counts must be ({p},), got {counts.shape}")
        if p:
            if coords.min() < 0 or coords[:, 0].max() >= self.grid_height or coords[:, 1].max() >= self.grid_width:
                raise ValueError("pillar coordinate out of bounds")
            enc = coords[:, 0] * self.grid_width + coords[:, 1]
            if not np.all(enc[:-1] < enc[1:]):
                raise ValueError("pillar coordinates must be distinct and row-major sorted")
            if counts.min() < 1 or counts.max() > feats.shape[1]:
                raise ValueError("point_counts must be in [1, max_points]")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features must be finite")
        for name, arr in (("coordinates", coords), ("features", feats), ("point_counts", counts)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def num_pillars(self) -> int:
        return self.coordinates.shape[0]


@dataclass(frozen=True)
class VectorizerWeights:
    """Per-point linear layer (9 -> C) and its batch norm."""

    linear: np.ndarray
    bn: BatchNormParams

    def __post_init__(self) -> None:
        lin = np.ascontiguousarray(np.asarray(self.linear, dtype=np.float32))
        if lin.ndim != 2 or lin.shape[0] != FEATURE_DIM:
            raise ValueError(f"linear must be ({FEATURE_DIM}, C), got {lin.shape}")
        if not np.all(np.isfinite(lin)):
            raise ValueError("linear must be finite")
        if self.bn.channels != lin.shape[1]:
            raise ValueError(
                f"bn channels {self.bn.channels} != linear out width {lin.shape[1]}"
            )
        lin.setflags(write=False)
        object.__setattr__(self, "linear", lin)

    @property
    def out_channels(self) -> int:
        return self.linear.shape[1]


def read_point_cloud(data: bytes, fmt: str = "kitti-bin") -> PointCloud:
    """Decode a point cloud buffer; points keep file order, nothing is filtered.

    "kitti-bin": packed little-endian float32 (x, y, z, reflectance) records.
    "csv": comma-separated x,y,z,reflectance rows; blank lines and lines
    starting with '#' are skipped.
    """
    if fmt == "kitti-bin":
        if len(data) % 16:
            raise ValueError(f"size {len(data)} is not a whole number of 16-byte records")
        return PointCloud(np.frombuffer(data, dtype="<f4").reshape(-1, 4))
    if fmt == "csv":
        rows = []
        for lineno, line in enumerate(data.decode("utf-8").splitlines(), start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.split(",")
            if len(fields) != 4:
                raise ValueError(f"line {lineno}: expected 4 fields, got {len(fields)}")
            try:
                rows.append([float(v) for v in fields])
            except ValueError as exc:
                raise ValueError(f"line {lineno}: non-numeric field") from exc
        return PointCloud(np.asarray(rows, dtype=np.float32).reshape(-1, 4))
    raise ValueError(f"unknown point cloud format {fmt!r}")


def read_point_cloud_file(path: str, fmt: str = "kitti-bin") -> PointCloud:
    with open(path, "rb") as f:
        data = f.read()
    try:
        return read_point_cloud(data, fmt)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc


def pillarize(cloud: PointCloud, cfg: PillarGridConfig, seed: int = 0) -> PillarSet:
    """Bucket in-range points into pillars and decorate them to 9 features.

    Deterministic for a fixed (cloud, cfg, seed): subsampling draws happen in
    canonical pillar order. Mean offsets use the retained points, so the
    decoration of a subsampled pillar reflects what the vectorizer will see.
    """
    w, h = cfg.grid_width, cfg.grid_height
    pts64 = cloud.points.astype(np.float64)
    x, y, z = pts64[:, 0], pts64[:, 1], pts64[:, 2]
    keep = (
        (x >= cfg.x_min) & (x < cfg.x_max)
        & (y >= cfg.y_min) & (y < cfg.y_max)
        & (z >= cfg.z_min) & (z < cfg.z_max)
    )
    col = np.floor((x - cfg.x_min) / cfg.pillar_size_x).astype(np.int64)
    row = np.floor((y - cfg.y_min) / cfg.pillar_size_y).astype(np.int64)
    # fp edge: a coordinate just below the range bound can still round into
    # the cell past the derived grid; the cell index is authoritative
    keep &= (col >= 0) & (col < w) & (row >= 0) & (row < h)

    idx = np.nonzero(keep)[0]
    if idx.size == 0:
        return PillarSet(
            h,
            w,
            np.zeros((0, 2), dtype=np.int64),
            np.zeros((0, cfg.max_points_per_pillar, FEATURE_DIM), dtype=np.float32),
            np.zeros((0,), dtype=np.int64),
        )

    enc = row[idx] * w + col[idx]
    order = np.argsort(enc, kind="stable")  # input order preserved within a pillar
    idx = idx[order]
    enc = enc[order]
    uniq, starts, counts = np.unique(enc, return_index=True, return_counts=True)

    if uniq.size > cfg.max_pillars:
        winners = np.lexsort((uniq, -counts))[: cfg.max_pillars]
        kept_flag = np.zeros(uniq.size, dtype=bool)
        kept_flag[winners] = True
    else:
        kept_flag = np.ones(uniq.size, dtype=bool)

    rng = np.random.default_rng(seed)
    cap = cfg.max_points_per_pillar
    selected = np.repeat(kept_flag, counts)
    for u in np.nonzero(kept_flag)[0]:  # canonical order fixes the rng stream
        if counts[u] > cap:
            chosen = rng.choice(counts[u], size=cap, replace=False)
            chosen.sort()
            pillar_sel = np.zeros(counts[u], dtype=bool)
            pillar_sel[chosen] = True
            selected[starts[u] : starts[u] + counts[u]] = pillar_sel

    final_idx = idx[selected]
    final_enc = enc[selected]
    final_uniq, final_starts, final_counts = np.unique(
        final_enc, return_index=True, return_counts=True
    )
    p = final_uniq.size
    pillar_of_point = np.repeat(np.arange(p), final_counts)
    slot = np.arange(final_idx.size) - np.repeat(final_starts, final_counts)

    pt = pts64[final_idx]
    sums = np.add.reduceat(pt[:, :3], final_starts, axis=0)
    means = sums / final_counts[:, None]
    prow = final_uniq // w
    pcol = final_uniq % w
    cx = cfg.x_min + (pcol + 0.5) * cfg.pillar_size_x
    cy = cfg.y_min + (prow + 0.5) * cfg.pillar_size_y

    per_point = np.empty((final_idx.size, FEATURE_DIM), dtype=np.float64)
    per_point[:, :4] = pt
    per_point[:, 4:7] = pt[:, :3] - means[pillar_of_point]
    per_point[:, 7] = pt[:, 0] - cx[pillar_of_point]
    per_point[:, 8] = pt[:, 1] - cy[pillar_of_point]

    features = np.zeros((p, cap, FEATURE_DIM), dtype=np.float32)
    features[pillar_of_point, slot] = per_point.astype(np.float32)
    coords = np.stack([prow, pcol], axis=1)
    return PillarSet(h, w, coords, features, final_counts.astype(np.int64))


def vectorize(
    pillars: PillarSet, weights: VectorizerWeights, cfg: PillarGridConfig
) -> SparsePseudoimage:
    """Linear + batch norm + ReLU per point, then a per-pillar max over real
    (non-padding) slots. Every occupied pillar yields a stored site, even if
    its pooled vector is all zeros."""
    if pillars.grid_height != cfg.grid_height or pillars.grid_width != cfg.grid_width:
        raise ValueError("pillar set grid does not match config")
    if weights.out_channels != cfg.out_channels:
        raise ValueError(
            f"weights produce {weights.out_channels} channels, config wants {cfg.out_channels}"
        )
    scale, bias = _bn_fold(weights.bn)
    y = pillars.features @ weights.linear
    y = np.maximum(y * scale + bias, 0.0)
    mask = np.arange(pillars.features.shape[1])[None, :] < pillars.point_counts[:, None]
    pooled = np.where(mask[:, :, None], y, 0.0).max(axis=1, initial=0.0)
    return SparsePseudoimage(
        cfg.grid_height, cfg.grid_width, cfg.out_channels, pillars.coordinates, pooled
    )


def scatter(image: SparsePseudoimage) -> DensePseudoimage:
    """Scatter pillar features onto the dense grid (the dense pipeline's
    extra stage; void cells become explicit zeros)."""
    return to_dense(image)
