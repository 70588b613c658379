"""Analytic convolution-count model for the two backbones.

The counting unit is one kernel application per (Cin, Cout) channel pair, so
a dense k x k layer with an Hₒ x Wₒ output costs Hₒ * Wₒ * Cin * Cout
regardless of k. Under that unit the dense baseline performs exactly
4.625 * C^2 * H * W convolutions. The sparse backbone's work depends on the
input site density D; this module gives per-row upper bounds that empirical
PairCounts can be reconciled against. Bound comparisons tolerate float
roundoff (1e-9 relative); a genuine violation is integer-sized.

Rows follow kernel shape: 3x3 (downsample stacks' site-preserving convs and
the baseline's everything-3x3), 2x2 (sparse downsamples), and the three
transposed upsample shapes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .kernels import KIND_STANDARD, KIND_SUBMANIFOLD, KIND_TRANSPOSE, PairCount
from .pseudoimage import SparsePseudoimage, density

__all__ = [
    "OpCountReport",
    "RowReconciliation",
    "ReconciliationReport",
    "DensityStats",
    "analytic_baseline",
    "analytic_sparse_bound",
    "reconcile",
    "density_stats",
    "order_stats",
]

_ROWS = ("conv3x3", "conv2x2", "convt1x1", "convt2x2", "convt4x4")
_REL_EPS = 1e-9


@dataclass(frozen=True)
class OpCountReport:
    """Convolution counts per kernel-shape row plus their total."""

    conv3x3: float
    conv2x2: float
    convt1x1: float
    convt2x2: float
    convt4x4: float
    total: float

    def __post_init__(self) -> None:
        rows = [getattr(self, r) for r in _ROWS]
        if min(rows) < 0:
            raise ValueError("counts must be non-negative")
        if abs(self.total - sum(rows)) > _REL_EPS * max(1.0, self.total):
            raise ValueError(f"total {self.total} != row sum {sum(rows)}")

    def row(self, name: str) -> float:
        if name not in _ROWS:
            raise ValueError(f"unknown row {name!r}")
        return float(getattr(self, name))


def _check_geometry(height: int, width: int, channels: int) -> None:
    if height < 8 or width < 8 or height % 8 or width % 8:
        raise ValueError(f"grid must be divisible by 8, got {height}x{width}")
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")


def _report(rows: dict[str, float]) -> OpCountReport:
    return OpCountReport(total=sum(rows.values()), **rows)


def analytic_baseline(height: int, width: int, channels: int) -> OpCountReport:
    """Dense baseline counts. The 3x3 row covers all three blocks' downsample
    and site-preserving stacks (15/4 * C^2 * H * W); the baseline performs no
    2x2 convolutions; the transpose rows cost one kernel application per
    input cell."""
    _check_geometry(height, width, channels)
    chw = float(channels * channels * height * width)
    return _report(
        {
            "conv3x3": 15.0 / 4.0 * chw,
            "conv2x2": 0.0,
            "convt1x1": chw / 2.0,
            "convt2x2": chw / 4.0,
            "convt4x4": chw / 8.0,
        }
    )


def analytic_sparse_bound(
    height: int, width: int, channels: int, input_density: float
) -> OpCountReport:
    """Upper bounds on sparse-backbone counts at input site density D.

    Site-preserving convolutions touch at most min(grid cells, D * H * W)
    sites per layer; sparse 2x2 stride-2 downsamples touch each input site
    once; transposes touch each trunk site once. Each min() saturates when
    the shrinking grid, not the input site count, is the binding cap.
    """
    _check_geometry(height, width, channels)
    d = float(input_density)
    if not 0.0 <= d <= 1.0:
        raise ValueError(f"input_density must be in [0, 1], got {input_density}")
    chw = float(channels * channels * height * width)
    return _report(
        {
            "conv3x3": chw * (min(3.0 / 4.0, 3.0 * d) + min(5.0 / 4.0, 20.0 * d) + min(5.0 / 4.0, 80.0 * d)),
            "conv2x2": chw * (d / 4.0 + min(1.0 / 8.0, d / 2.0) + min(1.0 / 8.0, 2.0 * d)),
            "convt1x1": chw * min(1.0 / 2.0, 2.0 * d),
            "convt2x2": chw * min(1.0 / 4.0, 4.0 * d),
            "convt4x4": chw * min(1.0 / 8.0, 8.0 * d),
        }
    )


def _row_of(pc: PairCount) -> str:
    if pc.kind == KIND_TRANSPOSE:
        by_shape = {(1, 1): "convt1x1", (2, 2): "convt2x2", (4, 4): "convt4x4"}
        if pc.kernel_shape in by_shape:
            return by_shape[pc.kernel_shape]
    elif pc.kind in (KIND_STANDARD, KIND_SUBMANIFOLD):
        if pc.kernel_shape == (3, 3):
            return "conv3x3"
        if pc.kernel_shape == (2, 2) and pc.kind == KIND_STANDARD:
            return "conv2x2"
    raise ValueError(f"no analytic row for {pc.kind} {pc.kernel_shape} counts")


@dataclass(frozen=True)
class RowReconciliation:
    row: str
    empirical: float
    bound: float
    margin: float
    ok: bool


@dataclass(frozen=True)
class ReconciliationReport:
    """Empirical-vs-analytic comparison, one entry per kernel-shape row."""

    rows: tuple[RowReconciliation, ...]
    ok: bool

    def row(self, name: str) -> RowReconciliation:
        for r in self.rows:
            if r.row == name:
                return r
        raise ValueError(f"unknown row {name!r}")

    @property
    def empirical_total(self) -> float:
        return sum(r.empirical for r in self.rows)

    @property
    def min_margin(self) -> float:
        return min(r.margin for r in self.rows)


def reconcile(empirical: Sequence[PairCount], analytic: OpCountReport) -> ReconciliationReport:
    """Sums weighted PairCounts into kernel-shape rows and flags any row
    whose empirical count exceeds its analytic bound. Counts with no analytic
    row (for example 9x9 wide kernels) are an error."""
    sums = {row: 0.0 for row in _ROWS}
    for pc in empirical:
        sums[_row_of(pc)] += pc.weighted
    rows = []
    for name in _ROWS:
        bound = analytic.row(name)
        emp = sums[name]
        margin = bound - emp
        rows.append(
            RowReconciliation(
                row=name,
                empirical=emp,
                bound=bound,
                margin=margin,
                ok=emp <= bound + _REL_EPS * max(1.0, bound),
            )
        )
    return ReconciliationReport(rows=tuple(rows), ok=all(r.ok for r in rows))


@dataclass(frozen=True)
class DensityStats:
    """Order statistics over per-scene density values."""

    median: float
    minimum: float
    maximum: float
    count: int


def order_stats(values: Sequence[float]) -> DensityStats:
    """Min, max, and the lower-middle median of a non-empty value sequence."""
    if len(values) == 0:
        raise ValueError("need at least one value")
    ordered = sorted(float(v) for v in values)
    return DensityStats(
        median=ordered[(len(ordered) - 1) // 2],
        minimum=ordered[0],
        maximum=ordered[-1],
        count=len(ordered),
    )


def density_stats(scenes: Sequence[SparsePseudoimage]) -> DensityStats:
    """Per-scene value_density order statistics (median is the lower-middle
    element for even counts)."""
    return order_stats([density(s).value_density for s in scenes])
