"""Three-block BEV backbones over pillar pseudoimages.

Both backbones share one weight container and one topology. Block k downsamples
by 2 and then runs a stack of site-preserving 3x3 convolutions (3 in block 1,
5 in blocks 2 and 3), each followed by batch norm and ReLU. Channel widths are
C, 2C, 4C. Each block's output feeds a transposed convolution (1x1 s1,
2x2 s2, 4x4 s4) back to the half-resolution grid at width 2C, and the three
upsampled maps concatenate to an H/2 x W/2 x 6C feature map.

The dense baseline downsamples with 3x3 stride-2 convolutions. The sparse
path downsamples with 2x2 stride-2 convolutions (windows partition the grid,
so downsampling never grows the active set), keeps sites fixed with
submanifold convolutions, uses non-zero-only batch norm, and converts to
dense only after upsampling. Ablation variants run a sparse prefix of blocks
and hand the trunk to dense execution at the first dense block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import (
    KIND_STANDARD,
    KIND_SUBMANIFOLD,
    KIND_TRANSPOSE,
    BatchNormParams,
    ConvLayerWeights,
    PairCount,
    batchnorm_dense,
    batchnorm_sparse,
    conv2d_dense,
    conv2d_sparse,
    conv2d_subm,
    conv2d_transpose_dense,
    conv2d_transpose_sparse,
    relu,
)
from .pseudoimage import (
    DensePseudoimage,
    DensityReport,
    SparsePseudoimage,
    density,
    to_dense,
)

__all__ = [
    "VARIANT_DENSE",
    "VARIANT_SPARSE",
    "VARIANT_SPARSE1",
    "VARIANT_SPARSE12",
    "VARIANT_WIDE",
    "VARIANT_TWIN",
    "VARIANTS",
    "MID_COUNTS",
    "UP_KERNEL_SIZES",
    "BlockWeights",
    "BackboneWeights",
    "SparseBackboneResult",
    "dense_trunk_footprints",
    "run_dense_backbone",
    "run_sparse_backbone",
    "run_sparse_dense_twin",
    "head_stub",
]

VARIANT_DENSE = "dense-baseline"
VARIANT_SPARSE = "sparse"
VARIANT_SPARSE1 = "sparse1-dense23"
VARIANT_SPARSE12 = "sparse12-dense3"
VARIANT_WIDE = "sparse-wideconv"
VARIANT_TWIN = "sparse-dense-twin"
VARIANTS = (
    VARIANT_DENSE,
    VARIANT_SPARSE,
    VARIANT_SPARSE1,
    VARIANT_SPARSE12,
    VARIANT_WIDE,
    VARIANT_TWIN,
)

# number of leading blocks executed sparse, per sparse-capable variant
_SPARSE_PREFIX = {
    VARIANT_SPARSE: 3,
    VARIANT_WIDE: 3,
    VARIANT_SPARSE12: 2,
    VARIANT_SPARSE1: 1,
}

MID_COUNTS = (3, 5, 5)
UP_KERNEL_SIZES = (1, 2, 4)


@dataclass(frozen=True)
class BlockWeights:
    """One backbone block: both downsample flavors (they share a batch norm),
    the site-preserving stack, an optional 9x9 wide first conv, and the
    upsample branch."""

    down3x3: ConvLayerWeights
    down2x2: ConvLayerWeights
    down_bn: BatchNormParams
    mid_convs: tuple[ConvLayerWeights, ...]
    mid_bns: tuple[BatchNormParams, ...]
    up_conv: ConvLayerWeights
    up_bn: BatchNormParams
    wide_first: ConvLayerWeights | None = None


def _expect(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


@dataclass(frozen=True)
class BackboneWeights:
    """Weights for all three blocks plus the base width C."""

    base_channels: int
    blocks: tuple[BlockWeights, BlockWeights, BlockWeights]

    def __post_init__(self) -> None:
        c = self.base_channels
        _expect(isinstance(c, int) and c >= 1, f"base_channels must be >= 1, got {c}")
        _expect(len(self.blocks) == 3, f"need 3 blocks, got {len(self.blocks)}")
        ins = (c, c, 2 * c)
        outs = (c, 2 * c, 4 * c)
        for k, blk in enumerate(self.blocks):
            tag = f"block {k + 1}"
            _expect(
                blk.down3x3.kind == KIND_STANDARD
                and blk.down3x3.stride == 2
                and blk.down3x3.kernel.shape == (3, 3, ins[k], outs[k]),
                f"{tag}: down3x3 must be standard 3x3 s2 {ins[k]}->{outs[k]}",
            )
            _expect(
                blk.down2x2.kind == KIND_STANDARD
                and blk.down2x2.stride == 2
                and blk.down2x2.kernel.shape == (2, 2, ins[k], outs[k]),
                f"{tag}: down2x2 must be standard 2x2 s2 {ins[k]}->{outs[k]}",
            )
            _expect(blk.down_bn.channels == outs[k], f"{tag}: down_bn channels != {outs[k]}")
            _expect(
                len(blk.mid_convs) == MID_COUNTS[k] and len(blk.mid_bns) == MID_COUNTS[k],
                f"{tag}: needs {MID_COUNTS[k]} mid convs and batch norms",
            )
            for conv in blk.mid_convs:
                _expect(
                    conv.kind == KIND_SUBMANIFOLD
                    and conv.kernel.shape == (3, 3, outs[k], outs[k]),
                    f"{tag}: mid convs must be submanifold 3x3 {outs[k]}->{outs[k]}",
                )
            for bn in blk.mid_bns:
                _expect(bn.channels == outs[k], f"{tag}: mid bn channels != {outs[k]}")
            if blk.wide_first is not None:
                _expect(
                    blk.wide_first.kind == KIND_SUBMANIFOLD
                    and blk.wide_first.kernel.shape == (9, 9, outs[k], outs[k]),
                    f"{tag}: wide_first must be submanifold 9x9 {outs[k]}->{outs[k]}",
                )
            ku = UP_KERNEL_SIZES[k]
            _expect(
                blk.up_conv.kind == KIND_TRANSPOSE
                and blk.up_conv.kernel.shape == (ku, ku, outs[k], 2 * c),
                f"{tag}: up_conv must be transpose {ku}x{ku} s{ku} {outs[k]}->{2 * c}",
            )
            _expect(blk.up_bn.channels == 2 * c, f"{tag}: up_bn channels != {2 * c}")

    @property
    def out_channels(self) -> int:
        return 6 * self.base_channels


def _as_standard(layer: ConvLayerWeights) -> ConvLayerWeights:
    """Dense execution of a site-preserving layer: same kernel, standard pad."""
    return ConvLayerWeights(layer.kernel, 1, KIND_STANDARD)


def _check_backbone_input(height: int, width: int, channels: int, w: BackboneWeights) -> None:
    if channels != w.base_channels:
        raise ValueError(f"input has {channels} channels, backbone expects {w.base_channels}")
    if height % 8 or width % 8 or height < 8 or width < 8:
        raise ValueError(f"grid must be divisible by 8, got {height}x{width}")


def _dense_block(x: DensePseudoimage, blk: BlockWeights) -> DensePseudoimage:
    cur = relu(batchnorm_dense(conv2d_dense(x, blk.down3x3), blk.down_bn))
    for conv, bn in zip(blk.mid_convs, blk.mid_bns):
        cur = relu(batchnorm_dense(conv2d_dense(cur, _as_standard(conv)), bn))
    return cur


def _dense_upsample(x: DensePseudoimage, blk: BlockWeights) -> DensePseudoimage:
    return relu(batchnorm_dense(conv2d_transpose_dense(x, blk.up_conv), blk.up_bn))


def run_dense_backbone(x: DensePseudoimage, w: BackboneWeights) -> DensePseudoimage:
    """Dense baseline: 3x3 stride-2 downsamples, dense convs and batch norm."""
    _check_backbone_input(x.height, x.width, x.channels, w)
    feats = []
    cur = x
    for blk in w.blocks:
        cur = _dense_block(cur, blk)
        feats.append(cur)
    ups = [_dense_upsample(f, blk).values for f, blk in zip(feats, w.blocks)]
    return DensePseudoimage(
        x.height // 2, x.width // 2, w.out_channels, np.concatenate(ups, axis=2)
    )


def dense_trunk_footprints(
    x: DensePseudoimage, w: BackboneWeights
) -> tuple[DensityReport, ...]:
    """Non-zero footprint after each dense-baseline block, on that block's
    grid. Instrumentation for smearing comparisons with the sparse trunk."""
    _check_backbone_input(x.height, x.width, x.channels, w)
    reports = []
    cur = x
    for blk in w.blocks:
        cur = _dense_block(cur, blk)
        reports.append(_footprint_report(cur))
    return tuple(reports)


def run_sparse_dense_twin(x: DensePseudoimage, w: BackboneWeights) -> DensePseudoimage:
    """Dense execution of the sparse architecture (2x2 s2 downsamples, same
    kernels everywhere). Oracle for the sparse path at full density."""
    _check_backbone_input(x.height, x.width, x.channels, w)
    feats = []
    cur = x
    for blk in w.blocks:
        cur = relu(batchnorm_dense(conv2d_dense(cur, blk.down2x2), blk.down_bn))
        for conv, bn in zip(blk.mid_convs, blk.mid_bns):
            cur = relu(batchnorm_dense(conv2d_dense(cur, _as_standard(conv)), bn))
        feats.append(cur)
    ups = [_dense_upsample(f, blk).values for f, blk in zip(feats, w.blocks)]
    return DensePseudoimage(
        x.height // 2, x.width // 2, w.out_channels, np.concatenate(ups, axis=2)
    )


def _footprint_report(x: DensePseudoimage) -> DensityReport:
    frac = float(np.count_nonzero(np.any(x.values != 0.0, axis=2))) / (x.height * x.width)
    return DensityReport(frac, frac)


@dataclass(frozen=True)
class SparseBackboneResult:
    """Output of a sparse or ablation run.

    block_reports holds one density snapshot per block on that block's grid
    (value footprint for blocks executed dense). downsample_sites holds
    (sites_before, sites_after) for each sparse 2x2 stride-2 downsample.
    trunk_sparse holds the captured sparse trunk output of each sparse block
    when capture_intermediates was set, else None.
    """

    output: DensePseudoimage
    pair_counts: tuple[PairCount, ...]
    block_reports: tuple[DensityReport, ...]
    downsample_sites: tuple[tuple[int, int], ...]
    trunk_sparse: tuple[SparsePseudoimage, ...] | None


def run_sparse_backbone(
    x: SparsePseudoimage,
    w: BackboneWeights,
    variant: str = VARIANT_SPARSE,
    capture_intermediates: bool = False,
) -> SparseBackboneResult:
    """Sparse backbone and its ablations.

    variant selects how many leading blocks run sparse: all three for
    "sparse" and "sparse-wideconv", two for "sparse12-dense3", one for
    "sparse1-dense23". The wideconv variant swaps each block's first
    site-preserving conv for the 9x9 wide kernel. Dense-suffix blocks take
    the trunk through todense once and keep the baseline 3x3 s2 downsample;
    sparse blocks keep their sparse upsample branches either way.
    """
    if variant not in _SPARSE_PREFIX:
        raise ValueError(f"unknown sparse variant {variant!r}; options: {sorted(_SPARSE_PREFIX)}")
    _check_backbone_input(x.height, x.width, x.channels, w)
    if variant == VARIANT_WIDE:
        for k, blk in enumerate(w.blocks):
            if blk.wide_first is None:
                raise ValueError(f"variant {variant!r} needs wide_first weights in block {k + 1}")

    n_sparse = _SPARSE_PREFIX[variant]
    pair_counts: list[PairCount] = []
    reports: list[DensityReport] = []
    down_sites: list[tuple[int, int]] = []
    captured: list[SparsePseudoimage] = []
    feats: list[tuple[str, object]] = []

    cur_sparse = x
    cur_dense: DensePseudoimage | None = None
    for k, blk in enumerate(w.blocks):
        if k < n_sparse:
            before = cur_sparse.num_sites
            cur_sparse, pc = conv2d_sparse(cur_sparse, blk.down2x2)
            pair_counts.append(pc)
            down_sites.append((before, cur_sparse.num_sites))
            cur_sparse = relu(batchnorm_sparse(cur_sparse, blk.down_bn))
            for i, (conv, bn) in enumerate(zip(blk.mid_convs, blk.mid_bns)):
                use = blk.wide_first if variant == VARIANT_WIDE and i == 0 else conv
                cur_sparse, pc = conv2d_subm(cur_sparse, use)
                pair_counts.append(pc)
                cur_sparse = relu(batchnorm_sparse(cur_sparse, bn))
            reports.append(density(cur_sparse))
            if capture_intermediates:
                captured.append(cur_sparse)
            feats.append(("sparse", cur_sparse))
        else:
            if cur_dense is None:
                cur_dense = to_dense(cur_sparse)
            cur_dense = _dense_block(cur_dense, blk)
            reports.append(_footprint_report(cur_dense))
            feats.append(("dense", cur_dense))

    ups = []
    for (tag, feat), blk in zip(feats, w.blocks):
        if tag == "sparse":
            up, pc = conv2d_transpose_sparse(feat, blk.up_conv)
            pair_counts.append(pc)
            up = relu(batchnorm_sparse(up, blk.up_bn))
            ups.append(to_dense(up).values)
        else:
            ups.append(_dense_upsample(feat, blk).values)

    out = DensePseudoimage(
        x.height // 2, x.width // 2, w.out_channels, np.concatenate(ups, axis=2)
    )
    return SparseBackboneResult(
        output=out,
        pair_counts=tuple(pair_counts),
        block_reports=tuple(reports),
        downsample_sites=tuple(down_sites),
        trunk_sparse=tuple(captured) if capture_intermediates else None,
    )


def head_stub(features: DensePseudoimage, head: ConvLayerWeights) -> DensePseudoimage:
    """Detection-head stand-in: one 1x1 stride-1 convolution over the fused map."""
    if head.kind != KIND_STANDARD or head.stride != 1 or head.kernel.shape[:2] != (1, 1):
        raise ValueError("head must be a standard 1x1 stride-1 layer")
    return conv2d_dense(features, head)
