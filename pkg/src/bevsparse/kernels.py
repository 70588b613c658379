"""Dense and sparse 2D convolution primitives, batch norm, and ReLU.

Convolutions never add a bias term; normalization layers follow each one.
All kernels share the same orientation and padding rules so the sparse and
dense paths are numerically interchangeable on matching inputs:

    out[r, c] = sum_{dr, dc} in[r*stride + dr - pad, c*stride + dc - pad] @ K[dr, dc]

Padding by kernel shape:
    odd k, stride 1      pad = (k - 1) // 2, output H x W (site-preserving shapes)
    3x3, stride 2        pad = 1, output ceil(H/2) x ceil(W/2)
    2x2, stride 2        pad = 0, output H/2 x W/2 (requires even H, W)
    transpose k x k, stride k   output H*k x W*k, disjoint k x k block images

Sparse operators consume and produce canonical COO pseudoimages and report a
PairCount describing the work performed. The counting unit is one kernel
application per (Cin, Cout) channel pair: ``pairs`` counts raw
(input site, kernel offset) incidences for standard and transposed sparse
convolutions, and conservatively the full kh*kw window per active site for
submanifold convolutions; ``weighted`` = pairs * Cin * Cout / (kh * kw)
converts incidences to whole-kernel applications, the unit the analytic cost
model uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .pseudoimage import DensePseudoimage, SparsePseudoimage, canonicalize

__all__ = [
    "KIND_STANDARD",
    "KIND_SUBMANIFOLD",
    "KIND_TRANSPOSE",
    "ConvLayerWeights",
    "BatchNormParams",
    "PairCount",
    "output_grid_shape",
    "conv2d_dense",
    "conv2d_sparse",
    "conv2d_subm",
    "conv2d_transpose_dense",
    "conv2d_transpose_sparse",
    "batchnorm_dense",
    "batchnorm_sparse",
    "relu",
]

KIND_STANDARD = "standard"
KIND_SUBMANIFOLD = "submanifold"
KIND_TRANSPOSE = "transpose"

_KINDS = (KIND_STANDARD, KIND_SUBMANIFOLD, KIND_TRANSPOSE)
_TRANSPOSE_SHAPES = {(1, 1, 1), (2, 2, 2), (4, 4, 4)}


def _readonly_f32(arr: np.ndarray, what: str) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(arr, dtype=np.float32))
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{what} must be finite")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ConvLayerWeights:
    """Kernel tensor (kh, kw, cin, cout) plus stride and operator kind."""

    kernel: np.ndarray
    stride: int
    kind: str

    def __post_init__(self) -> None:
        kernel = np.asarray(self.kernel, dtype=np.float32)
        if kernel.ndim != 4:
            raise ValueError(f"kernel must be (kh, kw, cin, cout), got {kernel.shape}")
        kh, kw, cin, cout = kernel.shape
        if min(kh, kw, cin, cout) < 1:
            raise ValueError(f"kernel dims must be positive, got {kernel.shape}")
        if self.kind not in _KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.kind == KIND_SUBMANIFOLD:
            if self.stride != 1 or kh != kw or kh % 2 == 0:
                raise ValueError("submanifold conv requires odd square kernel, stride 1")
        elif self.kind == KIND_TRANSPOSE:
            if (kh, kw, self.stride) not in _TRANSPOSE_SHAPES:
                raise ValueError(
                    f"transpose conv supports (k, k, stride=k) for k in 1,2,4, got "
                    f"({kh}, {kw}, stride {self.stride})"
                )
        else:
            if self.stride == 1:
                if kh != kw or kh % 2 == 0:
                    raise ValueError("stride-1 conv requires odd square kernel")
            elif self.stride == 2:
                if (kh, kw) not in ((3, 3), (2, 2)):
                    raise ValueError("stride-2 conv supports 3x3 or 2x2 kernels")
            else:
                raise ValueError(f"unsupported stride {self.stride}")
        object.__setattr__(self, "kernel", _readonly_f32(kernel, "kernel"))

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[2]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[3]


@dataclass(frozen=True)
class BatchNormParams:
    """Inference-form batch norm: y = gamma * (x - mean) / sqrt(var + eps) + beta."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float

    def __post_init__(self) -> None:
        gamma = _readonly_f32(np.atleast_1d(self.gamma), "gamma")
        c = gamma.shape[0]
        for name in ("beta", "mean", "var"):
            arr = _readonly_f32(np.atleast_1d(getattr(self, name)), name)
            if arr.shape != (c,):
                raise ValueError(f"{name} shape {arr.shape} != ({c},)")
            object.__setattr__(self, name, arr)
        if np.any(self.var < 0):
            raise ValueError("var must be non-negative")
        if not (math.isfinite(self.eps) and self.eps >= 0):
            raise ValueError("eps must be non-negative")
        if np.any(self.var + self.eps <= 0):
            raise ValueError("var + eps must be positive")
        object.__setattr__(self, "gamma", gamma)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass(frozen=True)
class PairCount:
    """Work performed by one sparse convolution.

    pairs: (input site, kernel offset) incidences; submanifold layers report
    the full kh*kw window per active site, an intentional over-count that
    matches the analytic model's saturated caps.
    weighted: pairs * Cin * Cout / (kh * kw), whole kernel applications.
    """

    kernel_shape: tuple[int, int]
    kind: str
    pairs: int
    weighted: float

    def __post_init__(self) -> None:
        kh, kw = self.kernel_shape
        if kh < 1 or kw < 1:
            raise ValueError(f"bad kernel_shape {self.kernel_shape}")
        if self.kind not in _KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.pairs < 0 or self.weighted < 0:
            raise ValueError("counts must be non-negative")


def _pair_count(layer: ConvLayerWeights, pairs: int) -> PairCount:
    kh, kw, cin, cout = layer.kernel.shape
    return PairCount(
        kernel_shape=(kh, kw),
        kind=layer.kind,
        pairs=int(pairs),
        weighted=pairs * cin * cout / (kh * kw),
    )


def _padding(layer: ConvLayerWeights) -> int:
    kh, kw, _, _ = layer.kernel.shape
    if layer.kind == KIND_SUBMANIFOLD or layer.stride == 1:
        return (kh - 1) // 2
    return 1 if (kh, kw) == (3, 3) else 0


def output_grid_shape(height: int, width: int, layer: ConvLayerWeights) -> tuple[int, int]:
    """Output grid for a layer applied to an H x W input."""
    kh, kw, _, _ = layer.kernel.shape
    if layer.kind == KIND_TRANSPOSE:
        return height * layer.stride, width * layer.stride
    if layer.kind == KIND_SUBMANIFOLD or layer.stride == 1:
        return height, width
    if (kh, kw) == (2, 2):
        if height % 2 or width % 2:
            raise ValueError(f"2x2 stride-2 conv requires even grid, got {height}x{width}")
        return height // 2, width // 2
    return -(-height // 2), -(-width // 2)


def _check_channels(channels: int, layer: ConvLayerWeights) -> None:
    if channels != layer.in_channels:
        raise ValueError(f"input has {channels} channels, kernel expects {layer.in_channels}")


def conv2d_dense(x: DensePseudoimage, layer: ConvLayerWeights) -> DensePseudoimage:
    """Standard dense convolution via im2col and one GEMM."""
    if layer.kind != KIND_STANDARD:
        raise ValueError(f"conv2d_dense requires a standard layer, got {layer.kind}")
    _check_channels(x.channels, layer)
    kh, kw, cin, cout = layer.kernel.shape
    pad = _padding(layer)
    out_h, out_w = output_grid_shape(x.height, x.width, layer)
    if pad:
        padded = np.zeros((x.height + 2 * pad, x.width + 2 * pad, cin), dtype=np.float32)
        padded[pad : pad + x.height, pad : pad + x.width] = x.values
    else:
        padded = x.values
    win = sliding_window_view(padded, (kh, kw), axis=(0, 1))
    win = win[:: layer.stride, :: layer.stride]
    patches = np.moveaxis(win, 2, 4).reshape(out_h * out_w, kh * kw * cin)
    out = patches @ layer.kernel.reshape(kh * kw * cin, cout)
    return DensePseudoimage(out_h, out_w, cout, out.reshape(out_h, out_w, cout))


def conv2d_transpose_dense(x: DensePseudoimage, layer: ConvLayerWeights) -> DensePseudoimage:
    """Transposed dense convolution; stride equals kernel size, so each input
    cell owns a disjoint k x k output block."""
    if layer.kind != KIND_TRANSPOSE:
        raise ValueError(f"conv2d_transpose_dense requires a transpose layer, got {layer.kind}")
    _check_channels(x.channels, layer)
    kh, kw, cin, cout = layer.kernel.shape
    s = layer.stride
    out = np.empty((x.height * s, x.width * s, cout), dtype=np.float32)
    flat = x.values.reshape(-1, cin)
    for dr in range(kh):
        for dc in range(kw):
            block = flat @ layer.kernel[dr, dc]
            out[dr::s, dc::s] = block.reshape(x.height, x.width, cout)
    return DensePseudoimage(x.height * s, x.width * s, cout, out)


def _empty_sparse(height: int, width: int, channels: int) -> SparsePseudoimage:
    return SparsePseudoimage(
        height,
        width,
        channels,
        np.zeros((0, 2), dtype=np.int64),
        np.zeros((0, channels), dtype=np.float32),
    )


def conv2d_sparse(
    x: SparsePseudoimage, layer: ConvLayerWeights
) -> tuple[SparsePseudoimage, PairCount]:
    """Standard convolution over a COO input.

    Output sites are exactly the cells reached by some input site through the
    kernel window (smearing for stride 1; never more sites than input for the
    2x2 stride-2 case, whose windows partition the grid).
    """
    if layer.kind != KIND_STANDARD:
        raise ValueError(f"conv2d_sparse requires a standard layer, got {layer.kind}")
    _check_channels(x.channels, layer)
    kh, kw, cin, cout = layer.kernel.shape
    s = layer.stride
    pad = _padding(layer)
    out_h, out_w = output_grid_shape(x.height, x.width, layer)
    x = canonicalize(x)
    if x.num_sites == 0:
        return _empty_sparse(out_h, out_w, cout), _pair_count(layer, 0)

    rows = x.coordinates[:, 0]
    cols = x.coordinates[:, 1]
    contribs: list[tuple[int, int, np.ndarray, np.ndarray]] = []
    pairs = 0
    for dr in range(kh):
        for dc in range(kw):
            rn = rows + (pad - dr)
            cn = cols + (pad - dc)
            ok = (rn >= 0) & (cn >= 0) & (rn % s == 0) & (cn % s == 0)
            ro = rn // s
            co = cn // s
            ok &= (ro < out_h) & (co < out_w)
            idx = np.nonzero(ok)[0]
            if idx.size == 0:
                continue
            contribs.append((dr, dc, idx, ro[idx] * out_w + co[idx]))
            pairs += idx.size
    if not contribs:
        return _empty_sparse(out_h, out_w, cout), _pair_count(layer, 0)

    uniq = np.unique(np.concatenate([enc for _, _, _, enc in contribs]))
    out_vals = np.zeros((uniq.size, cout), dtype=np.float32)
    for dr, dc, idx, enc in contribs:
        # for a fixed offset each input site hits a distinct output site,
        # so fancy-index accumulation is safe
        out_vals[np.searchsorted(uniq, enc)] += x.site_values[idx] @ layer.kernel[dr, dc]
    coords = np.stack([uniq // out_w, uniq % out_w], axis=1)
    out = SparsePseudoimage(out_h, out_w, cout, coords, out_vals)
    return out, _pair_count(layer, pairs)


def conv2d_subm(
    x: SparsePseudoimage, layer: ConvLayerWeights
) -> tuple[SparsePseudoimage, PairCount]:
    """Submanifold convolution: output sites equal input sites, and each
    output gathers only input sites inside its window. No smearing."""
    if layer.kind != KIND_SUBMANIFOLD:
        raise ValueError(f"conv2d_subm requires a submanifold layer, got {layer.kind}")
    _check_channels(x.channels, layer)
    kh, kw, cin, cout = layer.kernel.shape
    half = kh // 2
    x = canonicalize(x)
    n = x.num_sites
    if n == 0:
        return _empty_sparse(x.height, x.width, cout), _pair_count(layer, 0)

    rows = x.coordinates[:, 0]
    cols = x.coordinates[:, 1]
    enc = rows * x.width + cols
    out_vals = np.zeros((n, cout), dtype=np.float32)
    for dr in range(kh):
        for dc in range(kw):
            nr = rows + (dr - half)
            nc = cols + (dc - half)
            ok = (nr >= 0) & (nr < x.height) & (nc >= 0) & (nc < x.width)
            idx = np.nonzero(ok)[0]
            if idx.size == 0:
                continue
            pos = np.searchsorted(enc, nr[idx] * x.width + nc[idx])
            pos = np.minimum(pos, n - 1)
            hit = enc[pos] == nr[idx] * x.width + nc[idx]
            src = pos[hit]
            dst = idx[hit]
            out_vals[dst] += x.site_values[src] @ layer.kernel[dr, dc]
    out = SparsePseudoimage(x.height, x.width, cout, x.coordinates, out_vals)
    # conservative cap: a full window per active site
    return out, _pair_count(layer, kh * kw * n)


def conv2d_transpose_sparse(
    x: SparsePseudoimage, layer: ConvLayerWeights
) -> tuple[SparsePseudoimage, PairCount]:
    """Transposed convolution over a COO input. Because stride equals kernel
    size, input sites map to disjoint k x k output blocks and the output has
    exactly num_sites * k * k sites."""
    if layer.kind != KIND_TRANSPOSE:
        raise ValueError(f"conv2d_transpose_sparse requires a transpose layer, got {layer.kind}")
    _check_channels(x.channels, layer)
    kh, kw, cin, cout = layer.kernel.shape
    s = layer.stride
    out_h, out_w = x.height * s, x.width * s
    x = canonicalize(x)
    n = x.num_sites
    if n == 0:
        return _empty_sparse(out_h, out_w, cout), _pair_count(layer, 0)

    # one GEMM produces all kh*kw block entries per site
    mixed = x.site_values @ np.moveaxis(layer.kernel, 2, 0).reshape(cin, kh * kw * cout)
    vals = mixed.reshape(n * kh * kw, cout)
    dr = np.arange(kh, dtype=np.int64)[None, :, None]
    dc = np.arange(kw, dtype=np.int64)[None, None, :]
    r_out = np.broadcast_to(x.coordinates[:, 0, None, None] * s + dr, (n, kh, kw)).reshape(-1)
    c_out = np.broadcast_to(x.coordinates[:, 1, None, None] * s + dc, (n, kh, kw)).reshape(-1)
    enc = r_out * out_w + c_out
    order = np.argsort(enc, kind="stable")
    coords = np.stack([r_out[order], c_out[order]], axis=1)
    out = SparsePseudoimage(out_h, out_w, cout, coords, vals[order])
    return out, _pair_count(layer, n * kh * kw)


def _bn_fold(bn: BatchNormParams) -> tuple[np.ndarray, np.ndarray]:
    inv = 1.0 / np.sqrt(bn.var.astype(np.float64) + bn.eps)
    scale = bn.gamma.astype(np.float64) * inv
    bias = bn.beta.astype(np.float64) - bn.mean.astype(np.float64) * scale
    return scale.astype(np.float32), bias.astype(np.float32)


def _check_bn_channels(channels: int, bn: BatchNormParams) -> None:
    if channels != bn.channels:
        raise ValueError(f"input has {channels} channels, batch norm expects {bn.channels}")


def batchnorm_dense(x: DensePseudoimage, bn: BatchNormParams) -> DensePseudoimage:
    """Applies the affine normalization to every cell. With beta != 0 this
    turns void cells non-zero: dense BN destroys sparsity."""
    _check_bn_channels(x.channels, bn)
    scale, bias = _bn_fold(bn)
    return DensePseudoimage(x.height, x.width, x.channels, x.values * scale + bias)


def batchnorm_sparse(x: SparsePseudoimage, bn: BatchNormParams) -> SparsePseudoimage:
    """Non-zero-only batch norm: normalizes stored sites, leaves void cells
    untouched, and never changes the active set."""
    _check_bn_channels(x.channels, bn)
    scale, bias = _bn_fold(bn)
    return SparsePseudoimage(
        x.height, x.width, x.channels, x.coordinates, x.site_values * scale + bias
    )


def relu(x: DensePseudoimage | SparsePseudoimage) -> DensePseudoimage | SparsePseudoimage:
    """max(0, .) on values; sparse sites whose vector becomes all-zero stay
    in the active set."""
    if isinstance(x, DensePseudoimage):
        return DensePseudoimage(x.height, x.width, x.channels, np.maximum(x.values, 0.0))
    if isinstance(x, SparsePseudoimage):
        return SparsePseudoimage(
            x.height, x.width, x.channels, x.coordinates, np.maximum(x.site_values, 0.0)
        )
    raise TypeError(f"relu expects a pseudoimage, got {type(x).__name__}")
