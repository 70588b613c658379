"""Convolution and normalization primitives against 64-bit oracles."""

from __future__ import annotations

import numpy as np
import pytest

from bevsparse import (
    BatchNormParams,
    ConvLayerWeights,
    KIND_STANDARD,
    KIND_SUBMANIFOLD,
    KIND_TRANSPOSE,
    PairCount,
    SparsePseudoimage,
    batchnorm_dense,
    batchnorm_sparse,
    conv2d_dense,
    conv2d_sparse,
    conv2d_subm,
    conv2d_transpose_dense,
    conv2d_transpose_sparse,
    from_dense,
    output_grid_shape,
    relu,
    to_dense,
)
from conftest import (
    random_bn,
    random_layer,
    random_sparse,
    random_subm_layer,
    random_transpose_layer,
)
from oracles import (
    batchnorm_literal,
    conv2d_loop,
    conv2d_offsets,
    conv2d_transpose_loop,
    conv2d_transpose_offsets,
    subm_masked_oracle,
)

TOL = 1e-3


def _dense_image(rng: np.random.Generator, h: int, w: int, c: int):
    from bevsparse import DensePseudoimage

    return DensePseudoimage(h, w, c, rng.standard_normal((h, w, c)).astype(np.float32))


class TestLayerValidation:
    def test_kernel_rank_and_kind(self):
        k = np.zeros((3, 3, 2, 4), dtype=np.float32)
        with pytest.raises(ValueError):
            ConvLayerWeights(np.zeros((3, 3, 2)), 1, KIND_STANDARD)
        with pytest.raises(ValueError):
            ConvLayerWeights(k, 1, "upside-down")

    def test_submanifold_requires_odd_square_stride1(self):
        with pytest.raises(ValueError):
            ConvLayerWeights(np.zeros((2, 2, 2, 2), dtype=np.float32), 1, KIND_SUBMANIFOLD)
        with pytest.raises(ValueError):
            ConvLayerWeights(np.zeros((3, 3, 2, 2), dtype=np.float32), 2, KIND_SUBMANIFOLD)
        ConvLayerWeights(np.zeros((9, 9, 2, 2), dtype=np.float32), 1, KIND_SUBMANIFOLD)

    def test_transpose_requires_matching_kernel_and_stride(self):
        for k in (1, 2, 4):
            ConvLayerWeights(np.zeros((k, k, 2, 2), dtype=np.float32), k, KIND_TRANSPOSE)
        with pytest.raises(ValueError):
            ConvLayerWeights(np.zeros((3, 3, 2, 2), dtype=np.float32), 3, KIND_TRANSPOSE)
        with pytest.raises(ValueError):
            ConvLayerWeights(np.zeros((2, 2, 2, 2), dtype=np.float32), 4, KIND_TRANSPOSE)

    def test_standard_stride2_kernel_shapes(self):
        ConvLayerWeights(np.zeros((3, 3, 2, 2), dtype=np.float32), 2, KIND_STANDARD)
        ConvLayerWeights(np.zeros((2, 2, 2, 2), dtype=np.float32), 2, KIND_STANDARD)
        with pytest.raises(ValueError):
            ConvLayerWeights(np.zeros((4, 4, 2, 2), dtype=np.float32), 2, KIND_STANDARD)
        with pytest.raises(ValueError):
            ConvLayerWeights(np.zeros((3, 3, 2, 2), dtype=np.float32), 3, KIND_STANDARD)

    def test_kind_dispatch_guards(self):
        rng = np.random.default_rng(0)
        x = random_sparse(rng, 8, 8, 2, 0.25)
        std = random_layer(rng, 3, 3, 2, 2)
        subm = random_subm_layer(rng, 3, 2)
        tr = random_transpose_layer(rng, 2, 2, 2)
        with pytest.raises(ValueError):
            conv2d_subm(x, std)
        with pytest.raises(ValueError):
            conv2d_sparse(x, subm)
        with pytest.raises(ValueError):
            conv2d_transpose_sparse(x, std)
        with pytest.raises(ValueError):
            conv2d_dense(to_dense(x), tr)
        with pytest.raises(ValueError):
            conv2d_transpose_dense(to_dense(x), std)

    def test_channel_mismatch_rejected(self):
        rng = np.random.default_rng(1)
        x = random_sparse(rng, 8, 8, 3, 0.25)
        layer = random_layer(rng, 3, 3, 2, 2)
        with pytest.raises(ValueError):
            conv2d_sparse(x, layer)


class TestOutputGridShape:
    def test_stride1_preserves_shape(self):
        layer = ConvLayerWeights(np.zeros((3, 3, 1, 1), dtype=np.float32), 1, KIND_STANDARD)
        assert output_grid_shape(10, 14, layer) == (10, 14)

    def test_3x3_stride2_ceil_halves(self):
        layer = ConvLayerWeights(np.zeros((3, 3, 1, 1), dtype=np.float32), 2, KIND_STANDARD)
        assert output_grid_shape(10, 14, layer) == (5, 7)
        assert output_grid_shape(9, 13, layer) == (5, 7)

    def test_2x2_stride2_exact_halves_even_only(self):
        layer = ConvLayerWeights(np.zeros((2, 2, 1, 1), dtype=np.float32), 2, KIND_STANDARD)
        assert output_grid_shape(10, 14, layer) == (5, 7)
        with pytest.raises(ValueError):
            output_grid_shape(9, 14, layer)

    def test_transpose_scales_by_kernel(self):
        for k in (1, 2, 4):
            layer = ConvLayerWeights(np.zeros((k, k, 1, 1), dtype=np.float32), k, KIND_TRANSPOSE)
            assert output_grid_shape(6, 10, layer) == (6 * k, 10 * k)


class TestOrientation:
    def test_corner_tap_lands_down_right(self):
        """out[r, c] = sum_dr,dc x[r*s + dr - pad, c*s + dc - pad] * K[dr, dc]:
        a kernel with only K[0, 0] set shifts the image down-right by pad."""
        kernel = np.zeros((3, 3, 1, 1), dtype=np.float32)
        kernel[0, 0, 0, 0] = 1.0
        layer = ConvLayerWeights(kernel, 1, KIND_STANDARD)
        x = SparsePseudoimage(
            5, 5, 1, np.array([[2, 1]]), np.array([[7.0]], dtype=np.float32)
        )
        dense_out = conv2d_dense(to_dense(x), layer)
        assert dense_out.values[3, 2, 0] == 7.0
        assert np.count_nonzero(dense_out.values) == 1
        sparse_out, _ = conv2d_sparse(x, layer)
        assert np.array_equal(to_dense(sparse_out).values, dense_out.values)

    def test_transpose_tap_addresses_output_phase(self):
        """Tap (dr, dc) of a k-transpose writes phase (r*k + dr, c*k + dc)."""
        kernel = np.zeros((2, 2, 1, 1), dtype=np.float32)
        kernel[1, 0, 0, 0] = 3.0
        layer = ConvLayerWeights(kernel, 2, KIND_TRANSPOSE)
        x = SparsePseudoimage(
            4, 4, 1, np.array([[1, 2]]), np.array([[2.0]], dtype=np.float32)
        )
        out = conv2d_transpose_dense(to_dense(x), layer)
        assert out.values[3, 4, 0] == 6.0
        assert np.count_nonzero(out.values) == 1


class TestDenseAgainstLoopOracle:
    def test_standard_shapes_match_direct_definition(self):
        rng = np.random.default_rng(10)
        cases = [(3, 3, 1, 1), (3, 3, 2, 1), (2, 2, 2, 0), (1, 1, 1, 0)]
        for kh, kw, stride, pad in cases:
            x = _dense_image(rng, 8, 10, 3)
            layer = random_layer(rng, kh, kw, 3, 4, stride=stride)
            got = conv2d_dense(x, layer)
            want = conv2d_loop(x.values, layer.kernel, stride, pad)
            assert got.values.shape == want.shape
            np.testing.assert_allclose(got.values, want, atol=TOL)

    def test_transpose_matches_direct_definition(self):
        rng = np.random.default_rng(11)
        for k in (1, 2, 4):
            x = _dense_image(rng, 5, 7, 3)
            layer = random_transpose_layer(rng, k, 3, 2)
            got = conv2d_transpose_dense(x, layer)
            want = conv2d_transpose_loop(x.values, layer.kernel)
            np.testing.assert_allclose(got.values, want, atol=TOL)

    def test_fast_oracle_agrees_with_loop_oracle(self):
        """The offset-accumulation oracle used at scale is itself validated
        against the direct definition."""
        rng = np.random.default_rng(12)
        for kh, kw, stride, pad in [(3, 3, 1, 1), (3, 3, 2, 1), (2, 2, 2, 0)]:
            vals = rng.standard_normal((7, 9, 2))
            kernel = rng.standard_normal((kh, kw, 2, 3))
            np.testing.assert_allclose(
                conv2d_offsets(vals, kernel, stride, pad),
                conv2d_loop(vals, kernel, stride, pad),
                atol=1e-10,
            )
        vals = rng.standard_normal((4, 5, 2))
        kernel = rng.standard_normal((2, 2, 2, 3))
        np.testing.assert_allclose(
            conv2d_transpose_offsets(vals, kernel),
            conv2d_transpose_loop(vals, kernel),
            atol=1e-10,
        )


class TestSparseStandardConv:
    def test_matches_dense_oracle_across_densities(self):
        rng = np.random.default_rng(20)
        for density_target in (0.0, 0.01, 0.1, 0.5, 1.0):
            for kh, kw, stride, pad in [(3, 3, 1, 1), (3, 3, 2, 1), (2, 2, 2, 0)]:
                x = random_sparse(rng, 16, 16, 3, density_target)
                layer = random_layer(rng, kh, kw, 3, 4, stride=stride)
                got, _ = conv2d_sparse(x, layer)
                want = conv2d_offsets(to_dense(x).values, layer.kernel, stride, pad)
                np.testing.assert_allclose(to_dense(got).values, want, atol=TOL)

    def test_output_canonical_and_in_bounds(self):
        rng = np.random.default_rng(21)
        for _ in range(20):
            x = random_sparse(rng, 12, 16, 2, rng.uniform(0, 0.5))
            layer = random_layer(rng, 3, 3, 2, 2)
            out, _ = conv2d_sparse(x, layer)
            assert out.is_canonical
            assert out.height == 12 and out.width == 16

    def test_smearing_bound_3x3_stride1(self):
        """|sites_out| <= min(9 * |sites_in|, H * W) for the 3x3 stride-1 conv."""
        rng = np.random.default_rng(22)
        for _ in range(50):
            x = random_sparse(rng, 16, 16, 2, rng.uniform(0, 1))
            layer = random_layer(rng, 3, 3, 2, 2)
            out, _ = conv2d_sparse(x, layer)
            assert out.num_sites <= min(9 * x.num_sites, 16 * 16)

    def test_2x2_stride2_never_increases_sites(self):
        """Each input site contributes to exactly one output cell, so the
        downsample is a partition: |sites_out| <= |sites_in|."""
        rng = np.random.default_rng(23)
        for _ in range(50):
            x = random_sparse(rng, 16, 16, 2, rng.uniform(0, 1))
            layer = random_layer(rng, 2, 2, 2, 3, stride=2)
            out, _ = conv2d_sparse(x, layer)
            assert out.num_sites <= x.num_sites

    def test_2x2_stride2_output_sites_are_parent_cells(self):
        rng = np.random.default_rng(24)
        x = random_sparse(rng, 16, 16, 2, 0.2)
        layer = random_layer(rng, 2, 2, 2, 2, stride=2)
        out, _ = conv2d_sparse(x, layer)
        want = np.unique(
            (x.coordinates[:, 0] // 2) * 8 + (x.coordinates[:, 1] // 2)
        )
        got = out.coordinates[:, 0] * 8 + out.coordinates[:, 1]
        assert np.array_equal(got, want)

    def test_empty_input_passes_through(self):
        x = SparsePseudoimage(
            8, 8, 2, np.zeros((0, 2), dtype=np.int64), np.zeros((0, 2), dtype=np.float32)
        )
        rng = np.random.default_rng(25)
        out, pc = conv2d_sparse(x, random_layer(rng, 3, 3, 2, 2))
        assert out.num_sites == 0
        assert pc.pairs == 0 and pc.weighted == 0.0

    def test_stored_zero_sites_still_smear_geometrically(self):
        """Site membership is geometric: a stored all-zero site still produces
        output sites (with zero values), matching the no-pruning rule."""
        x = SparsePseudoimage(
            8, 8, 2, np.array([[4, 4]]), np.zeros((1, 2), dtype=np.float32)
        )
        rng = np.random.default_rng(26)
        out, _ = conv2d_sparse(x, random_layer(rng, 3, 3, 2, 2))
        assert out.num_sites == 9
        assert np.all(out.site_values == 0.0)


class TestSubmanifoldConv:
    def test_preserves_coordinates_exactly(self):
        rng = np.random.default_rng(30)
        for _ in range(50):
            c = int(rng.integers(1, 6))
            x = random_sparse(rng, 16, 16, c, rng.uniform(0, 1))
            out, _ = conv2d_subm(x, random_subm_layer(rng, 3, c))
            assert np.array_equal(out.coordinates, x.coordinates)

    def test_matches_masked_oracle(self):
        rng = np.random.default_rng(31)
        for _ in range(30):
            x = random_sparse(rng, 12, 12, 3, rng.uniform(0.05, 0.8))
            layer = random_subm_layer(rng, 3, 3)
            out, _ = conv2d_subm(x, layer)
            want = subm_masked_oracle(x, layer.kernel)
            np.testing.assert_allclose(to_dense(out).values, want, atol=TOL)

    def test_off_site_outputs_exactly_zero(self):
        rng = np.random.default_rng(32)
        x = random_sparse(rng, 10, 10, 2, 0.3)
        out, _ = conv2d_subm(x, random_subm_layer(rng, 3, 2))
        dense = to_dense(out).values
        mask = np.zeros((10, 10), dtype=bool)
        mask[x.coordinates[:, 0], x.coordinates[:, 1]] = True
        assert np.all(dense[~mask] == 0.0)

    def test_wide_9x9_kernel_supported(self):
        rng = np.random.default_rng(33)
        x = random_sparse(rng, 16, 16, 2, 0.2)
        layer = random_subm_layer(rng, 9, 2)
        out, pc = conv2d_subm(x, layer)
        assert np.array_equal(out.coordinates, x.coordinates)
        want = subm_masked_oracle(x, layer.kernel)
        np.testing.assert_allclose(to_dense(out).values, want, atol=TOL)
        assert pc.pairs == 81 * x.num_sites

    def test_pair_count_is_full_window_per_site(self):
        """Work is counted as one full kernel window per active site, the
        conservative accounting the analytic bounds assume."""
        rng = np.random.default_rng(34)
        for _ in range(10):
            x = random_sparse(rng, 16, 16, 2, rng.uniform(0, 1))
            _, pc = conv2d_subm(x, random_subm_layer(rng, 3, 2))
            assert pc.pairs == 9 * x.num_sites
            assert pc.weighted == pytest.approx(x.num_sites * 4, rel=1e-12)


class TestTransposeSparse:
    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(40)
        for k in (1, 2, 4):
            for density_target in (0.0, 0.1, 0.6, 1.0):
                x = random_sparse(rng, 8, 8, 3, density_target)
                layer = random_transpose_layer(rng, k, 3, 2)
                got, _ = conv2d_transpose_sparse(x, layer)
                want = conv2d_transpose_offsets(to_dense(x).values, layer.kernel)
                np.testing.assert_allclose(to_dense(got).values, want, atol=TOL)

    def test_each_site_scatters_disjoint_block(self):
        """k x k transpose maps n input sites to exactly n * k^2 output sites
        (blocks of distinct inputs never overlap when stride == kernel)."""
        rng = np.random.default_rng(41)
        for k in (1, 2, 4):
            x = random_sparse(rng, 8, 8, 2, 0.4)
            out, pc = conv2d_transpose_sparse(x, random_transpose_layer(rng, k, 2, 2))
            assert out.num_sites == x.num_sites * k * k
            assert out.is_canonical
            assert pc.pairs == x.num_sites * k * k

    def test_output_grid_scales(self):
        rng = np.random.default_rng(42)
        x = random_sparse(rng, 8, 12, 2, 0.3)
        out, _ = conv2d_transpose_sparse(x, random_transpose_layer(rng, 4, 2, 2))
        assert (out.height, out.width) == (32, 48)


class TestPairCountUnits:
    def test_weighted_is_pairs_scaled_by_channel_ratio(self):
        rng = np.random.default_rng(50)
        x = random_sparse(rng, 16, 16, 3, 0.2)
        cases = [
            (conv2d_sparse, random_layer(rng, 3, 3, 3, 5)),
            (conv2d_sparse, random_layer(rng, 2, 2, 3, 5, stride=2)),
            (conv2d_subm, random_subm_layer(rng, 3, 3)),
            (conv2d_transpose_sparse, random_transpose_layer(rng, 2, 3, 5)),
        ]
        for op, layer in cases:
            _, pc = op(x, layer)
            kh, kw = layer.kernel.shape[:2]
            cin, cout = layer.kernel.shape[2], layer.kernel.shape[3]
            assert pc.weighted == pytest.approx(pc.pairs * cin * cout / (kh * kw), rel=1e-12)
            assert pc.kernel_shape == (kh, kw)

    def test_weighted_never_exceeds_dense_counterpart(self):
        """Sparse work never exceeds the dense op's weighted count of
        |output cells| * Cin * Cout."""
        rng = np.random.default_rng(51)
        for _ in range(30):
            x = random_sparse(rng, 16, 16, 2, rng.uniform(0, 1))
            layer = random_layer(rng, 3, 3, 2, 3)
            _, pc = conv2d_sparse(x, layer)
            assert pc.weighted <= 16 * 16 * 2 * 3 + 1e-9
            _, pc = conv2d_subm(x, random_subm_layer(rng, 3, 2))
            assert pc.weighted <= 16 * 16 * 2 * 2 + 1e-9
            layer = random_transpose_layer(rng, 2, 2, 3)
            _, pc = conv2d_transpose_sparse(x, layer)
            assert pc.weighted <= (32 * 32) * 2 * 3 / 4 + 1e-9

    def test_full_density_equals_dense_counts_backbone_shapes(self):
        """At density 1.0 the sparse ops the backbone runs do exactly the
        dense op's work: SubM (full window per site), the 2x2 stride-2
        downsample, and all three transposes."""
        rng = np.random.default_rng(52)
        h = w = 16
        x = random_sparse(rng, h, w, 2, 1.0)
        _, pc = conv2d_subm(x, random_subm_layer(rng, 3, 2))
        assert pc.weighted == float(h * w * 2 * 2)
        _, pc = conv2d_sparse(x, random_layer(rng, 2, 2, 2, 3, stride=2))
        assert pc.weighted == float((h // 2) * (w // 2) * 2 * 3)
        for k in (1, 2, 4):
            _, pc = conv2d_transpose_sparse(x, random_transpose_layer(rng, k, 2, 3))
            assert pc.weighted == float(h * w * 2 * 3)

    def test_full_density_standard_3x3_has_boundary_deficit(self):
        """The standard 3x3 sparse conv counts true incidences, which at full
        density fall short of 9HW by the zero-padding boundary deficit
        6(H + W) - 4; this shape never runs sparsely inside the backbone."""
        rng = np.random.default_rng(53)
        h, w = 12, 20
        x = random_sparse(rng, h, w, 2, 1.0)
        _, pc = conv2d_sparse(x, random_layer(rng, 3, 3, 2, 2))
        assert pc.pairs == 9 * h * w - 6 * (h + w) + 4


class TestBatchNorm:
    def test_dense_matches_literal_formula(self):
        rng = np.random.default_rng(60)
        x = _dense_image(rng, 8, 8, 4)
        bn = random_bn(rng, 4)
        got = batchnorm_dense(x, bn)
        want = batchnorm_literal(x.values, bn.gamma, bn.beta, bn.mean, bn.var, bn.eps)
        np.testing.assert_allclose(got.values, want, atol=1e-4)

    def test_sparse_matches_literal_on_stored_sites(self):
        rng = np.random.default_rng(61)
        x = random_sparse(rng, 8, 8, 4, 0.4)
        bn = random_bn(rng, 4)
        got = batchnorm_sparse(x, bn)
        want = batchnorm_literal(x.site_values, bn.gamma, bn.beta, bn.mean, bn.var, bn.eps)
        np.testing.assert_allclose(got.site_values, want, atol=1e-4)
        assert np.array_equal(got.coordinates, x.coordinates)

    def test_sparse_touches_only_stored_sites(self):
        """Normalization with a non-zero shift moves stored values but leaves
        unstored cells at exactly zero when projected dense."""
        rng = np.random.default_rng(62)
        x = random_sparse(rng, 8, 8, 2, 0.25)
        bn = random_bn(rng, 2)
        dense = to_dense(batchnorm_sparse(x, bn)).values
        mask = np.zeros((8, 8), dtype=bool)
        mask[x.coordinates[:, 0], x.coordinates[:, 1]] = True
        assert np.all(dense[~mask] == 0.0)
        assert np.any(dense[mask] != 0.0)

    def test_zero_eps_with_positive_variance_works(self):
        rng = np.random.default_rng(63)
        x = _dense_image(rng, 4, 4, 2)
        bn = BatchNormParams(
            gamma=np.ones(2, dtype=np.float32),
            beta=np.zeros(2, dtype=np.float32),
            mean=np.zeros(2, dtype=np.float32),
            var=np.full(2, 4.0, dtype=np.float32),
            eps=0.0,
        )
        got = batchnorm_dense(x, bn)
        np.testing.assert_allclose(got.values, x.values / 2.0, atol=1e-6)

    def test_degenerate_normalizer_rejected(self):
        with pytest.raises(ValueError):
            BatchNormParams(
                gamma=np.ones(1, dtype=np.float32),
                beta=np.zeros(1, dtype=np.float32),
                mean=np.zeros(1, dtype=np.float32),
                var=np.zeros(1, dtype=np.float32),
                eps=0.0,
            )
        with pytest.raises(ValueError):
            BatchNormParams(
                gamma=np.ones(1, dtype=np.float32),
                beta=np.zeros(1, dtype=np.float32),
                mean=np.zeros(1, dtype=np.float32),
                var=np.ones(1, dtype=np.float32),
                eps=-1e-5,
            )


class TestRelu:
    def test_dense_clamps_negatives(self):
        rng = np.random.default_rng(70)
        x = _dense_image(rng, 6, 6, 3)
        out = relu(x)
        assert np.all(out.values >= 0)
        np.testing.assert_array_equal(out.values, np.maximum(x.values, 0.0))

    def test_sparse_keeps_site_set(self):
        """ReLU can zero a stored vector but never removes the site."""
        rng = np.random.default_rng(71)
        x = random_sparse(rng, 8, 8, 2, 0.4)
        vals = x.site_values.copy()
        vals[0] = -1.0  # force one site fully negative
        x = SparsePseudoimage(8, 8, 2, x.coordinates, vals)
        out = relu(x)
        assert np.array_equal(out.coordinates, x.coordinates)
        assert np.all(out.site_values >= 0)
        assert np.all(out.site_values[0] == 0.0)

    def test_rejects_other_types(self):
        with pytest.raises(TypeError):
            relu(np.zeros((2, 2)))


class TestPairCountValidation:
    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            PairCount(kernel_shape=(3, 3), kind=KIND_STANDARD, pairs=-1, weighted=0.0)

    def test_bad_kind_rejected(self):
        with pytest.raises(ValueError):
            PairCount(kernel_shape=(3, 3), kind="sideways", pairs=0, weighted=0.0)
