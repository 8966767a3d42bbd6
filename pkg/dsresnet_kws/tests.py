import argparse
import math
import os
import shutil
import struct
import tempfile
import types
import wave
from collections import OrderedDict
from dataclasses import replace
from fractions import Fraction
from io import StringIO
from unittest import TestCase

import numpy as np
from hypothesis import given, settings as hypothesis_settings, strategies as st
from mock import MagicMock, patch

from dsresnet_kws import (CLASS_LABELS, DEFAULT_KWS_SETTINGS, SILENCE_INDEX,
                          UNKNOWN_INDEX)
from . import (audio_pipeline, autodiff, cli, cost_analyzer, model_zoo,
               nn_ops, se_block, serialization, settings, specfile,
               training)
from .exceptions import (ConfigurationError, DimensionError, DivergenceError,
                         IngestionError, ModelFormatError, NumericError,
                         SpecParseError, VerificationError)
from .model_zoo import ArchitectureSpec, LayerConfig
from .nn_ops import ConvSpec, DEPTHWISE, POINTWISE, STANDARD
from .se_block import SEConfig, se_forward, se_multiply_count, se_param_count


def naive_conv(x, weights, dilation_h, dilation_w, kind):
    """
    Nested-loop "same" convolution; also returns the number of multiplies it
    would perform counting padded taps.
    """
    channels, height, width = x.shape
    if kind == POINTWISE:
        out_channels, kernel_h, kernel_w = weights.shape[0], 1, 1
    elif kind == DEPTHWISE:
        out_channels, kernel_h, kernel_w = weights.shape
    else:
        out_channels, _, kernel_h, kernel_w = weights.shape
    top = (kernel_h - 1) * dilation_h // 2
    left = (kernel_w - 1) * dilation_w // 2
    out = np.zeros((out_channels, height, width))
    multiplies = 0
    for o in range(out_channels):
        for h in range(height):
            for w in range(width):
                inputs = [o] if kind == DEPTHWISE else range(channels)
                for c in inputs:
                    for i in range(kernel_h):
                        for j in range(kernel_w):
                            multiplies += 1
                            src_h = h + i * dilation_h - top
                            src_w = w + j * dilation_w - left
                            if not (0 <= src_h < height and 0 <= src_w < width):
                                continue
                            if kind == STANDARD:
                                weight = weights[o, c, i, j]
                            elif kind == DEPTHWISE:
                                weight = weights[c, i, j]
                            else:
                                weight = weights[o, c]
                            out[o, h, w] += weight * x[c, src_h, src_w]
    return out, multiplies


def run_conv(x, weights, dilation_h, dilation_w, kind):
    if kind == STANDARD:
        spec = ConvSpec(weights.shape[2], weights.shape[3], weights.shape[0],
                        dilation_h, dilation_w)
        return nn_ops.conv2d_standard(x, weights, spec)
    if kind == DEPTHWISE:
        spec = ConvSpec(weights.shape[1], weights.shape[2], weights.shape[0],
                        dilation_h, dilation_w, kind=DEPTHWISE)
        return nn_ops.conv2d_depthwise(x, weights, spec)
    return nn_ops.conv2d_pointwise(x, weights)


def random_conv_case(rng, kind):
    channels = int(rng.integers(1, 4))
    out_channels = channels if kind == DEPTHWISE else int(rng.integers(1, 4))
    height, width = int(rng.integers(1, 7)), int(rng.integers(1, 7))
    kernel_h, kernel_w = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    dilation_h, dilation_w = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    if kind == POINTWISE:
        kernel_h = kernel_w = dilation_h = dilation_w = 1
        weights = rng.normal(size=(out_channels, channels))
    elif kind == DEPTHWISE:
        weights = rng.normal(size=(channels, kernel_h, kernel_w))
    else:
        weights = rng.normal(size=(out_channels, channels, kernel_h, kernel_w))
    x = rng.normal(size=(channels, height, width))
    return x, weights, dilation_h, dilation_w


class NnOpsTest(TestCase):
    def test_convolutions_match_nested_loop_oracle(self):
        rng = np.random.default_rng(1234)
        kinds = [STANDARD, DEPTHWISE, POINTWISE]
        for case in range(120):
            kind = kinds[case % 3]
            x, weights, dilation_h, dilation_w = random_conv_case(rng, kind)
            expected, _ = naive_conv(x, weights, dilation_h, dilation_w, kind)
            actual = run_conv(x, weights, dilation_h, dilation_w, kind)
            self.assertEqual(actual.shape, expected.shape)
            np.testing.assert_allclose(actual, expected, rtol=0, atol=1e-9,
                                       err_msg='case %d (%s)' % (case, kind))

    def test_oracle_multiplies_match_cost_formulas(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(3, 5, 5))
        w = rng.normal(size=(2, 3, 3, 3))
        _, count = naive_conv(x, w, 1, 1, STANDARD)
        self.assertEqual((54, count),
                         cost_analyzer.cost_standard_conv(3, 2, 3, 3, 5, 5))
        _, count = naive_conv(x, rng.normal(size=(3, 3, 3)), 2, 2, DEPTHWISE)
        self.assertEqual(count, cost_analyzer.cost_depthwise(3, 3, 3, 5, 5)[1])
        _, count = naive_conv(x, rng.normal(size=(4, 3)), 1, 1, POINTWISE)
        self.assertEqual(count, cost_analyzer.cost_pointwise(3, 4, 5, 5)[1])

    def test_depthwise_then_pointwise_is_rank_one_standard(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(4, 9, 7))
        depthwise = rng.normal(size=(4, 3, 3))
        pointwise = rng.normal(size=(5, 4))
        standard = pointwise[:, :, np.newaxis, np.newaxis] * depthwise[np.newaxis]
        spec = ConvSpec(3, 3, 4, 2, 1, kind=DEPTHWISE)
        separable = nn_ops.conv2d_pointwise(
            nn_ops.conv2d_depthwise(x, depthwise, spec), pointwise)
        direct = nn_ops.conv2d_standard(x, standard, ConvSpec(3, 3, 5, 2, 1))
        np.testing.assert_allclose(separable, direct, rtol=0, atol=1e-9)

    @given(st.integers(1, 5), st.integers(1, 9), st.integers(1, 9),
           st.integers(1, 4), st.integers(1, 3))
    @hypothesis_settings(max_examples=30, deadline=None)
    def test_same_padding_keeps_spatial_size(self, kernel, height, width,
                                             dilation, batch):
        x = np.ones((batch, 2, height, width))
        w = np.ones((3, 2, kernel, kernel))
        out = nn_ops.conv2d_standard(x, w, ConvSpec(kernel, kernel, 3,
                                                    dilation, dilation))
        self.assertEqual(out.shape, (batch, 3, height, width))

    def test_pointwise_on_constant_input(self):
        out = nn_ops.conv2d_pointwise(np.ones((2, 3, 4)), [[1.0, 2.0]])
        np.testing.assert_array_equal(out, np.full((1, 3, 4), 3.0))

    def test_channel_mismatch_names_the_axis(self):
        with self.assertRaises(DimensionError) as cm:
            nn_ops.conv2d_standard(np.ones((2, 4, 4)), np.ones((3, 1, 3, 3)))
        self.assertIn('in_channels', str(cm.exception))

    def test_depthwise_rejects_other_channel_counts(self):
        with self.assertRaises(DimensionError):
            nn_ops.conv2d_depthwise(np.ones((2, 4, 4)), np.ones((2, 3, 3)),
                                    ConvSpec(3, 3, 3, kind=DEPTHWISE))

    def test_pointwise_spec_must_be_one_by_one(self):
        with self.assertRaises(DimensionError):
            ConvSpec(3, 3, 4, kind=POINTWISE)

    def test_non_finite_input(self):
        with self.assertRaises(NumericError):
            nn_ops.relu([1.0, np.nan])

    def test_avg_pool_drops_incomplete_windows(self):
        x = np.arange(25.0).reshape(1, 5, 5)
        out = nn_ops.avg_pool2d(x, 2, 2)
        np.testing.assert_array_equal(out, [[[3.0, 5.0], [13.0, 15.0]]])

    def test_avg_pool_window_larger_than_input(self):
        with self.assertRaises(DimensionError):
            nn_ops.avg_pool2d(np.ones((1, 3, 8)), 4, 2)

    def test_global_avg_pool_and_fully_connected(self):
        x = np.arange(8.0).reshape(2, 2, 2)
        pooled = nn_ops.global_avg_pool(x)
        np.testing.assert_array_equal(pooled, [1.5, 5.5])
        np.testing.assert_array_equal(
            nn_ops.fully_connected(pooled, [[1.0, 0.0], [1.0, 1.0]]), [1.5, 7.0])

    def test_softmax_is_stable_for_large_logits(self):
        p = nn_ops.softmax([1000.0, 1000.0, -1000.0])
        np.testing.assert_allclose(p, [0.5, 0.5, 0.0])
        self.assertAlmostEqual(p.sum(), 1.0)

    def test_batch_norm_with_unit_statistics(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 3))
        out = nn_ops.batch_norm(x, np.ones(2), np.zeros(2), np.zeros(2),
                                np.ones(2))
        np.testing.assert_allclose(out, x / np.sqrt(1.0 + 1e-5))

    def test_softmax_of_equal_logits_and_sigmoid_of_zero(self):
        np.testing.assert_allclose(nn_ops.softmax([0.0, 0.0, 0.0]),
                                   [1 / 3.0, 1 / 3.0, 1 / 3.0], rtol=0,
                                   atol=1e-15)
        self.assertEqual(nn_ops.sigmoid(0.0), 0.5)
        np.testing.assert_allclose(nn_ops.softmax([1000.0, 0.0]), [1.0, 0.0],
                                   rtol=0, atol=1e-300)

    def test_identity_kernels(self):
        x = np.random.default_rng(4).normal(size=(3, 6, 5))
        np.testing.assert_array_equal(
            nn_ops.conv2d_standard(x[:1], np.ones((1, 1, 1, 1))), x[:1])
        centre = np.zeros((3, 3, 3))
        centre[:, 1, 1] = 1.0
        np.testing.assert_array_equal(
            nn_ops.conv2d_depthwise(x, centre,
                                    ConvSpec(3, 3, 3, 2, 2, kind=DEPTHWISE)),
            x)
        np.testing.assert_array_equal(nn_ops.conv2d_pointwise(x, np.eye(3)), x)
        v = x[:, 0, 0]
        np.testing.assert_array_equal(nn_ops.fully_connected(v, np.eye(3)), v)

    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from([STANDARD, DEPTHWISE,
                                                         POINTWISE]),
           st.floats(-3.0, 3.0), st.floats(-3.0, 3.0))
    @hypothesis_settings(max_examples=40, deadline=None)
    def test_convolutions_are_linear(self, seed, kind, alpha, beta):
        rng = np.random.default_rng(seed)
        x, weights, dilation_h, dilation_w = random_conv_case(rng, kind)
        y = rng.normal(size=x.shape)

        def f(value):
            return run_conv(value, weights, dilation_h, dilation_w, kind)

        np.testing.assert_allclose(f(alpha * x + beta * y),
                                   alpha * f(x) + beta * f(y), rtol=0,
                                   atol=1e-9)

    @given(st.integers(0, 2 ** 32 - 1), st.floats(-3.0, 3.0),
           st.floats(-3.0, 3.0))
    @hypothesis_settings(max_examples=20, deadline=None)
    def test_pooling_and_dense_layers_are_linear(self, seed, alpha, beta):
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=(2, 3, 8, 6))
        weights = rng.normal(size=(4, 3))
        for f in (lambda v: nn_ops.avg_pool2d(v, 2, 3),
                  nn_ops.global_avg_pool,
                  lambda v: nn_ops.fully_connected(v[:, 0, 0], weights)):
            np.testing.assert_allclose(f(alpha * x + beta * y),
                                       alpha * f(x) + beta * f(y), rtol=0,
                                       atol=1e-9)

    @given(st.integers(0, 2 ** 32 - 1), st.integers(0, 3))
    @hypothesis_settings(max_examples=30, deadline=None)
    def test_depthwise_channels_are_independent(self, seed, channel):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(4, 7, 5))
        weights = rng.normal(size=(4, 3, 3))
        spec = ConvSpec(3, 3, 4, int(rng.integers(1, 4)),
                        int(rng.integers(1, 4)), kind=DEPTHWISE)
        perturbed = x.copy()
        perturbed[channel] += rng.normal(size=(7, 5))
        before = nn_ops.conv2d_depthwise(x, weights, spec)
        after = nn_ops.conv2d_depthwise(perturbed, weights, spec)
        for c in range(4):
            if c == channel:
                self.assertFalse(np.array_equal(before[c], after[c]))
            else:
                np.testing.assert_array_equal(before[c], after[c])


class SEBlockTest(TestCase):
    def test_counts(self):
        self.assertEqual(se_param_count(SEConfig(64)), 512)
        self.assertEqual(se_multiply_count(SEConfig(64)), 576)
        self.assertEqual(se_param_count(SEConfig(32)), 128)
        self.assertEqual(se_multiply_count(SEConfig(32)), 160)

    def test_bottleneck_rounding(self):
        self.assertEqual(SEConfig(64).bottleneck_dim, 4)
        self.assertEqual(SEConfig(24).bottleneck_dim, 2)
        self.assertEqual(SEConfig(8).bottleneck_dim, 1)
        self.assertEqual(SEConfig(1).bottleneck_dim, 1)

    @given(st.integers(1, 512))
    def test_bottleneck_is_at_least_one(self, channels):
        config = SEConfig(channels)
        self.assertGreaterEqual(config.bottleneck_dim, 1)
        self.assertEqual(config.squeeze_shape, config.excite_shape[::-1])

    def test_zero_weights_halve_the_input(self):
        x = np.random.default_rng(1).normal(size=(32, 6, 5))
        out = se_forward(x, np.zeros((2, 32)), np.zeros((32, 2)))
        np.testing.assert_array_equal(out, x * 0.5)

    def test_weight_shapes_are_checked(self):
        with self.assertRaises(DimensionError):
            se_forward(np.ones((4, 2, 2)), np.zeros((1, 3)), np.zeros((4, 1)))
        with self.assertRaises(DimensionError):
            se_forward(np.ones((4, 2, 2)), np.zeros((1, 4)), np.zeros((1, 4)))

    @given(st.integers(0, 2 ** 32 - 1))
    @hypothesis_settings(max_examples=30, deadline=None)
    def test_output_never_exceeds_input(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(0.0, 5.0, size=(16, 4, 3))
        out = se_forward(x, rng.normal(0.0, 4.0, size=(1, 16)),
                         rng.normal(0.0, 4.0, size=(16, 1)))
        self.assertTrue(np.all(np.abs(out) <= np.abs(x)))
        self.assertTrue(np.all(np.sign(out) * np.sign(x) >= 0))

    def test_squeeze_is_linear_in_the_input(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(8, 5, 4))
        ops = MagicMock(wraps=nn_ops)
        se_block.reweight(x, rng.normal(size=(1, 8)), rng.normal(size=(8, 1)),
                          ops)
        self.assertEqual(ops.global_avg_pool.call_count, 1)
        self.assertIs(ops.global_avg_pool.call_args[0][0], x)
        squeezed = nn_ops.global_avg_pool(x)
        np.testing.assert_allclose(nn_ops.global_avg_pool(2.5 * x),
                                   2.5 * squeezed, rtol=1e-12)

    def test_network_runs_the_same_block(self):
        spec = tiny_spec()
        params = model_zoo.build(spec, 4)
        x = np.random.default_rng(4).normal(size=(1, 12, 8))
        expected = model_zoo.forward(params, x)
        with patch.object(se_block, 'reweight',
                          wraps=se_block.reweight) as reweight:
            np.testing.assert_array_equal(model_zoo.forward(params, x),
                                          expected)
        # conv SE, two depthwise SEs in the residual block, one pointwise SE
        self.assertEqual(reweight.call_count, 4)


def tiny_spec(normalization=False):
    return ArchitectureSpec('tiny', [
        LayerConfig(model_zoo.STANDARD_CONV, m=3, r=3, n=4, d_w=1, d_h=1),
        LayerConfig(model_zoo.SE, n=4),
        LayerConfig(model_zoo.AVG_POOL, m=2, r=2, n=4),
        LayerConfig(model_zoo.RESIDUAL_GROUP, m=3, r=3, n=4, repeat=1,
                    se_after=model_zoo.SE_DEPTHWISE),
        LayerConfig(model_zoo.DS_CONV, m=3, r=3, n=4,
                    se_after=model_zoo.SE_POINTWISE),
        LayerConfig(model_zoo.GLOBAL_AVG_POOL, n=4),
        LayerConfig(model_zoo.SOFTMAX_FC, n=12),
    ], input_shape=(1, 12, 8), normalization=normalization)


class ModelZooTest(TestCase):
    def test_dilation_schedule(self):
        self.assertEqual([model_zoo.dilation_schedule(i) for i in range(10)],
                         [1, 1, 1, 2, 2, 2, 4, 4, 4, 8])

    def test_preset_parameter_counts(self):
        expected = {'DS-ResNet18': 71936, 'DS-ResNet14': 15232,
                    'DS-ResNet10': 9984, 'DS-ResNet18-n': 71424,
                    'DS-ResNet18-d': 79616, 'DS-ResNet18-p': 79616}
        for name, count in expected.items():
            params = model_zoo.build(model_zoo.preset(name))
            self.assertEqual(params.total_count, count, name)

    def test_ds_layer_counts(self):
        self.assertEqual(model_zoo.preset('DS-ResNet18').ds_layer_count, 15)
        self.assertEqual(model_zoo.preset('DS-ResNet14').ds_layer_count, 11)
        self.assertEqual(model_zoo.preset('DS-ResNet10').ds_layer_count, 7)

    def test_build_is_deterministic(self):
        spec = model_zoo.preset('DS-ResNet10')
        a, b = model_zoo.build(spec, 5), model_zoo.build(spec, 5)
        c = model_zoo.build(spec, 6)
        for name in a.tensors:
            np.testing.assert_array_equal(a.tensors[name], b.tensors[name])
        self.assertFalse(np.array_equal(a.tensors['fc5.weight'],
                                        c.tensors['fc5.weight']))

    def test_built_parameters_are_read_only(self):
        params = model_zoo.build(model_zoo.preset('DS-ResNet10'))
        with self.assertRaises(ValueError):
            params.tensors['fc5.weight'][0, 0] = 1.0

    def test_forward_returns_posteriors(self):
        spec = model_zoo.preset('DS-ResNet10')
        params = model_zoo.build(spec, 1)
        x = np.random.default_rng(0).normal(size=(1, 101, 40))
        p = model_zoo.forward(params, x)
        self.assertEqual(p.shape, (12,))
        self.assertAlmostEqual(p.sum(), 1.0)
        batch = model_zoo.forward(params, np.stack([x, x]))
        np.testing.assert_allclose(batch[0], p)

    def test_forward_rejects_wrong_feature_shape(self):
        params = model_zoo.build(model_zoo.preset('DS-ResNet10'))
        with self.assertRaises(DimensionError):
            model_zoo.forward(params, np.zeros((1, 98, 40)))

    def test_zero_weights_give_uniform_posteriors(self):
        params = model_zoo.zero_params(model_zoo.preset('DS-ResNet14'))
        p = model_zoo.forward(params, np.ones((1, 101, 40)))
        np.testing.assert_allclose(p, np.full(12, 1.0 / 12))

    def test_zero_residual_block_is_identity(self):
        spec = model_zoo.preset('DS-ResNet14')
        params = model_zoo.zero_params(spec)
        layer = [l for l in model_zoo.resolve(spec)
                 if l.config.kind == model_zoo.RESIDUAL_GROUP][0]
        x = np.abs(np.random.default_rng(2).normal(size=(1, 32, 50, 20)))
        out = model_zoo.apply_block(model_zoo.ArrayOps(params), x,
                                    layer.blocks[0], shortcut=True)
        np.testing.assert_array_equal(out, x)

    def test_resolve_names_and_sizes(self):
        layers = model_zoo.resolve(model_zoo.preset('DS-ResNet10'))
        self.assertEqual([l.name for l in layers],
                         ['conv0', 'se1', 'pool2', 'ds3', 'gap4', 'fc5'])
        self.assertEqual(layers[3].in_size, (25, 20))
        units = list(model_zoo.ds_units(model_zoo.preset('DS-ResNet10')))
        self.assertEqual([u.dilation_h for u in units], [1, 1, 1, 2, 2, 2, 4])

    def test_residual_group_needs_matching_channels(self):
        spec = ArchitectureSpec('bad', [
            LayerConfig(model_zoo.STANDARD_CONV, m=3, r=3, n=8),
            LayerConfig(model_zoo.RESIDUAL_GROUP, m=3, r=3, n=16),
            LayerConfig(model_zoo.GLOBAL_AVG_POOL),
            LayerConfig(model_zoo.SOFTMAX_FC, n=12),
        ])
        with self.assertRaises(ConfigurationError):
            spec.validate()

    def test_unknown_preset(self):
        with self.assertRaises(ConfigurationError):
            model_zoo.preset('DS-ResNet99')

    def test_receptive_field(self):
        spec = model_zoo.preset('DS-ResNet18')
        self.assertEqual(model_zoo.receptive_field(spec, 12)[0], 93)
        self.assertEqual(model_zoo.receptive_field(spec, 13)[0], 125)
        self.assertEqual(model_zoo.receptive_field(spec)[0], 189)
        self.assertLess(model_zoo.receptive_field(spec, 12)[0], 101)
        self.assertGreaterEqual(model_zoo.receptive_field(spec, 13)[0], 101)

    def test_receptive_field_grows_with_layers(self):
        for name in ('DS-ResNet18', 'DS-ResNet14', 'DS-ResNet10'):
            spec = model_zoo.preset(name)
            fields = [model_zoo.receptive_field(spec, count)
                      for count in range(spec.ds_layer_count + 1)]
            self.assertEqual(fields[-1], model_zoo.receptive_field(spec))
            for smaller, larger in zip(fields, fields[1:]):
                self.assertLessEqual(smaller[0], larger[0], name)
                self.assertLessEqual(smaller[1], larger[1], name)

    def test_receptive_field_grows_with_dilation(self):
        def ds10_with_dilation(dilation):
            layers = [replace(layer, d_w=dilation, d_h=dilation)
                      if layer.kind == model_zoo.DS_CONV else layer
                      for layer in model_zoo.preset('DS-ResNet10').layers]
            return ArchitectureSpec('ds10-d%d' % dilation, layers)

        fields = [model_zoo.receptive_field(ds10_with_dilation(d))
                  for d in (1, 2, 4)]
        for smaller, larger in zip(fields, fields[1:]):
            self.assertLess(smaller[0], larger[0])
            self.assertLess(smaller[1], larger[1])

    def test_normalization_adds_scale_and_shift(self):
        spec = model_zoo.preset('DS-ResNet10')
        plain = model_zoo.build(spec).total_count
        normalised = model_zoo.build(spec.with_normalization())
        self.assertEqual(normalised.total_count, plain + 7 * 2 * 32)
        self.assertEqual(len(normalised.buffers), 14)


TABLE_1_ROWS = [(576, 2327040), (512, 576), (65408, 264248320),
                (4672, 18874880), (0, 64), (768, 768)]


class CostAnalyzerTest(TestCase):
    def test_standard_conv(self):
        self.assertEqual(cost_analyzer.cost_standard_conv(1, 64, 3, 3, 101, 40),
                         (576, 2327040))
        self.assertEqual(cost_analyzer.cost_standard_conv(1, 1, 1, 1, 1, 1),
                         (1, 1))
        self.assertEqual(cost_analyzer.cost_standard_conv(3, 2, 3, 3, 5, 5),
                         (54, 1350))

    def test_depthwise(self):
        self.assertEqual(cost_analyzer.cost_depthwise(64, 3, 3, 101, 40),
                         (576, 2327040))
        self.assertEqual(cost_analyzer.cost_depthwise(1, 1, 1, 1, 1), (1, 1))
        self.assertEqual(cost_analyzer.cost_depthwise(32, 3, 3, 25, 20),
                         (288, 144000))

    def test_pointwise(self):
        self.assertEqual(cost_analyzer.cost_pointwise(64, 64, 101, 40),
                         (4096, 16547840))
        self.assertEqual(cost_analyzer.cost_pointwise(1, 1, 1, 1), (1, 1))
        self.assertEqual(cost_analyzer.cost_pointwise(32, 32, 50, 20),
                         (1024, 1024000))
        self.assertEqual(cost_analyzer.cost_pointwise(64, 64, 101, 40)[0] +
                         cost_analyzer.cost_depthwise(64, 3, 3, 101, 40)[0],
                         4672)

    def test_ds_ratio(self):
        ratio = cost_analyzer.ds_vs_standard_ratio(64, 3)
        self.assertEqual(ratio, Fraction(1, 64) + Fraction(1, 9))
        self.assertAlmostEqual(float(ratio), 0.1267, places=4)
        self.assertEqual(cost_analyzer.ds_vs_standard_ratio(1, 1), 2)
        self.assertAlmostEqual(float(cost_analyzer.ds_vs_standard_ratio(32, 3)),
                               0.1424, places=4)

    @given(st.integers(1, 128), st.integers(1, 7), st.integers(1, 50),
           st.integers(1, 50))
    def test_ds_ratio_matches_layer_costs(self, channels, kernel, height,
                                          width):
        separable = (cost_analyzer.cost_depthwise(channels, kernel, kernel,
                                                  height, width)[1] +
                     cost_analyzer.cost_pointwise(channels, channels, height,
                                                  width)[1])
        standard = cost_analyzer.cost_standard_conv(channels, channels, kernel,
                                                    kernel, height, width)[1]
        self.assertEqual(Fraction(separable, standard),
                         cost_analyzer.ds_vs_standard_ratio(channels, kernel))

    def test_table_1_rows(self):
        report = cost_analyzer.analyze(model_zoo.preset('DS-ResNet18'))
        self.assertEqual([(r.params, r.multiplies) for r in report.rows],
                         TABLE_1_ROWS)
        self.assertEqual(report.totals, (71936, 285451648))

    def test_table_2_and_3_totals(self):
        self.assertEqual(
            cost_analyzer.analyze(model_zoo.preset('DS-ResNet14')).totals,
            (15232, 15628096))
        self.assertEqual(
            cost_analyzer.analyze(model_zoo.preset('DS-ResNet10')).totals,
            (9984, 5772096))

    def test_spatial_trace(self):
        report = cost_analyzer.analyze(model_zoo.preset('DS-ResNet10'))
        self.assertEqual(report.spatial_trace,
                         [(101, 40), (101, 40), (25, 20), (25, 20), (1, 1),
                          (1, 1)])

    def test_report_matches_built_parameters(self):
        for name in model_zoo.PRESETS:
            for spec in (model_zoo.preset(name),
                         model_zoo.preset(name).with_normalization()):
                self.assertEqual(cost_analyzer.analyze(spec).total_params,
                                 model_zoo.build(spec).total_count)

    def test_golden_tables_pass(self):
        for table_id, name in ((1, 'DS-ResNet18'), (2, 'DS-ResNet14'),
                               (3, 'DS-ResNet10')):
            report = cost_analyzer.analyze(model_zoo.preset(name))
            checks = cost_analyzer.verify_against_paper(report, table_id)
            self.assertEqual(cost_analyzer.failures(checks), [], name)

    def test_ablation_totals_pass(self):
        for name in cost_analyzer.ABLATION_TOTALS:
            report = cost_analyzer.analyze(model_zoo.preset(name))
            checks = cost_analyzer.verify_against_paper(report, 5)
            self.assertEqual(cost_analyzer.failures(checks), [], name)

    def test_missing_weight_fails_naming_the_row(self):
        report = cost_analyzer.analyze(model_zoo.preset('DS-ResNet18'))
        row = report.rows[2]
        report.rows[2] = row._replace(params=row.params - 1)
        failed = cost_analyzer.failures(
            cost_analyzer.verify_against_paper(report, 1))
        self.assertIn(('Res×7', 'params', -1),
                      [(c.row, c.field, c.delta) for c in failed])
        with self.assertRaises(VerificationError) as cm:
            cost_analyzer.assert_matches_golden(report, 1)
        self.assertIn('Res×7', str(cm.exception))

    def test_wrong_table_fails(self):
        report = cost_analyzer.analyze(model_zoo.preset('DS-ResNet10'))
        self.assertTrue(cost_analyzer.failures(
            cost_analyzer.verify_against_paper(report, 1)))

    def test_printed_precision(self):
        self.assertEqual(cost_analyzer.at_printed_precision(2327040, '2.3M'),
                         '2.3M')
        self.assertEqual(cost_analyzer.at_printed_precision(264248320, '264M'),
                         '264M')
        self.assertEqual(cost_analyzer.at_printed_precision(9984, '10K'), '10K')
        self.assertEqual(cost_analyzer.format_count(285451648), '285M')
        self.assertEqual(cost_analyzer.format_count(15232), '15.2K')
        self.assertEqual(cost_analyzer.format_count(576), '576')

    def test_format_count_carries_into_the_next_unit(self):
        self.assertEqual(cost_analyzer.format_count(999999), '1M')
        self.assertEqual(cost_analyzer.format_count(999999999), '1G')
        self.assertEqual(cost_analyzer.format_count(999499), '999K')
        self.assertEqual(cost_analyzer.format_count(99960), '100K')
        self.assertEqual(cost_analyzer.format_count(1000), '1K')

    def test_csv_and_table_output(self):
        report = cost_analyzer.analyze(model_zoo.preset('DS-ResNet10'))
        lines = report.as_csv().splitlines()
        self.assertEqual(lines[0], 'layer,params,multiplies,H,W')
        self.assertEqual(lines[4], 'DS-Conv×7,9184,4592000,25,20')
        self.assertIn('9984', report.as_table())


DS_RESNET10_TEXT = """
# DS-ResNet10 as a text file
name DS-ResNet10
input 1 101 40
classes 12
standard_conv   3 3 32  1    1    1
se              - - 32  -    -    1
avg_pool        4,2,32, -,   -,   1
ds_conv         3 3 32  auto auto 7
global_avg_pool - - 32  -    -    1
softmax_fc      - - 12  -    -    1
"""


class SpecFileTest(TestCase):
    def test_parse_matches_preset(self):
        self.assertEqual(specfile.parse_spec(DS_RESNET10_TEXT),
                         model_zoo.preset('DS-ResNet10'))

    def test_format_round_trip(self):
        for name in model_zoo.PRESETS:
            spec = model_zoo.preset(name)
            self.assertEqual(specfile.parse_spec(specfile.format_spec(spec)),
                             spec)

    def test_error_names_the_line(self):
        text = 'name x\ninput 1 101 40\nds_conv 3 three 32 auto auto 1\n'
        with self.assertRaises(SpecParseError) as cm:
            specfile.parse_spec(text, path='x.spec')
        self.assertEqual(cm.exception.lineno, 3)
        self.assertTrue(str(cm.exception).startswith('x.spec:3:'))

    def test_unknown_kind(self):
        with self.assertRaises(SpecParseError) as cm:
            specfile.parse_spec('conv3d 3 3 3 1 1 1\n')
        self.assertEqual(cm.exception.lineno, 1)

    def test_inconsistent_architecture(self):
        with self.assertRaises(SpecParseError):
            specfile.parse_spec('standard_conv 3 3 8 1 1 1\n')

    def test_load_architecture(self):
        self.assertEqual(specfile.load_architecture('DS-ResNet14').name,
                         'DS-ResNet14')
        with self.assertRaises(ConfigurationError):
            specfile.load_architecture('missing.spec')


class TempDirTestCase(TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def path(self, name):
        return os.path.join(self.tmp, name)


class SerializationTest(TempDirTestCase):
    def test_model_round_trip(self):
        spec = model_zoo.preset('DS-ResNet10').with_normalization()
        params = model_zoo.build(spec, 3).copy()
        params.step, params.val_error = 2000, 0.125
        serialization.save_model(params, self.path('m.dsrn'))
        loaded = serialization.load_model(self.path('m.dsrn'))
        self.assertEqual(loaded.spec, spec)
        self.assertEqual((loaded.step, loaded.val_error), (2000, 0.125))
        self.assertEqual(list(loaded.tensors), list(params.tensors))
        self.assertEqual(list(loaded.buffers), list(params.buffers))
        for name in params.tensors:
            np.testing.assert_allclose(loaded.tensors[name],
                                       params.tensors[name], rtol=1e-6,
                                       atol=1e-7)

    def test_untrained_model_has_no_step(self):
        params = model_zoo.build(model_zoo.preset('DS-ResNet14'))
        serialization.save_model(params, self.path('m.dsrn'))
        loaded = serialization.load_model(self.path('m.dsrn'))
        self.assertEqual(loaded.step, -1)
        self.assertTrue(math.isnan(loaded.val_error))

    def test_bad_magic(self):
        with open(self.path('bad.dsrn'), 'wb') as handle:
            handle.write(b'RIFF\x01\x00\x00\x00')
        with self.assertRaises(ModelFormatError):
            serialization.load_model(self.path('bad.dsrn'))

    def test_truncated_model(self):
        serialization.save_model(model_zoo.build(model_zoo.preset('DS-ResNet10')),
                                 self.path('m.dsrn'))
        with open(self.path('m.dsrn'), 'rb') as handle:
            data = handle.read()
        with open(self.path('m.dsrn'), 'wb') as handle:
            handle.write(data[:len(data) // 2])
        with self.assertRaises(ModelFormatError):
            serialization.load_model(self.path('m.dsrn'))

    def test_feature_cache_round_trip(self):
        features = np.random.default_rng(0).normal(size=(3, 1, 101, 40))
        serialization.save_features(
            self.path('f.dsfc'), zip(['a.wav', 'b.wav', 'ü.wav'], [0, 5, 11],
                                     features))
        paths, labels, loaded = serialization.load_features(self.path('f.dsfc'))
        self.assertEqual(paths, ['a.wav', 'b.wav', 'ü.wav'])
        self.assertEqual(list(labels), [0, 5, 11])
        np.testing.assert_allclose(loaded, features, rtol=1e-6, atol=1e-6)

    def test_model_header_layout(self):
        spec = model_zoo.preset('DS-ResNet10')
        params = model_zoo.build(spec, 0)
        serialization.save_model(params, self.path('m.dsrn'))
        with open(self.path('m.dsrn'), 'rb') as handle:
            data = handle.read()
        self.assertEqual(data[:4], b'DSRN')
        self.assertEqual(struct.unpack_from('<II', data, 4), (1, 11))
        self.assertEqual(data[12:23], b'DS-ResNet10')
        self.assertEqual(struct.unpack_from('<I', data, 23), (6,))
        conv_tag = serialization.KIND_TAGS[model_zoo.STANDARD_CONV]
        self.assertEqual(struct.unpack_from('<B5i', data, 27),
                         (conv_tag, 3, 3, 32, 1, 1))
        self.assertEqual(struct.unpack_from('<5I', data, 48), (4, 32, 1, 3, 3))
        weights = np.frombuffer(data, '<f4', count=32 * 9, offset=68)
        np.testing.assert_array_equal(
            weights, params.tensors['conv0.weight'].astype('<f4').reshape(-1))
        # the SE layer stores squeeze and excite as one flat tensor
        se_tag = serialization.KIND_TAGS[model_zoo.SE]
        offset = 68 + 4 * 32 * 9
        self.assertEqual(struct.unpack_from('<B5i', data, offset),
                         (se_tag, 0, 0, 32, 0, 0))
        self.assertEqual(struct.unpack_from('<II', data, offset + 21), (1, 128))

    def test_metadata_follows_the_layers(self):
        spec = model_zoo.preset('DS-ResNet10')
        serialization.save_model(model_zoo.build(spec), self.path('m.dsrn'))
        with open(self.path('m.dsrn'), 'rb') as handle:
            data = handle.read()
        meta_size = 4 + 4 + 12 + 8 + len(spec.layers) * 10 + 16 + 4
        meta = data[-meta_size:]
        self.assertEqual(meta[:4], b'DSRM')
        self.assertEqual(struct.unpack_from('<I3III', meta, 4),
                         (1, 1, 101, 40, 12, 0))

    def test_corrupted_weights_fail_the_checksum(self):
        serialization.save_model(model_zoo.build(model_zoo.preset('DS-ResNet10')),
                                 self.path('m.dsrn'))
        with open(self.path('m.dsrn'), 'rb') as handle:
            data = bytearray(handle.read())
        data[100] ^= 0x01
        with open(self.path('m.dsrn'), 'wb') as handle:
            handle.write(bytes(data))
        with self.assertRaises(ModelFormatError) as cm:
            serialization.load_model(self.path('m.dsrn'))
        self.assertIn('checksum', str(cm.exception))

    def test_feature_cache_remembers_its_experiment(self):
        records = [('a.wav', 3, np.zeros((101, 40)))]
        serialization.save_features(self.path('f.dsfc'), records, experiment=2)
        paths, _, _ = serialization.load_features(self.path('f.dsfc'), 2)
        self.assertEqual(paths, ['a.wav'])
        with self.assertRaises(ConfigurationError):
            serialization.load_features(self.path('f.dsfc'), 1)

    def test_architecture_file_round_trip(self):
        spec = model_zoo.preset('DS-ResNet18-d').with_normalization()
        specfile.write_spec(spec, self.path('ds18.spec'))
        self.assertEqual(specfile.read_spec(self.path('ds18.spec')), spec)

    def test_feature_cache_rejects_wrong_shape(self):
        with self.assertRaises(DimensionError):
            serialization.save_features(self.path('f.dsfc'),
                                        [('a.wav', 0, np.zeros((98, 40)))])


def write_raw_wav(path, frames, channels=1, width=2, rate=16000):
    with wave.open(path, 'wb') as handle:
        handle.setnchannels(channels)
        handle.setsampwidth(width)
        handle.setframerate(rate)
        handle.writeframes(frames)


class AudioPipelineTest(TempDirTestCase):
    def test_silence_file(self):
        audio_pipeline.write_wav(self.path('s.wav'), np.zeros(16000))
        samples = audio_pipeline.load_wav(self.path('s.wav'))
        np.testing.assert_array_equal(samples, np.zeros(16000))

    def test_short_clip_is_zero_padded(self):
        audio_pipeline.write_wav(self.path('s.wav'), np.full(8000, 0.25))
        samples = audio_pipeline.load_wav(self.path('s.wav'))
        self.assertEqual(len(samples), 16000)
        np.testing.assert_array_equal(samples[:8000], 0.25)
        np.testing.assert_array_equal(samples[8000:], 0.0)

    def test_long_clip_is_cropped_centrally(self):
        ramp = np.arange(20000) / 40000.0
        self.assertEqual(audio_pipeline.fit_length(ramp)[0], ramp[2000])
        self.assertEqual(len(audio_pipeline.fit_length(ramp)), 16000)

    def test_sine_fixture(self):
        t = np.arange(16000) / 16000.0
        sine = 0.5 * np.sin(2 * np.pi * 440.0 * t)
        pcm = np.round(sine * 32768.0).astype('<i2')
        write_raw_wav(self.path('sine.wav'), pcm.tobytes())
        samples = audio_pipeline.load_wav(self.path('sine.wav'))
        self.assertLessEqual(np.abs(samples - sine).max(), 2.0 ** -15)

    def test_unsupported_formats(self):
        write_raw_wav(self.path('stereo.wav'), b'\x00' * 64, channels=2)
        write_raw_wav(self.path('8k.wav'), b'\x00' * 64, rate=8000)
        write_raw_wav(self.path('8bit.wav'), b'\x80' * 64, width=1)
        with open(self.path('junk.wav'), 'wb') as handle:
            handle.write(b'not a wav file at all')
        for name in ('stereo.wav', '8k.wav', '8bit.wav', 'junk.wav',
                     'missing.wav'):
            with self.assertRaises(IngestionError):
                audio_pipeline.load_wav(self.path(name))

    def test_mfcc_shape_and_determinism(self):
        samples = np.random.default_rng(0).uniform(-0.5, 0.5, 16000)
        a = audio_pipeline.mfcc(samples)
        self.assertEqual(a.shape, (1, 101, 40))
        np.testing.assert_array_equal(a, audio_pipeline.mfcc(samples.copy()))

    def test_mfcc_of_silence_is_constant(self):
        features = audio_pipeline.mfcc(np.zeros(16000))
        np.testing.assert_array_equal(features[0], np.tile(features[0, :1],
                                                           (101, 1)))

    def test_mfcc_wrong_length(self):
        with self.assertRaises(DimensionError):
            audio_pipeline.mfcc(np.zeros(8000))

    def test_mfcc_matches_reference(self):
        samples = np.random.default_rng(42).normal(0.0, 0.1, 16000)
        np.testing.assert_allclose(audio_pipeline.mfcc(samples)[0],
                                   reference_mfcc(samples), rtol=1e-3,
                                   atol=1e-6)

    def test_mel_filters_cover_every_channel(self):
        bank = audio_pipeline.mel_filterbank(40, 512, 16000, 20.0, 8000.0)
        self.assertEqual(bank.shape, (257, 40))
        self.assertTrue(np.all(bank.max(axis=0) > 0))

    def test_assign_split_fixtures(self):
        split = audio_pipeline.assign_split
        self.assertEqual(split('spk015_nohash_0.wav'), training.VALIDATION)
        self.assertEqual(split('yes/spk024_nohash_3.wav'), training.VALIDATION)
        self.assertEqual(split('1b4c9b89_nohash_0.wav'), training.TEST)
        self.assertEqual(split('go/9a7c1f83_nohash_1.wav'), training.TEST)
        self.assertEqual(split('0a7c2a8d_nohash_1.wav'), training.TRAIN)

    def test_assign_split_proportions(self):
        speakers = 20000
        counts = dict((split, 0) for split in training.SPLITS)
        for i in range(speakers):
            counts[audio_pipeline.assign_split('%08x_nohash_0.wav' % i)] += 1
        self.assertAlmostEqual(counts[training.TRAIN] / speakers, 0.8,
                               delta=0.02)
        self.assertAlmostEqual(counts[training.VALIDATION] / speakers, 0.1,
                               delta=0.02)
        self.assertAlmostEqual(counts[training.TEST] / speakers, 0.1,
                               delta=0.02)

    @given(st.text('abcdef0123456789', min_size=1, max_size=8),
           st.integers(0, 9), st.integers(0, 9))
    def test_one_speaker_one_split(self, speaker, a, b):
        self.assertEqual(
            audio_pipeline.assign_split('yes/%s_nohash_%d.wav' % (speaker, a)),
            audio_pipeline.assign_split('no/%s_nohash_%d.wav' % (speaker, b)))

    def test_label_index(self):
        self.assertEqual(audio_pipeline.label_index('yes'), 2)
        self.assertEqual(audio_pipeline.label_index('go'), 11)
        self.assertEqual(audio_pipeline.label_index('marvin'), UNKNOWN_INDEX)
        self.assertEqual(CLASS_LABELS[audio_pipeline.label_index('stop')],
                         'stop')

    def make_pool(self, keywords, unknowns):
        pool = [audio_pipeline.Utterance('k%d.wav' % i, 2 + i % 10, 'train')
                for i in range(keywords)]
        pool += [audio_pipeline.Utterance('u%d.wav' % i, UNKNOWN_INDEX, 'train')
                 for i in range(unknowns)]
        return pool

    def test_balance_ratios(self):
        background = {'noise.wav': np.ones(32000) * 0.5}
        balanced = audio_pipeline.balance_dataset(self.make_pool(2000, 700),
                                                  background, seed=1)
        labels = [u.label for u in balanced]
        self.assertEqual(labels.count(SILENCE_INDEX), 250)
        self.assertEqual(labels.count(UNKNOWN_INDEX), 250)
        self.assertEqual(len(balanced), 2500)
        silence = [u for u in balanced if u.label == SILENCE_INDEX]
        self.assertTrue(all(0 <= u.offset <= 16000 for u in silence))
        self.assertTrue(all(0.0 <= u.volume <= 1.0 for u in silence))

    def test_balance_is_deterministic(self):
        background = {'noise.wav': np.zeros(20000)}
        pool = self.make_pool(100, 40)
        self.assertEqual(
            audio_pipeline.balance_dataset(pool, background, seed=4),
            audio_pipeline.balance_dataset(pool, background, seed=4))

    def test_balance_errors(self):
        with self.assertRaises(ConfigurationError):
            audio_pipeline.balance_dataset(self.make_pool(10, 0),
                                           {'n.wav': np.zeros(16000)})
        with self.assertRaises(ConfigurationError):
            audio_pipeline.balance_dataset(self.make_pool(10, 5), {})

    def test_time_shift(self):
        impulse = np.zeros(16000)
        impulse[0] = 1.0
        shifted = audio_pipeline.time_shift(impulse, 1600)
        self.assertEqual(shifted[1600], 1.0)
        self.assertEqual(shifted.sum(), 1.0)
        np.testing.assert_array_equal(
            audio_pipeline.time_shift(shifted, -1600), impulse)

    @patch('dsresnet_kws.audio_pipeline.random_stream')
    def test_augment_without_noise_is_a_pure_shift(self, random_stream):
        rng = MagicMock()
        rng.integers.return_value = 1600
        rng.random.return_value = 0.9
        random_stream.return_value = rng
        impulse = np.zeros(16000)
        impulse[0] = 1.0
        out = audio_pipeline.augment(impulse, 7, 'a.wav', 0,
                                     {'n.wav': np.ones(16000)})
        np.testing.assert_array_equal(out, audio_pipeline.time_shift(impulse,
                                                                     1600))
        random_stream.assert_called_once_with(7, 'augment', 'a.wav', 0)

    def test_augment_is_deterministic_and_bounded(self):
        rng = np.random.default_rng(0)
        samples = rng.uniform(-1.0, 1.0, 16000)
        background = {'n.wav': rng.uniform(-1.0, 1.0, 24000)}
        a = audio_pipeline.augment(samples, 3, 'x.wav', 2, background)
        b = audio_pipeline.augment(samples, 3, 'x.wav', 2, background)
        self.assertEqual(a.tobytes(), b.tobytes())
        self.assertLessEqual(np.abs(a).max(), 1.0)
        c = audio_pipeline.augment(samples, 3, 'x.wav', 3, background)
        self.assertFalse(np.array_equal(a, c))

    def test_array_dataset(self):
        features = np.arange(4 * 101 * 40.0).reshape(4, 1, 101, 40)
        dataset = audio_pipeline.ArrayDataset(
            {training.TRAIN: (features, [0, 1, 2, 3])})
        self.assertEqual(dataset.size(training.TRAIN), 4)
        self.assertEqual(dataset.size(training.TEST), 0)
        x, y = dataset.examples(training.TRAIN, np.array([1, 3]))
        np.testing.assert_array_equal(y, [1, 3])
        np.testing.assert_array_equal(x, features[[1, 3]])


def reference_mfcc(samples):
    """
    Straightforward per-frame MFCC with explicit DFT and DCT matrices.
    """
    n_fft, frame, hop = 512, 400, 160
    padded = np.concatenate([samples[200:0:-1], samples,
                             samples[-2:-202:-1]])
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(frame) / frame)
    k = np.arange(n_fft // 2 + 1)[:, np.newaxis]
    dft = np.exp(-2j * np.pi * k * np.arange(frame) / n_fft)

    def mel(f):
        return 2595.0 * math.log10(1.0 + f / 700.0)

    def hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    low, high = mel(20.0), mel(8000.0)
    edges = [hz(low + (high - low) * i / 41.0) for i in range(42)]
    freqs = np.arange(n_fft // 2 + 1) * 16000.0 / n_fft
    bank = np.zeros((n_fft // 2 + 1, 40))
    for m in range(40):
        left, centre, right = edges[m:m + 3]
        for b, f in enumerate(freqs):
            if left < f <= centre:
                bank[b, m] = (f - left) / (centre - left)
            elif centre < f < right:
                bank[b, m] = (right - f) / (right - centre)
    n = np.arange(40)
    dct = np.cos(np.pi * n[:, np.newaxis] * (2 * n + 1) / 80.0)
    dct *= math.sqrt(2.0 / 40)
    dct[0] /= math.sqrt(2.0)

    rows = []
    for start in range(0, len(padded) - frame + 1, hop):
        spectrum = np.abs(dft.dot(padded[start:start + frame] * window))
        energies = np.log(np.maximum(spectrum.dot(bank), 1e-10))
        rows.append(dct.dot(energies))
    return np.array(rows)


def overfit_templates():
    h = np.arange(101)[:, np.newaxis]
    w = np.arange(40)[np.newaxis, :]
    return np.stack([np.cos(2 * np.pi * (p * h + q * w) / 8.0)
                     for p in range(4) for q in range(1, 4)])


def toy_dataset(count, seed=0, noise=0.05):
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % 12
    features = (overfit_templates()[labels] +
                noise * rng.normal(size=(count, 101, 40)))[:, np.newaxis]
    split = (features, labels)
    return audio_pipeline.ArrayDataset({training.TRAIN: split,
                                        training.VALIDATION: split,
                                        training.TEST: split})


def fake_params(**tensors):
    return types.SimpleNamespace(
        tensors=OrderedDict((k, np.asarray(v, dtype=float))
                            for k, v in tensors.items()),
        buffers={})


class GradientTest(TestCase):
    def test_pointwise_linearity(self):
        tape = autodiff.Tape(fake_params(w=[[2.0]], unused=[1.0, 2.0]))
        out = tape.conv2d_pointwise(tape.constant(np.ones((1, 1, 5, 4))),
                                    tape.param('w'))
        tape.backward(out)
        grads = tape.gradients()
        np.testing.assert_array_equal(grads['w'], [[20.0]])
        np.testing.assert_array_equal(grads['unused'], [0.0, 0.0])

    def test_relu_blocks_negative_preactivations(self):
        tape = autodiff.Tape(fake_params())
        x = tape.constant(np.array([[-1.0, 2.0]]))
        tape.backward(tape.relu(x))
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0]])

    def test_fused_softmax_cross_entropy(self):
        tape = autodiff.Tape(fake_params())
        logits = tape.constant(np.zeros((2, 12)))
        loss = tape.softmax_cross_entropy(logits, [0, 5])
        self.assertAlmostEqual(float(loss.value), math.log(12))
        tape.backward(loss)
        expected = np.full((2, 12), 1.0 / 24)
        expected[0, 0] -= 0.5
        expected[1, 5] -= 0.5
        np.testing.assert_allclose(logits.grad, expected)

    def test_gradients_have_parameter_shapes(self):
        params = model_zoo.build(model_zoo.preset('DS-ResNet10'))
        x = np.random.default_rng(0).normal(size=(2, 1, 101, 40))
        grads = training.grad(params, x, [3, 4])
        self.assertEqual(list(grads), list(params.tensors))
        for name in grads:
            self.assertEqual(grads[name].shape, params.tensors[name].shape)

    def test_gradcheck_ds_resnet10(self):
        spec = model_zoo.preset('DS-ResNet10')
        params = model_zoo.build(spec, 11)
        rng = np.random.default_rng(11)
        rows = training.gradcheck(params, rng.normal(size=(2, 1, 101, 40)),
                                  [1, 7], samples_per_tensor=3)
        self.assertEqual(len(rows), len(params.tensors))
        training.assert_gradients(rows, 1e-4)

    def test_gradcheck_deeper_presets(self):
        # same layers and tensors as the presets on a shorter input
        for name, seed in (('DS-ResNet18', 5), ('DS-ResNet14', 6)):
            spec = replace(model_zoo.preset(name), input_shape=(1, 20, 8))
            params = model_zoo.build(spec, seed)
            rng = np.random.default_rng(seed)
            rows = training.gradcheck(params, rng.normal(size=(2, 1, 20, 8)),
                                      [0, 9], samples_per_tensor=2, seed=seed)
            self.assertEqual(len(rows), len(params.tensors), name)
            self.assertEqual(
                params.total_count,
                model_zoo.build(model_zoo.preset(name)).total_count)
            training.assert_gradients(rows, 1e-4)

    def test_gradcheck_se_placements_and_normalization(self):
        spec = tiny_spec(normalization=True)
        params = model_zoo.build(spec, 2)
        rng = np.random.default_rng(2)
        rows = training.gradcheck(params, rng.normal(size=(3, 1, 12, 8)),
                                  [0, 4, 9], samples_per_tensor=4)
        names = [row.name for row in rows]
        self.assertIn('res3.b0.l0.se.squeeze', names)
        self.assertIn('ds4.b0.l0.bn.gamma', names)
        training.assert_gradients(rows, 1e-4)

    def test_zero_tolerance_fails(self):
        params = model_zoo.build(model_zoo.preset('DS-ResNet10'), 1)
        rows = training.gradcheck(params, np.random.default_rng(1).normal(
            size=(1, 1, 101, 40)), [2], samples_per_tensor=2)
        with self.assertRaises(VerificationError):
            training.assert_gradients(rows, 0.0)


class TrainingTest(TestCase):
    def test_lr_schedule(self):
        self.assertEqual(training.lr_at(0), 0.1)
        self.assertAlmostEqual(training.lr_at(9999), 0.1)
        self.assertAlmostEqual(training.lr_at(10000), 0.01)
        self.assertAlmostEqual(training.lr_at(25000), 0.001)

    def test_cross_entropy(self):
        self.assertAlmostEqual(training.cross_entropy(np.full(12, 1 / 12.0), 4),
                               2.4849, places=4)
        self.assertEqual(training.cross_entropy(np.eye(12)[3], 3), 0.0)

    def test_fused_cross_entropy_matches_two_step(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            logits = rng.normal(0.0, 3.0, 12)
            label = int(rng.integers(12))
            self.assertLess(abs(
                training.softmax_cross_entropy(logits, label) -
                training.cross_entropy(nn_ops.softmax(logits), label)), 1e-12)

    def test_confidence_interval(self):
        mean, half_width = training.confidence_interval(
            [3.2, 3.3, 3.4, 3.3, 3.25])
        self.assertAlmostEqual(mean, 3.29)
        self.assertAlmostEqual(half_width, 0.065, places=4)
        self.assertEqual(training.confidence_interval([2.5, 2.5, 2.5])[1], 0.0)
        _, t_width = training.confidence_interval([3.2, 3.3, 3.4, 3.3, 3.25],
                                                  method='t')
        self.assertGreater(t_width, half_width)
        with self.assertRaises(ValueError):
            training.confidence_interval([3.0])

    def test_eval_result(self):
        result = training.EvalResult([[3, 1], [0, 4]])
        self.assertEqual(result.n_examples, 8)
        self.assertEqual(result.error_rate, 0.125)
        np.testing.assert_allclose(result.per_class_accuracy, [0.75, 1.0])
        self.assertEqual(training.EvalResult(np.eye(3) * 5).error_rate, 0.0)

    def test_evaluate(self):
        params = model_zoo.zero_params(model_zoo.preset('DS-ResNet10'))
        dataset = audio_pipeline.ArrayDataset({training.VALIDATION: (
            np.ones((5, 1, 101, 40)), [SILENCE_INDEX] * 4 + [3])})
        # uniform posteriors: argmax picks class 0
        result = training.evaluate(params, dataset, batch_size=2)
        self.assertEqual(result.n_examples, 5)
        self.assertAlmostEqual(result.error_rate, 0.2)
        with self.assertRaises(ConfigurationError):
            training.evaluate(params, dataset, training.TEST)

    def test_weight_decay_shrinks_weights(self):
        params = model_zoo.build(model_zoo.preset('DS-ResNet10')).copy()
        before = params.copy()
        velocity = OrderedDict((k, np.zeros_like(v))
                               for k, v in params.tensors.items())
        no_gradient = OrderedDict((k, np.zeros_like(v))
                                  for k, v in params.tensors.items())
        config = training.TrainConfig(momentum=0.0, weight_decay=1e-3)
        training.sgd_step(params, velocity, no_gradient, 0.1, config)
        for name in params.tensors:
            np.testing.assert_allclose(params.tensors[name],
                                       before.tensors[name] * (1 - 1e-4),
                                       rtol=1e-14)

    def test_small_step_decreases_loss(self):
        params = model_zoo.build(model_zoo.preset('DS-ResNet10'), 4).copy()
        rng = np.random.default_rng(4)
        x = rng.normal(size=(4, 1, 101, 40))
        labels = [0, 3, 6, 9]
        loss, grads, _, _ = autodiff.loss_and_gradients(params, x, labels)
        velocity = OrderedDict((k, np.zeros_like(v))
                               for k, v in params.tensors.items())
        training.sgd_step(params, velocity, grads, 1e-4, training.TrainConfig(
            momentum=0.0, weight_decay=0.0))
        self.assertLess(autodiff.loss_and_gradients(params, x, labels)[0], loss)

    def test_config_from_settings(self):
        config = training.TrainConfig.from_settings(
            settings.load_settings(overrides={'batch_size': 8}))
        self.assertEqual(config.batch_size, 8)
        self.assertEqual(config.lr_decay_every, 10000)
        with self.assertRaises(ConfigurationError):
            training.TrainConfig(batch_size=0)

    def small_config(self, **kwargs):
        values = dict(batch_size=4, total_steps=4, eval_every=2, seed=9)
        values.update(kwargs)
        return training.TrainConfig(**values)

    def test_zero_learning_rate_keeps_parameters(self):
        spec = model_zoo.preset('DS-ResNet10')
        result = training.train(spec, toy_dataset(6),
                                self.small_config(lr_initial=0.0))
        start = model_zoo.build(spec, 9)
        for name in start.tensors:
            np.testing.assert_array_equal(result.last.tensors[name],
                                          start.tensors[name])

    def test_training_is_deterministic(self):
        spec = model_zoo.preset('DS-ResNet10')
        a = training.train(spec, toy_dataset(6), self.small_config())
        b = training.train(spec, toy_dataset(6), self.small_config())
        self.assertEqual(a.log, b.log)
        for name in a.last.tensors:
            self.assertEqual(a.last.tensors[name].tobytes(),
                             b.last.tensors[name].tobytes())
            self.assertEqual(a.params.tensors[name].tobytes(),
                             b.params.tensors[name].tobytes())

    @patch('dsresnet_kws.training.autodiff.loss_and_gradients')
    def test_divergence_names_the_step(self, loss_and_gradients):
        loss_and_gradients.return_value = (float('nan'), None, {}, None)
        with self.assertRaises(DivergenceError) as cm:
            training.train(model_zoo.preset('DS-ResNet10'), toy_dataset(4),
                           self.small_config())
        self.assertEqual(cm.exception.step, 0)
        self.assertIn('step 0', str(cm.exception))

    @patch('dsresnet_kws.training.evaluate')
    @patch('dsresnet_kws.training.autodiff.loss_and_gradients')
    def test_best_checkpoint_is_earliest_maximum(self, loss_and_gradients,
                                                 evaluate):
        spec = model_zoo.preset('DS-ResNet10')
        zeros = OrderedDict((name, np.zeros(shape)) for name, shape, _ in
                            model_zoo.parameter_shapes(spec))
        loss_and_gradients.return_value = (1.0, zeros, {}, None)
        evaluate.side_effect = [training.EvalResult([[n, 10 - n], [0, 0]])
                                for n in (5, 8, 8, 6)]
        result = training.train(spec, toy_dataset(4), self.small_config(
            total_steps=8, eval_every=2))
        self.assertEqual(result.params.step, 4)
        self.assertAlmostEqual(result.params.val_error, 0.2)
        self.assertEqual([row.step for row in result.log], [2, 4, 6, 8])

    def test_overfits_a_small_subset(self):
        spec = model_zoo.preset('DS-ResNet10')
        dataset = toy_dataset(50)
        config = training.TrainConfig(
            batch_size=50, total_steps=2000, lr_initial=0.01, momentum=0.9,
            weight_decay=0.0, eval_every=25, seed=0, early_stop_accuracy=0.95)
        result = training.train(spec, dataset, config)
        accuracy = training.evaluate(result.params, dataset,
                                     training.TRAIN).accuracy
        self.assertGreaterEqual(accuracy, 0.95)
        self.assertLessEqual(result.params.step, 2000)


class SettingsTest(TempDirTestCase):
    def test_defaults(self):
        self.assertEqual(settings.load_settings(), DEFAULT_KWS_SETTINGS)

    def test_config_file_and_overrides(self):
        with open(self.path('kws.cfg'), 'w') as handle:
            handle.write('# run config\nlr_initial=0.05\nbatch_size: 32\n'
                         'keywords: [up, down]\n')
        merged = settings.load_settings(self.path('kws.cfg'),
                                        {'batch_size': 64, 'seed': None})
        self.assertEqual(merged['lr_initial'], 0.05)
        self.assertEqual(merged['batch_size'], 64)
        self.assertEqual(merged['keywords'], ['up', 'down'])
        self.assertEqual(merged['seed'], 0)

    def test_unknown_key_names_the_line(self):
        with open(self.path('kws.cfg'), 'w') as handle:
            handle.write('seed=1\nlearning_rate=0.1\n')
        with self.assertRaises(ConfigurationError) as cm:
            settings.load_settings(self.path('kws.cfg'))
        self.assertIn(':2:', str(cm.exception))
        self.assertIn('learning_rate', str(cm.exception))

    def test_unknown_override(self):
        with self.assertRaises(ConfigurationError):
            settings.load_settings(overrides={'epochs': 3})

    def test_defaults_are_not_shared(self):
        merged = settings.load_settings()
        merged['keywords'].append('marvin')
        self.assertNotIn('marvin', DEFAULT_KWS_SETTINGS['keywords'])

    @patch('logging.config.dictConfig')
    def test_configure_logging(self, dict_config):
        merged = settings.load_settings()
        settings.configure_logging(merged)
        dict_config.assert_called_once_with(merged['logging'])

    def test_random_streams(self):
        a = settings.random_stream(1, 'init').normal(size=3)
        b = settings.random_stream(1, 'init').normal(size=3)
        c = settings.random_stream(1, 'batches').normal(size=3)
        np.testing.assert_array_equal(a, b)
        self.assertFalse(np.array_equal(a, c))


class CliTest(TempDirTestCase):
    def run_cli(self, *argv):
        output = StringIO()
        code = cli.main(list(argv), output=output)
        return code, output.getvalue()

    def test_analyze_golden(self):
        code, out = self.run_cli('analyze', '--model', 'DS-ResNet18',
                                 '--golden', '1')
        self.assertEqual(code, 0)
        self.assertIn('72K', out)
        self.assertIn('285M', out)
        self.assertNotIn('FAIL', out)

    def test_analyze_totals(self):
        code, out = self.run_cli('analyze', '--model', 'DS-ResNet10')
        self.assertEqual(code, 0)
        total = [line for line in out.splitlines()
                 if line.startswith('Total')][0]
        self.assertEqual(total.split()[1:], ['9984', '5772096'])

    def test_analyze_csv_to_file(self):
        code, _ = self.run_cli('analyze', '--model', 'DS-ResNet14', '--csv',
                               '--out', self.path('t.csv'))
        self.assertEqual(code, 0)
        with open(self.path('t.csv')) as handle:
            self.assertEqual(handle.readline().strip(),
                             'layer,params,multiplies,H,W')

    def test_analyze_spec_file(self):
        with open(self.path('ds10.spec'), 'w') as handle:
            handle.write(DS_RESNET10_TEXT)
        code, _ = self.run_cli('analyze', '--model', self.path('ds10.spec'),
                               '--golden', '3')
        self.assertEqual(code, 0)

    def test_analyze_missing_file(self):
        code, _ = self.run_cli('analyze', '--model', self.path('missing.spec'))
        self.assertEqual(code, 2)

    def test_analyze_golden_mismatch(self):
        table = cost_analyzer.GOLDEN_TABLES[1]
        tampered = table._replace(total=(71935,) + table.total[1:])
        with patch.dict(cost_analyzer.GOLDEN_TABLES, {1: tampered}):
            code, out = self.run_cli('analyze', '--model', 'DS-ResNet18',
                                     '--golden', '1')
        self.assertEqual(code, 1)
        self.assertIn('FAIL Total params', out)

    def test_unknown_flag_is_a_usage_error(self):
        with self.assertRaises(SystemExit) as cm:
            self.run_cli('analyze', '--bogus')
        self.assertEqual(cm.exception.code, 2)

    def test_gradcheck(self):
        code, out = self.run_cli('gradcheck', '--model', 'DS-ResNet10',
                                 '--samples', '1', '--batch', '1')
        self.assertEqual(code, 0)
        self.assertIn('fc5.weight', out)
        code, _ = self.run_cli('gradcheck', '--model', 'DS-ResNet10',
                               '--samples', '1', '--batch', '1',
                               '--tolerance', '0')
        self.assertEqual(code, 1)
        code, _ = self.run_cli('gradcheck', '--model', 'DS-ResNet99')
        self.assertEqual(code, 2)

    def test_infer(self):
        params = model_zoo.build(model_zoo.preset('DS-ResNet10'), 2)
        serialization.save_model(params, self.path('m.dsrn'))
        audio_pipeline.write_wav(self.path('s.wav'), np.zeros(16000))
        argv = ('infer', '--model', self.path('m.dsrn'), '--wav',
                self.path('s.wav'))
        code, first = self.run_cli(*argv)
        self.assertEqual(code, 0)
        self.assertEqual(first, self.run_cli(*argv)[1])
        lines = first.splitlines()
        self.assertTrue(lines[0].startswith('top: '))
        probabilities = [float(line.split()[1]) for line in lines[1:]]
        self.assertEqual(len(probabilities), 12)
        self.assertAlmostEqual(sum(probabilities), 1.0, delta=1e-4)
        self.assertEqual(probabilities, sorted(probabilities, reverse=True))

    def test_infer_recorded_posteriors(self):
        # constant activations after the normalized DS layer, so the logits
        # are the fc weights: log(1) .. log(12), posteriors k / 78
        spec = ArchitectureSpec('fixture', [
            LayerConfig(model_zoo.STANDARD_CONV, m=1, r=1, n=1, d_w=1, d_h=1),
            LayerConfig(model_zoo.DS_CONV, m=1, r=1, n=1),
            LayerConfig(model_zoo.GLOBAL_AVG_POOL, n=1),
            LayerConfig(model_zoo.SOFTMAX_FC, n=12),
        ], normalization=True)
        params = model_zoo.zero_params(spec).copy()
        params.tensors['ds1.b0.l0.bn.beta'][...] = 1.0
        params.tensors['fc3.weight'][:, 0] = np.log(np.arange(1.0, 13.0))
        serialization.save_model(params, self.path('fixture.dsrn'))
        t = np.arange(16000) / 16000.0
        audio_pipeline.write_wav(self.path('tone.wav'),
                                 0.3 * np.sin(2 * np.pi * 440.0 * t))

        code, out = self.run_cli('infer', '--model', self.path('fixture.dsrn'),
                                 '--wav', self.path('tone.wav'))
        self.assertEqual(code, 0)
        lines = out.splitlines()
        self.assertEqual(lines[0], 'top: go')
        self.assertEqual(len(lines), 13)
        for line, index in zip(lines[1:], range(11, -1, -1)):
            label, value = line.split()
            self.assertEqual(label, CLASS_LABELS[index])
            self.assertAlmostEqual(float(value), (index + 1) / 78.0,
                                   delta=1e-6)

    def write_config(self, text='seed: 7\n'):
        with open(self.path('kws.yaml'), 'w') as handle:
            handle.write(text)
        return self.path('kws.yaml')

    def write_caches(self, experiment=1):
        rng = np.random.default_rng(8)
        for split in training.SPLITS:
            serialization.save_features(
                self.path(split + cli.CACHE_SUFFIX),
                [('a.wav', 2, rng.normal(size=(101, 40))),
                 ('b.wav', 5, rng.normal(size=(101, 40)))], experiment)

    def test_every_command_declares_the_common_flags(self):
        parser = cli.build_parser()
        commands = [action for action in parser._actions
                    if isinstance(action, argparse._SubParsersAction)][0]
        self.assertEqual(sorted(commands.choices),
                         ['analyze', 'eval', 'features', 'gradcheck', 'infer',
                          'train'])
        for name, command in commands.choices.items():
            options = dict((option, action) for action in command._actions
                           for option in action.option_strings)
            for flag in ('--seed', '--config', '--out', '--verbose'):
                self.assertIn(flag, options, name)
            for option, action in options.items():
                if option not in ('-h', '--help'):
                    self.assertTrue(action.help, '%s %s' % (name, option))

    def test_analyze_with_common_flags(self):
        code, out = self.run_cli(
            'analyze', '--model', 'DS-ResNet10', '--seed', '4', '--config',
            self.write_config(), '--verbose', '--out', self.path('t.txt'),
            '--save-spec', self.path('ds10.spec'))
        self.assertEqual(code, 0)
        with open(self.path('t.txt')) as handle:
            self.assertEqual(handle.read(), out)
        self.assertEqual(specfile.read_spec(self.path('ds10.spec')),
                         model_zoo.preset('DS-ResNet10'))

    def test_infer_with_common_flags(self):
        serialization.save_model(model_zoo.build(model_zoo.preset('DS-ResNet10')),
                                 self.path('m.dsrn'))
        audio_pipeline.write_wav(self.path('s.wav'), np.zeros(16000))
        code, out = self.run_cli(
            'infer', '--seed', '1', '--model', self.path('m.dsrn'), '--wav',
            self.path('s.wav'), '--config', self.write_config(), '--verbose',
            '--out', self.path('posteriors.txt'))
        self.assertEqual(code, 0)
        with open(self.path('posteriors.txt')) as handle:
            self.assertEqual(handle.read(), out)

    def test_eval_with_common_flags(self):
        self.write_caches()
        serialization.save_model(model_zoo.build(model_zoo.preset('DS-ResNet10')),
                                 self.path('m.dsrn'))
        code, out = self.run_cli(
            'eval', self.path('m.dsrn'), '--data', self.tmp, '--seed', '3',
            '--config', self.write_config(), '--verbose', '--out',
            self.path('eval.txt'))
        self.assertEqual(code, 0)
        self.assertIn('(2 examples)', out)
        with open(self.path('eval.txt')) as handle:
            self.assertEqual(handle.read(), out)

    def test_gradcheck_writes_its_report(self):
        code, out = self.run_cli(
            'gradcheck', '--model', 'DS-ResNet10', '--samples', '1', '--batch',
            '1', '--seed', '2', '--config', self.write_config(), '--verbose',
            '--out', self.path('grad.txt'))
        self.assertEqual(code, 0)
        with open(self.path('grad.txt')) as handle:
            report = handle.read()
        self.assertEqual(report, out)
        self.assertTrue(report.splitlines()[-1].startswith('all '))

    def test_caches_of_another_experiment_are_refused(self):
        self.write_caches(experiment=1)
        code, _ = self.run_cli('train', '--data', self.tmp, '--out',
                               self.path('run'), '--model', 'DS-ResNet10',
                               '--experiment', '2', '--steps', '1')
        self.assertEqual(code, 2)
        self.assertFalse(os.path.exists(self.path('run')))

    def test_infer_bad_wav(self):
        serialization.save_model(model_zoo.build(model_zoo.preset('DS-ResNet10')),
                                 self.path('m.dsrn'))
        write_raw_wav(self.path('8k.wav'), b'\x00' * 64, rate=8000)
        code, _ = self.run_cli('infer', '--model', self.path('m.dsrn'),
                               '--wav', self.path('8k.wav'))
        self.assertEqual(code, 2)
