"""Squeeze-and-excitation channel reweighting."""
import math
from fractions import Fraction

import numpy as np

from . import nn_ops
from .exceptions import DimensionError

DEFAULT_REDUCTION = Fraction(1, 16)


class SEConfig(object):
    """
    channels -- C, number of feature maps being reweighted
    reduction -- alpha; the bottleneck width is max(1, round(C * alpha))
    """

    def __init__(self, channels, reduction=DEFAULT_REDUCTION):
        if channels < 1:
            raise DimensionError('SE block needs at least one channel')
        self.channels = int(channels)
        self.reduction = Fraction(reduction)
        if self.reduction <= 0:
            raise ValueError('SE reduction must be positive')

    @property
    def bottleneck_dim(self):
        # half-up rounding
        return max(1, int(math.floor(self.channels * self.reduction
                                     + Fraction(1, 2))))

    @property
    def squeeze_shape(self):
        return self.bottleneck_dim, self.channels

    @property
    def excite_shape(self):
        return self.channels, self.bottleneck_dim

    def __repr__(self):
        return 'SEConfig(channels=%d, reduction=%s)' % (self.channels,
                                                        self.reduction)


def se_param_count(config):
    return 2 * config.channels * config.bottleneck_dim


def se_multiply_count(config):
    """
    Both bottleneck layers plus one rescale multiply per channel.
    """
    return se_param_count(config) + config.channels


def excitation(squeezed, squeeze_weights, excite_weights, ops=nn_ops):
    """
    Channel weights in (0, 1) from a squeezed N x C (or length C) vector.
    """
    hidden = ops.relu(ops.fully_connected(squeezed, squeeze_weights))
    return ops.sigmoid(ops.fully_connected(hidden, excite_weights))


def reweight(input, squeeze_weights, excite_weights, ops=nn_ops):
    """
    Squeeze, excite and rescale with the primitives of `ops`: the nn_ops
    module itself, a model_zoo.ArrayOps or an autodiff Tape.
    """
    squeezed = ops.global_avg_pool(input)
    weights = excitation(squeezed, squeeze_weights, excite_weights, ops)
    return ops.channel_scale(input, weights)


def se_forward(input, squeeze_weights, excite_weights):
    """
    Reweights the channels of `input` (C x H x W or batched).

    squeeze_weights -- b x C, first (ReLU) bottleneck layer
    excite_weights -- C x b, second (sigmoid) layer
    """
    squeeze_weights = np.asarray(squeeze_weights, dtype=np.float64)
    excite_weights = np.asarray(excite_weights, dtype=np.float64)
    channels = np.shape(input)[-3]
    if squeeze_weights.ndim != 2 or squeeze_weights.shape[1] != channels:
        raise DimensionError('SE squeeze weights must be b x %d, got shape %s'
                             % (channels, squeeze_weights.shape))
    if excite_weights.shape != (channels, squeeze_weights.shape[0]):
        raise DimensionError('SE excite weights must be %d x %d, got shape %s'
                             % (channels, squeeze_weights.shape[0],
                                excite_weights.shape))
    return reweight(input, squeeze_weights, excite_weights)
