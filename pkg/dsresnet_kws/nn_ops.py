"""
Forward neural network primitives.

Tensors are numpy float64 arrays in channel-height-width layout: rank 3
(C x H x W) for a single sample, rank 4 (N x C x H x W) for a batch. Every
primitive accepts either rank and returns the same rank it was given.
Convolutions are stride 1, bias-free and use "same" zero padding.
"""
from collections import namedtuple

import numpy as np
from scipy.special import expit

from .exceptions import DimensionError, NumericError

STANDARD = 'standard'
DEPTHWISE = 'depthwise'
POINTWISE = 'pointwise'
CONV_KINDS = (STANDARD, DEPTHWISE, POINTWISE)

BATCH_NORM_EPSILON = 1e-5


_ConvSpec = namedtuple('ConvSpec', ['kernel_h', 'kernel_w', 'out_channels',
                                    'dilation_h', 'dilation_w', 'kind'])


class ConvSpec(_ConvSpec):
    """
    Shape of one convolution: m x r kernel, n filters, (d_h, d_w) dilation.
    """
    __slots__ = ()

    def __new__(cls, kernel_h=3, kernel_w=3, out_channels=1,
                dilation_h=1, dilation_w=1, kind=STANDARD):
        if kind not in CONV_KINDS:
            raise ValueError('unknown convolution kind %r' % (kind,))
        for name, value in (('kernel_h', kernel_h), ('kernel_w', kernel_w),
                            ('out_channels', out_channels),
                            ('dilation_h', dilation_h),
                            ('dilation_w', dilation_w)):
            if int(value) != value or value < 1:
                raise DimensionError('%s must be a positive integer, got %r'
                                     % (name, value))
        if kind == POINTWISE and (kernel_h, kernel_w, dilation_h,
                                  dilation_w) != (1, 1, 1, 1):
            raise DimensionError(
                'pointwise convolution requires a 1x1 kernel without dilation')
        return super(ConvSpec, cls).__new__(
            cls, int(kernel_h), int(kernel_w), int(out_channels),
            int(dilation_h), int(dilation_w), kind)

    @property
    def dilation(self):
        return self.dilation_h, self.dilation_w

    def bind(self, in_channels):
        """
        Checks this convolution against the channel count it is applied to.
        """
        if self.kind == DEPTHWISE and self.out_channels != in_channels:
            raise DimensionError(
                'depthwise convolution has %d output channels but its input '
                'has %d channels' % (self.out_channels, in_channels))
        return self


def check_finite(array, name='tensor'):
    if not np.all(np.isfinite(array)):
        raise NumericError('%s contains non-finite values' % name)
    return array


def as_tensor(data, name='tensor'):
    array = np.ascontiguousarray(data, dtype=np.float64)
    return check_finite(array, name)


def _as_batch(data, name='input'):
    array = as_tensor(data, name)
    if array.ndim == 3:
        return array[np.newaxis], False
    if array.ndim == 4:
        return array, True
    raise DimensionError('%s must be C x H x W or N x C x H x W, got shape %s'
                         % (name, array.shape))


def _unbatch(array, batched):
    return array if batched else array[0]


def same_padding(kernel, dilation):
    """
    Returns (low, high) zero padding that keeps a stride-1 output the size of
    its input. The odd pad, if any, goes on the high side.
    """
    total = (kernel - 1) * dilation
    low = total // 2
    return low, total - low


def pad_same(x, kernel_h, kernel_w, dilation_h, dilation_w):
    top, bottom = same_padding(kernel_h, dilation_h)
    left, right = same_padding(kernel_w, dilation_w)
    if not (top or bottom or left or right):
        return x
    return np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))


def kernel_taps(kernel_h, kernel_w, dilation_h, dilation_w, height, width):
    """
    Yields (i, j, rows, cols): for tap (i, j) the slices of the padded input
    that line up with every output pixel.
    """
    for i in range(kernel_h):
        rows = slice(i * dilation_h, i * dilation_h + height)
        for j in range(kernel_w):
            cols = slice(j * dilation_w, j * dilation_w + width)
            yield i, j, rows, cols


def _check_axis(actual, expected, what):
    if actual != expected:
        raise DimensionError('%s is %d, expected %d' % (what, actual, expected))


def conv2d_standard_batch(x, weights, dilation_h=1, dilation_w=1):
    n, _, height, width = x.shape
    out_channels, _, kernel_h, kernel_w = weights.shape
    padded = pad_same(x, kernel_h, kernel_w, dilation_h, dilation_w)
    # accumulate as O x N x H x W, one BLAS product per tap
    out = np.zeros((out_channels, n, height, width))
    for i, j, rows, cols in kernel_taps(kernel_h, kernel_w, dilation_h,
                                        dilation_w, height, width):
        out += np.tensordot(weights[:, :, i, j], padded[:, :, rows, cols],
                            axes=([1], [1]))
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv2d_depthwise_batch(x, weights, dilation_h=1, dilation_w=1):
    _, _, height, width = x.shape
    _, kernel_h, kernel_w = weights.shape
    padded = pad_same(x, kernel_h, kernel_w, dilation_h, dilation_w)
    out = np.zeros(x.shape)
    for i, j, rows, cols in kernel_taps(kernel_h, kernel_w, dilation_h,
                                        dilation_w, height, width):
        out += weights[np.newaxis, :, i, j, np.newaxis, np.newaxis] * \
            padded[:, :, rows, cols]
    return out


def conv2d_pointwise_batch(x, weights):
    out = np.tensordot(weights, x, axes=([1], [1]))
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv2d_standard(input, weights, spec=None):
    """
    Standard convolution: every output channel sees every input channel.

    input -- C_in x H x W (or batched)
    weights -- C_out x C_in x m x r
    spec -- ConvSpec; derived from the weight shape when omitted
    """
    x, batched = _as_batch(input)
    weights = as_tensor(weights, 'weights')
    if weights.ndim != 4:
        raise DimensionError('standard convolution weights must be '
                             'C_out x C_in x m x r, got shape %s'
                             % (weights.shape,))
    if spec is None:
        spec = ConvSpec(weights.shape[2], weights.shape[3], weights.shape[0])
    _check_axis(weights.shape[0], spec.out_channels,
                'weights axis 0 (out_channels)')
    _check_axis(weights.shape[1], x.shape[1],
                'weights axis 1 (in_channels) vs input channel axis')
    _check_axis(weights.shape[2], spec.kernel_h, 'weights axis 2 (kernel_h)')
    _check_axis(weights.shape[3], spec.kernel_w, 'weights axis 3 (kernel_w)')
    out = conv2d_standard_batch(x, weights, spec.dilation_h, spec.dilation_w)
    return _unbatch(out, batched)


def conv2d_depthwise(input, weights, spec=None):
    """
    Depthwise convolution: channel c of the output only sees channel c of the
    input.

    weights -- C x m x r
    """
    x, batched = _as_batch(input)
    weights = as_tensor(weights, 'weights')
    if weights.ndim != 3:
        raise DimensionError('depthwise weights must be C x m x r, got shape %s'
                             % (weights.shape,))
    if spec is None:
        spec = ConvSpec(weights.shape[1], weights.shape[2], weights.shape[0],
                        kind=DEPTHWISE)
    spec.bind(x.shape[1])
    _check_axis(weights.shape[0], x.shape[1],
                'weights axis 0 (channels) vs input channel axis')
    _check_axis(weights.shape[1], spec.kernel_h, 'weights axis 1 (kernel_h)')
    _check_axis(weights.shape[2], spec.kernel_w, 'weights axis 2 (kernel_w)')
    out = conv2d_depthwise_batch(x, weights, spec.dilation_h, spec.dilation_w)
    return _unbatch(out, batched)


def conv2d_pointwise(input, weights):
    """
    1x1 convolution mixing channels at each pixel.

    weights -- C_out x C_in
    """
    x, batched = _as_batch(input)
    weights = as_tensor(weights, 'weights')
    if weights.ndim != 2:
        raise DimensionError('pointwise weights must be C_out x C_in, got '
                             'shape %s' % (weights.shape,))
    _check_axis(weights.shape[1], x.shape[1],
                'weights axis 1 (in_channels) vs input channel axis')
    return _unbatch(conv2d_pointwise_batch(x, weights), batched)


def pooled_size(extent, window):
    return (extent - window) // window + 1


def avg_pool2d_batch(x, window_h, window_w):
    n, channels, height, width = x.shape
    out_h = pooled_size(height, window_h)
    out_w = pooled_size(width, window_w)
    cropped = x[:, :, :out_h * window_h, :out_w * window_w]
    blocks = cropped.reshape(n, channels, out_h, window_h, out_w, window_w)
    return blocks.mean(axis=(3, 5))


def avg_pool2d(input, window_h, window_w):
    """
    Non-overlapping average pooling, stride equal to the window; trailing
    rows and columns that do not fill a window are dropped.
    """
    x, batched = _as_batch(input)
    height, width = x.shape[2:]
    if window_h < 1 or window_w < 1:
        raise DimensionError('pooling window must be positive, got %dx%d'
                             % (window_h, window_w))
    if window_h > height:
        raise DimensionError('pooling window_h %d exceeds input height %d'
                             % (window_h, height))
    if window_w > width:
        raise DimensionError('pooling window_w %d exceeds input width %d'
                             % (window_w, width))
    return _unbatch(avg_pool2d_batch(x, window_h, window_w), batched)


def global_avg_pool(input):
    x, batched = _as_batch(input)
    return _unbatch(x.mean(axis=(2, 3)), batched)


def fully_connected(input, weights):
    """
    Bias-free dense layer: K x C weights applied to a length-C vector (or an
    N x C batch).
    """
    x = as_tensor(input, 'input')
    weights = as_tensor(weights, 'weights')
    if x.ndim not in (1, 2):
        raise DimensionError('fully connected input must be a vector or N x C, '
                             'got shape %s' % (x.shape,))
    if weights.ndim != 2:
        raise DimensionError('fully connected weights must be K x C, got '
                             'shape %s' % (weights.shape,))
    _check_axis(weights.shape[1], x.shape[-1],
                'weights axis 1 (inputs) vs input feature axis')
    return np.dot(x, weights.T)


def channel_scale(input, scales):
    """
    Multiplies channel c of every sample by scales[..., c].
    """
    x, batched = _as_batch(input)
    scales = as_tensor(scales, 'scales')
    if scales.ndim == 1:
        scales = scales[np.newaxis]
    _check_axis(scales.shape[-1], x.shape[1], 'scale vector length')
    return _unbatch(x * scales[:, :, np.newaxis, np.newaxis], batched)


def relu(input):
    return np.maximum(as_tensor(input, 'input'), 0.0)


def sigmoid(input):
    return expit(as_tensor(input, 'input'))


def log_softmax(input):
    x = as_tensor(input, 'input')
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(input):
    """
    Softmax over the last axis, computed with the max subtracted first.
    """
    x = as_tensor(input, 'input')
    if x.ndim not in (1, 2):
        raise DimensionError('softmax input must be a vector or N x K, got '
                             'shape %s' % (x.shape,))
    shifted = np.exp(x - x.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def batch_norm(input, gamma, beta, mean, variance, epsilon=BATCH_NORM_EPSILON):
    """
    Per-channel affine normalisation with fixed statistics.
    """
    x, batched = _as_batch(input)
    scale = gamma / np.sqrt(variance + epsilon)
    shift = beta - mean * scale
    out = x * scale[np.newaxis, :, np.newaxis, np.newaxis] + \
        shift[np.newaxis, :, np.newaxis, np.newaxis]
    return _unbatch(out, batched)
