"""
Declarative DS-ResNet architectures, parameter construction and inference.

An ArchitectureSpec is an ordered list of LayerConfig rows, the same rows the
parameter tables of the three published models list. `resolve` expands it
into named depthwise-separable units with concrete channels, dilations and
spatial sizes; `build`, `forward`, `receptive_field` and the cost analyzer
all walk that expansion.
"""
import logging
from collections import OrderedDict, namedtuple
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn_ops, se_block
from .exceptions import ConfigurationError, DimensionError
from .se_block import SEConfig
from .settings import random_stream

logger = logging.getLogger(__name__)

STANDARD_CONV = 'standard_conv'
SE = 'se'
AVG_POOL = 'avg_pool'
RESIDUAL_GROUP = 'residual_group'
DS_CONV = 'ds_conv'
GLOBAL_AVG_POOL = 'global_avg_pool'
SOFTMAX_FC = 'softmax_fc'
LAYER_KINDS = (STANDARD_CONV, SE, AVG_POOL, RESIDUAL_GROUP, DS_CONV,
               GLOBAL_AVG_POOL, SOFTMAX_FC)

SE_NONE = 'none'
SE_DEPTHWISE = 'depthwise'
SE_POINTWISE = 'pointwise'
SE_PLACEMENTS = (SE_NONE, SE_DEPTHWISE, SE_POINTWISE)

INPUT_SHAPE = (1, 101, 40)
NUM_CLASSES = 12

LAYER_NAME_PREFIX = {
    STANDARD_CONV: 'conv',
    SE: 'se',
    AVG_POOL: 'pool',
    RESIDUAL_GROUP: 'res',
    DS_CONV: 'ds',
    GLOBAL_AVG_POOL: 'gap',
    SOFTMAX_FC: 'fc',
}


def dilation_schedule(i):
    """
    Dilation of the i-th (0-based) depthwise-separable layer: 2 ** (i // 3).
    """
    if i < 0:
        raise ValueError('DS layer index must be non-negative, got %d' % i)
    return 2 ** (i // 3)


@dataclass(frozen=True)
class LayerConfig:
    """
    One row of a parameter table.

    m, r -- kernel (or pooling window) height and width
    n -- output channels (classes for softmax_fc)
    d_w, d_h -- dilation; None follows dilation_schedule
    repeat -- residual blocks in a residual_group, layers in a ds_conv row
    se_after -- SE placement inside DS layers (ablation variants)
    """
    kind: str
    m: int = None
    r: int = None
    n: int = None
    d_w: int = None
    d_h: int = None
    repeat: int = 1
    layers_per_block: int = 2
    se_after: str = SE_NONE

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError('unknown layer kind %r' % (self.kind,))
        if self.se_after not in SE_PLACEMENTS:
            raise ConfigurationError('unknown SE placement %r'
                                     % (self.se_after,))
        if self.repeat < 1:
            raise ConfigurationError('%s repeat must be at least 1'
                                     % self.kind)

    @property
    def shortcut(self):
        return self.kind == RESIDUAL_GROUP

    @property
    def ds_layer_count(self):
        if self.kind == RESIDUAL_GROUP:
            return self.repeat * self.layers_per_block
        if self.kind == DS_CONV:
            return self.repeat
        return 0


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    layers: tuple
    input_shape: tuple = INPUT_SHAPE
    num_classes: int = NUM_CLASSES
    normalization: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'layers', tuple(self.layers))
        object.__setattr__(self, 'input_shape', tuple(self.input_shape))

    @property
    def ds_layer_count(self):
        return sum(layer.ds_layer_count for layer in self.layers)

    def with_normalization(self, enabled=True):
        return replace(self, normalization=enabled)

    def validate(self):
        resolve(self)
        return self


DSUnit = namedtuple('DSUnit', ['name', 'index', 'in_channels', 'out_channels',
                               'kernel_h', 'kernel_w', 'dilation_h',
                               'dilation_w', 'se_after', 'size'])

ResolvedLayer = namedtuple('ResolvedLayer', ['name', 'config', 'in_channels',
                                             'out_channels', 'in_size',
                                             'out_size', 'blocks'])


def _require(value, what, layer_name):
    if value is None:
        raise ConfigurationError('%s: %s is required' % (layer_name, what))
    if int(value) != value or value < 1:
        raise ConfigurationError('%s: %s must be a positive integer, got %r'
                                 % (layer_name, what, value))
    return int(value)


def _dilation(value, ds_index):
    if value is None:
        return dilation_schedule(ds_index)
    return int(value)


def resolve(spec):
    """
    Expands `spec` into ResolvedLayer records, checking channel and spatial
    consistency on the way.
    """
    if not spec.layers:
        raise ConfigurationError('%s: architecture has no layers' % spec.name)
    kinds = [layer.kind for layer in spec.layers]
    if kinds[-2:] != [GLOBAL_AVG_POOL, SOFTMAX_FC]:
        raise ConfigurationError(
            '%s: architecture must end with global_avg_pool then softmax_fc'
            % spec.name)
    if len(spec.input_shape) != 3:
        raise ConfigurationError('%s: input shape must be C x H x W'
                                 % spec.name)

    channels, height, width = spec.input_shape
    ds_index = 0
    resolved = []
    for position, config in enumerate(spec.layers):
        name = '%s%d' % (LAYER_NAME_PREFIX[config.kind], position)
        in_channels, in_size = channels, (height, width)
        blocks = ()

        if config.kind == STANDARD_CONV:
            m = _require(config.m, 'm', name)
            r = _require(config.r, 'r', name)
            channels = _require(config.n, 'n', name)
            blocks = ((DSUnit(name, None, in_channels, channels, m, r,
                              int(config.d_h or 1), int(config.d_w or 1),
                              SE_NONE, in_size),),)
        elif config.kind == SE:
            if config.n is not None and config.n != channels:
                raise ConfigurationError('%s: SE declares %d channels but its '
                                         'input has %d'
                                         % (name, config.n, channels))
        elif config.kind == AVG_POOL:
            m = _require(config.m, 'm', name)
            r = _require(config.r, 'r', name)
            if m > height or r > width:
                raise ConfigurationError('%s: %dx%d window exceeds %dx%d input'
                                         % (name, m, r, height, width))
            height = nn_ops.pooled_size(height, m)
            width = nn_ops.pooled_size(width, r)
        elif config.kind in (RESIDUAL_GROUP, DS_CONV):
            m = _require(config.m, 'm', name)
            r = _require(config.r, 'r', name)
            out_channels = _require(config.n, 'n', name)
            if config.kind == RESIDUAL_GROUP and out_channels != channels:
                raise ConfigurationError(
                    '%s: residual group of %d channels cannot take a %d-channel '
                    'input through an identity shortcut'
                    % (name, out_channels, channels))
            per_block = config.layers_per_block if config.shortcut else 1
            built = []
            for b in range(config.repeat):
                units = []
                for l in range(per_block):
                    unit_name = '%s.b%d.l%d' % (name, b, l)
                    units.append(DSUnit(
                        unit_name, ds_index, channels, out_channels, m, r,
                        _dilation(config.d_h, ds_index),
                        _dilation(config.d_w, ds_index),
                        config.se_after, (height, width)))
                    channels = out_channels
                    ds_index += 1
                built.append(tuple(units))
            blocks = tuple(built)
        elif config.kind == GLOBAL_AVG_POOL:
            height, width = 1, 1
        elif config.kind == SOFTMAX_FC:
            classes = _require(config.n, 'n', name)
            if classes != spec.num_classes:
                raise ConfigurationError('%s: softmax has %d outputs but the '
                                         'architecture declares %d classes'
                                         % (name, classes, spec.num_classes))
            channels = classes

        resolved.append(ResolvedLayer(name, config, in_channels, channels,
                                      in_size, (height, width), blocks))
    return resolved


def ds_units(spec):
    for layer in resolve(spec):
        if layer.config.kind in (RESIDUAL_GROUP, DS_CONV):
            for block in layer.blocks:
                for unit in block:
                    yield unit


def _preset_layers(channels, stem_pool, group, tail, se_after=SE_NONE,
                   with_se=True):
    layers = [LayerConfig(STANDARD_CONV, m=3, r=3, n=channels, d_w=1, d_h=1)]
    if with_se:
        layers.append(LayerConfig(SE, n=channels))
    if stem_pool is not None:
        layers.append(LayerConfig(AVG_POOL, m=stem_pool[0], r=stem_pool[1],
                                  n=channels))
    kind, repeat = group
    layers.append(LayerConfig(kind, m=3, r=3, n=channels, repeat=repeat,
                              se_after=se_after))
    if tail:
        layers.append(LayerConfig(DS_CONV, m=3, r=3, n=channels,
                                  se_after=se_after))
    layers.append(LayerConfig(GLOBAL_AVG_POOL, n=channels))
    layers.append(LayerConfig(SOFTMAX_FC, n=NUM_CLASSES))
    return tuple(layers)


PRESETS = OrderedDict([
    ('DS-ResNet18', lambda: _preset_layers(64, None, (RESIDUAL_GROUP, 7), True)),
    ('DS-ResNet14', lambda: _preset_layers(32, (2, 2), (RESIDUAL_GROUP, 5),
                                           True)),
    ('DS-ResNet10', lambda: _preset_layers(32, (4, 2), (DS_CONV, 7), False)),
    # SE placement ablations of DS-ResNet18
    ('DS-ResNet18-n', lambda: _preset_layers(64, None, (RESIDUAL_GROUP, 7),
                                             True, with_se=False)),
    ('DS-ResNet18-d', lambda: _preset_layers(64, None, (RESIDUAL_GROUP, 7),
                                             True, se_after=SE_DEPTHWISE)),
    ('DS-ResNet18-p', lambda: _preset_layers(64, None, (RESIDUAL_GROUP, 7),
                                             True, se_after=SE_POINTWISE)),
])


def preset(name):
    try:
        layers = PRESETS[name]()
    except KeyError:
        raise ConfigurationError('unknown preset %r (choose from %s)'
                                 % (name, ', '.join(PRESETS)))
    return ArchitectureSpec(name=name, layers=layers)


@dataclass
class ModelParams:
    """
    Learnable weights of a built network, keyed by dotted layer path
    (`conv0.weight`, `res2.b3.l1.pointwise`, `fc5.weight`, ...). Buffers hold
    batch-normalisation running statistics, which are not parameters.
    """
    spec: ArchitectureSpec
    tensors: OrderedDict
    buffers: OrderedDict = field(default_factory=OrderedDict)
    step: int = -1
    val_error: float = float('nan')

    @property
    def total_count(self):
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self, writeable=True):
        params = ModelParams(
            self.spec,
            OrderedDict((k, np.array(v)) for k, v in self.tensors.items()),
            OrderedDict((k, np.array(v)) for k, v in self.buffers.items()),
            self.step, self.val_error)
        if not writeable:
            params.freeze()
        return params

    def freeze(self):
        for array in list(self.tensors.values()) + list(self.buffers.values()):
            array.flags.writeable = False
        return self


def _se_shapes(prefix, channels):
    config = SEConfig(channels)
    return [(prefix + '.squeeze', config.squeeze_shape, channels),
            (prefix + '.excite', config.excite_shape, config.bottleneck_dim)]


def _unit_shapes(unit, normalization):
    shapes = [(unit.name + '.depthwise',
               (unit.in_channels, unit.kernel_h, unit.kernel_w),
               unit.kernel_h * unit.kernel_w)]
    if unit.se_after == SE_DEPTHWISE:
        shapes += _se_shapes(unit.name + '.se', unit.in_channels)
    shapes.append((unit.name + '.pointwise',
                   (unit.out_channels, unit.in_channels), unit.in_channels))
    if normalization:
        shapes.append((unit.name + '.bn.gamma', (unit.out_channels,), None))
        shapes.append((unit.name + '.bn.beta', (unit.out_channels,), None))
    if unit.se_after == SE_POINTWISE:
        shapes += _se_shapes(unit.name + '.se', unit.out_channels)
    return shapes


def parameter_shapes(spec):
    """
    Returns [(name, shape, fan_in)] in build order; fan_in is None for
    normalisation scale/shift.
    """
    shapes = []
    for layer in resolve(spec):
        kind = layer.config.kind
        if kind == STANDARD_CONV:
            unit = layer.blocks[0][0]
            shapes.append((layer.name + '.weight',
                           (unit.out_channels, unit.in_channels,
                            unit.kernel_h, unit.kernel_w),
                           unit.in_channels * unit.kernel_h * unit.kernel_w))
        elif kind == SE:
            shapes += _se_shapes(layer.name, layer.in_channels)
        elif kind in (RESIDUAL_GROUP, DS_CONV):
            for block in layer.blocks:
                for unit in block:
                    shapes += _unit_shapes(unit, spec.normalization)
        elif kind == SOFTMAX_FC:
            shapes.append((layer.name + '.weight',
                           (layer.out_channels, layer.in_channels),
                           layer.in_channels))
    return shapes


def buffer_shapes(spec):
    if not spec.normalization:
        return []
    shapes = []
    for unit in ds_units(spec):
        shapes.append((unit.name + '.bn.mean', (unit.out_channels,)))
        shapes.append((unit.name + '.bn.var', (unit.out_channels,)))
    return shapes


def build(spec, seed=0):
    """
    Creates freshly initialised parameters for `spec`.

    Weights are zero-mean Gaussians with std sqrt(2 / fan_in), drawn from the
    `init` sub-stream of `seed` in build order.
    """
    rng = random_stream(seed, 'init')
    tensors = OrderedDict()
    for name, shape, fan_in in parameter_shapes(spec):
        if fan_in is None:
            value = 1.0 if name.endswith('.gamma') else 0.0
            tensors[name] = np.full(shape, value)
        else:
            tensors[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    buffers = OrderedDict()
    for name, shape in buffer_shapes(spec):
        buffers[name] = np.ones(shape) if name.endswith('.var') \
            else np.zeros(shape)
    params = ModelParams(spec, tensors, buffers)
    logger.debug('built %s with %d parameters', spec.name, params.total_count)
    return params.freeze()


class ArrayOps(object):
    """
    Plain numpy evaluation of the network graph.

    training -- normalise with batch statistics instead of running averages
    """

    def __init__(self, params, training=False):
        self.params = params
        self.training = training

    def param(self, name):
        return self.params.tensors[name]

    def conv2d_standard(self, x, weights, dilation_h, dilation_w):
        return nn_ops.conv2d_standard_batch(x, weights, dilation_h, dilation_w)

    def conv2d_depthwise(self, x, weights, dilation_h, dilation_w):
        return nn_ops.conv2d_depthwise_batch(x, weights, dilation_h, dilation_w)

    def conv2d_pointwise(self, x, weights):
        return nn_ops.conv2d_pointwise_batch(x, weights)

    def avg_pool2d(self, x, window_h, window_w):
        return nn_ops.avg_pool2d_batch(x, window_h, window_w)

    def global_avg_pool(self, x):
        return x.mean(axis=(2, 3))

    def fully_connected(self, x, weights):
        return np.dot(x, weights.T)

    def relu(self, x):
        return np.maximum(x, 0.0)

    def sigmoid(self, x):
        return nn_ops.sigmoid(x)

    def channel_scale(self, x, scales):
        return x * scales[:, :, np.newaxis, np.newaxis]

    def add(self, a, b):
        return a + b

    def batch_norm(self, x, prefix):
        gamma = self.param(prefix + '.gamma')
        beta = self.param(prefix + '.beta')
        if self.training:
            mean = x.mean(axis=(0, 2, 3))
            variance = x.var(axis=(0, 2, 3))
        else:
            mean = self.params.buffers[prefix + '.mean']
            variance = self.params.buffers[prefix + '.var']
        return nn_ops.batch_norm(x, gamma, beta, mean, variance)


def squeeze_excite(ops, x, prefix):
    return se_block.reweight(x, ops.param(prefix + '.squeeze'),
                             ops.param(prefix + '.excite'), ops)


def apply_unit(ops, x, unit, normalization):
    """
    depthwise -> [SE] -> pointwise -> [BN] -> [SE]; activation is left to the
    caller.
    """
    h = ops.conv2d_depthwise(x, ops.param(unit.name + '.depthwise'),
                             unit.dilation_h, unit.dilation_w)
    if unit.se_after == SE_DEPTHWISE:
        h = squeeze_excite(ops, h, unit.name + '.se')
    h = ops.conv2d_pointwise(h, ops.param(unit.name + '.pointwise'))
    if normalization:
        h = ops.batch_norm(h, unit.name + '.bn')
    if unit.se_after == SE_POINTWISE:
        h = squeeze_excite(ops, h, unit.name + '.se')
    return h


def apply_block(ops, x, block, shortcut, normalization=False):
    """
    Runs one block of DS units. Every unit is followed by a ReLU; with a
    shortcut the block input is added before the last ReLU.
    """
    h = x
    for position, unit in enumerate(block):
        h = apply_unit(ops, h, unit, normalization)
        if shortcut and position == len(block) - 1:
            h = ops.add(h, x)
        h = ops.relu(h)
    return h


def run_network(spec, ops, x):
    """
    Evaluates the graph of `spec` with the primitive set `ops` and returns the
    logits. `ops` is an ArrayOps or an autodiff Tape.
    """
    for layer in resolve(spec):
        kind = layer.config.kind
        if kind == STANDARD_CONV:
            unit = layer.blocks[0][0]
            x = ops.relu(ops.conv2d_standard(x, ops.param(layer.name + '.weight'),
                                             unit.dilation_h, unit.dilation_w))
        elif kind == SE:
            x = squeeze_excite(ops, x, layer.name)
        elif kind == AVG_POOL:
            x = ops.avg_pool2d(x, layer.config.m, layer.config.r)
        elif kind in (RESIDUAL_GROUP, DS_CONV):
            for block in layer.blocks:
                x = apply_block(ops, x, block, layer.config.shortcut,
                                spec.normalization)
        elif kind == GLOBAL_AVG_POOL:
            x = ops.global_avg_pool(x)
        elif kind == SOFTMAX_FC:
            x = ops.fully_connected(x, ops.param(layer.name + '.weight'))
    return x


def _check_features(spec, features):
    x = nn_ops.as_tensor(features, 'features')
    batched = x.ndim == 4
    if not batched:
        x = x[np.newaxis]
    if x.ndim != 4 or x.shape[1:] != spec.input_shape:
        raise DimensionError('%s expects features of shape %s, got %s'
                             % (spec.name, 'x'.join(map(str, spec.input_shape)),
                                np.shape(features)))
    return x, batched


def logits(params, features, training=False):
    x, batched = _check_features(params.spec, features)
    out = run_network(params.spec, ArrayOps(params, training), x)
    return out if batched else out[0]


def forward(params, features):
    """
    Class posteriors for one 1 x 101 x 40 feature matrix (or an N-batch).
    """
    return nn_ops.softmax(logits(params, features))


def receptive_field(spec, max_ds_layers=None):
    """
    Returns (rf_time, rf_freq): the input extent one output unit of the last
    convolution can see.

    max_ds_layers -- stop after this many depthwise-separable layers
    """
    rf = [1, 1]
    jump = [1, 1]
    seen = 0
    for layer in resolve(spec):
        kind = layer.config.kind
        if kind == AVG_POOL:
            for axis, window in enumerate((layer.config.m, layer.config.r)):
                rf[axis] += (window - 1) * jump[axis]
                jump[axis] *= window
        elif kind in (STANDARD_CONV, RESIDUAL_GROUP, DS_CONV):
            for block in layer.blocks:
                for unit in block:
                    if kind != STANDARD_CONV:
                        if max_ds_layers is not None and seen >= max_ds_layers:
                            return tuple(rf)
                        seen += 1
                    rf[0] += (unit.kernel_h - 1) * unit.dilation_h * jump[0]
                    rf[1] += (unit.kernel_w - 1) * unit.dilation_w * jump[1]
        elif kind == GLOBAL_AVG_POOL:
            break
    return tuple(rf)


def zero_params(spec):
    """
    Parameters with every weight set to zero (normalisation scales stay 1).
    """
    params = build(spec).copy()
    for name, array in params.tensors.items():
        if not name.endswith('.gamma'):
            array[...] = 0.0
    return params.freeze()


def load_tensors(spec, tensors, buffers=None):
    """
    Wraps externally supplied arrays as ModelParams after checking names and
    shapes against `spec`.
    """
    expected = parameter_shapes(spec)
    if list(tensors) != [name for name, _, _ in expected]:
        raise ConfigurationError('tensor names do not match %s' % spec.name)
    for name, shape, _ in expected:
        if tuple(np.shape(tensors[name])) != tuple(shape):
            raise DimensionError('%s has shape %s, expected %s'
                                 % (name, np.shape(tensors[name]), shape))
    params = ModelParams(spec,
                         OrderedDict((k, np.array(v, dtype=np.float64))
                                     for k, v in tensors.items()),
                         OrderedDict((k, np.array(v, dtype=np.float64))
                                     for k, v in (buffers or {}).items()))
    return params.freeze()
