"""
Binary model files ("DSRN") and feature caches ("DSFC"), little-endian.

Model file body:
    "DSRN", u32 version, u32 name length, name (UTF-8), u32 layer count, then
    per layer: u8 kind, i32 x 5 (m, r, n, d_w, d_h; 0 when absent), u32 rank,
    u32 dims, f32 weights. A layer holding exactly one tensor stores it with
    its own shape; any other layer stores its tensors (parameters, then
    normalisation statistics) flattened into one rank-1 tensor, which is
    empty for pooling layers.

Model metadata section, after the body:
    "DSRM", u32 section version, u32 x 3 input shape, u32 classes, u32 flags
    (bit 0: normalization), per layer: u32 repeat, u32 layers per block,
    u8 se_after, u8 shortcut; then i64 step (-1 when untrained), f64
    validation error and the u32 CRC32 of every preceding byte.

Feature cache:
    "DSFC", u32 version, u32 count, then per record u32 path length, path
    (UTF-8), u8 label, 101 x 40 f32. Followed by "DSFM", u32 section
    version, u32 experiment and the u32 CRC32 of every preceding byte.
"""
import struct
import zlib
from collections import OrderedDict

import numpy as np

from . import model_zoo
from .exceptions import ConfigurationError, DimensionError, ModelFormatError

MODEL_MAGIC = b'DSRN'
MODEL_META_MAGIC = b'DSRM'
FEATURE_MAGIC = b'DSFC'
FEATURE_META_MAGIC = b'DSFM'
FORMAT_VERSION = 1
META_VERSION = 1
FLAG_NORMALIZATION = 1
FEATURE_SHAPE = (101, 40)

KIND_TAGS = dict((kind, tag) for tag, kind in enumerate(model_zoo.LAYER_KINDS))
SE_TAGS = dict((placement, tag)
               for tag, placement in enumerate(model_zoo.SE_PLACEMENTS))

LAYER_FORMAT = '<B5i'
LAYER_META_FORMAT = '<IIBB'


class _Writer(object):
    def __init__(self, handle):
        self.handle = handle
        self.crc = 0

    def write(self, data):
        self.crc = zlib.crc32(data, self.crc)
        self.handle.write(data)

    def pack(self, fmt, *values):
        self.write(struct.pack(fmt, *values))

    def text(self, value):
        data = value.encode('utf-8')
        self.pack('<I', len(data))
        self.write(data)

    def tensor(self, array):
        array = np.asarray(array)
        self.pack('<I', array.ndim)
        self.pack('<%dI' % array.ndim, *array.shape)
        self.write(array.astype('<f4').tobytes())

    def checksum(self):
        self.handle.write(struct.pack('<I', self.crc & 0xffffffff))


class _Reader(object):
    def __init__(self, handle, path):
        self.handle = handle
        self.path = path
        self.crc = 0

    def read(self, size):
        data = self.handle.read(size)
        if len(data) != size:
            raise ModelFormatError('%s: unexpected end of file' % self.path)
        self.crc = zlib.crc32(data, self.crc)
        return data

    def unpack(self, fmt):
        values = struct.unpack(fmt, self.read(struct.calcsize(fmt)))
        return values[0] if len(values) == 1 else values

    def text(self):
        data = self.read(self.unpack('<I'))
        try:
            return data.decode('utf-8')
        except UnicodeDecodeError:
            raise ModelFormatError('%s: string is not valid UTF-8' % self.path)

    def floats(self, shape):
        count = int(np.prod(shape)) if shape else 1
        data = self.read(4 * count)
        return np.frombuffer(data, dtype='<f4').astype(np.float64).reshape(shape)

    def tensor(self):
        rank = self.unpack('<I')
        shape = struct.unpack('<%dI' % rank, self.read(4 * rank))
        return self.floats(shape)

    def magic(self, magic, what):
        found = self.handle.read(len(magic))
        if found != magic:
            raise ModelFormatError('%s: expected %s (magic %r), found %r'
                                   % (self.path, what, magic, found))
        self.crc = zlib.crc32(found, self.crc)

    def version(self, supported, what):
        version = self.unpack('<I')
        if version != supported:
            raise ModelFormatError('%s: unsupported %s version %d'
                                   % (self.path, what, version))

    def checksum(self):
        expected = self.crc & 0xffffffff
        data = self.handle.read(4)
        if len(data) != 4:
            raise ModelFormatError('%s: unexpected end of file' % self.path)
        if struct.unpack('<I', data)[0] != expected:
            raise ModelFormatError('%s: checksum mismatch' % self.path)
        if self.handle.read(1):
            raise ModelFormatError('%s: trailing data after checksum'
                                   % self.path)


def _layer_tensor_names(spec):
    """
    {layer name: [tensor names]}, parameters first, then buffers.
    """
    names = OrderedDict((layer.name, []) for layer in model_zoo.resolve(spec))
    for name, _, _ in model_zoo.parameter_shapes(spec):
        names[name.split('.', 1)[0]].append(name)
    for name, _ in model_zoo.buffer_shapes(spec):
        names[name.split('.', 1)[0]].append(name)
    return names


def _layer_tensor(tensors, names):
    if len(names) == 1:
        return tensors[names[0]]
    if not names:
        return np.zeros(0)
    return np.concatenate([np.asarray(tensors[n]).reshape(-1) for n in names])


def save_model(params, path):
    spec = params.spec
    tensors = dict(params.tensors)
    tensors.update(params.buffers)
    layer_names = _layer_tensor_names(spec)
    with open(path, 'wb') as handle:
        out = _Writer(handle)
        out.write(MODEL_MAGIC)
        out.pack('<I', FORMAT_VERSION)
        out.text(spec.name)
        out.pack('<I', len(spec.layers))
        for config, names in zip(spec.layers, layer_names.values()):
            out.pack(LAYER_FORMAT, KIND_TAGS[config.kind],
                     *[value or 0 for value in (config.m, config.r, config.n,
                                                config.d_w, config.d_h)])
            out.tensor(_layer_tensor(tensors, names))

        out.write(MODEL_META_MAGIC)
        out.pack('<I', META_VERSION)
        out.pack('<3I', *spec.input_shape)
        out.pack('<II', spec.num_classes,
                 FLAG_NORMALIZATION if spec.normalization else 0)
        for config in spec.layers:
            out.pack(LAYER_META_FORMAT, config.repeat, config.layers_per_block,
                     SE_TAGS[config.se_after], int(config.shortcut))
        out.pack('<qd', params.step, params.val_error)
        out.checksum()


def _split_layer(path, layer_name, stored, names, shapes):
    if len(names) == 1:
        if stored.shape != shapes[0]:
            raise ModelFormatError('%s: %s is stored as %s, expected %s'
                                   % (path, layer_name, stored.shape,
                                      shapes[0]))
        return [stored]
    sizes = [int(np.prod(shape)) for shape in shapes]
    if stored.ndim != 1 or stored.size != sum(sizes):
        raise ModelFormatError('%s: %s stores %d weights, expected %d'
                               % (path, layer_name, stored.size, sum(sizes)))
    ends = np.cumsum(sizes)
    return [stored[end - size:end].reshape(shape)
            for end, size, shape in zip(ends, sizes, shapes)]


def load_model(path):
    """
    Reads a model file back into frozen ModelParams.
    """
    try:
        handle = open(path, 'rb')
    except (IOError, OSError) as e:
        raise ModelFormatError('cannot open model file %s: %s'
                               % (path, e.strerror))
    kinds = dict((tag, kind) for kind, tag in KIND_TAGS.items())
    placements = dict((tag, se) for se, tag in SE_TAGS.items())
    with handle:
        reader = _Reader(handle, path)
        reader.magic(MODEL_MAGIC, 'a DSRN model file')
        reader.version(FORMAT_VERSION, 'model format')
        name = reader.text()
        layer_count = reader.unpack('<I')
        rows, stored = [], []
        for index in range(layer_count):
            kind_tag, *dims = reader.unpack(LAYER_FORMAT)
            if kind_tag not in kinds:
                raise ModelFormatError('%s: layer %d has unknown kind tag %d'
                                       % (path, index, kind_tag))
            rows.append((kinds[kind_tag], [value or None for value in dims]))
            stored.append(reader.tensor())

        reader.magic(MODEL_META_MAGIC, 'the model metadata section')
        reader.version(META_VERSION, 'metadata section')
        input_shape = reader.unpack('<3I')
        num_classes, flags = reader.unpack('<II')
        layers = []
        for index, (kind, (m, r, n, d_w, d_h)) in enumerate(rows):
            repeat, per_block, se_tag, shortcut = reader.unpack(
                LAYER_META_FORMAT)
            if se_tag not in placements:
                raise ModelFormatError('%s: layer %d has unknown SE tag %d'
                                       % (path, index, se_tag))
            try:
                config = model_zoo.LayerConfig(
                    kind, m=m, r=r, n=n, d_w=d_w, d_h=d_h, repeat=repeat,
                    layers_per_block=per_block, se_after=placements[se_tag])
            except ConfigurationError as e:
                raise ModelFormatError('%s: layer %d: %s' % (path, index, e))
            if bool(shortcut) != config.shortcut:
                raise ModelFormatError('%s: layer %d shortcut flag does not '
                                       'match its kind' % (path, index))
            layers.append(config)
        step, val_error = reader.unpack('<qd')
        reader.checksum()

    spec = model_zoo.ArchitectureSpec(
        name, layers, input_shape, num_classes,
        bool(flags & FLAG_NORMALIZATION))
    try:
        layer_names = _layer_tensor_names(spec)
        shapes = dict((n, shape) for n, shape, _ in
                      model_zoo.parameter_shapes(spec))
        shapes.update(model_zoo.buffer_shapes(spec))
    except ConfigurationError as e:
        raise ModelFormatError('%s: inconsistent architecture: %s' % (path, e))
    arrays = OrderedDict()
    for (layer_name, names), data in zip(layer_names.items(), stored):
        if not names:
            if data.size:
                raise ModelFormatError('%s: %s has no weights but stores %d'
                                       % (path, layer_name, data.size))
            continue
        arrays.update(zip(names, _split_layer(
            path, layer_name, data, names, [shapes[n] for n in names])))
    try:
        params = model_zoo.load_tensors(
            spec, OrderedDict((n, arrays[n]) for n, _, _ in
                              model_zoo.parameter_shapes(spec)),
            OrderedDict((n, arrays[n]) for n, _ in
                        model_zoo.buffer_shapes(spec)))
    except (ConfigurationError, DimensionError) as e:
        raise ModelFormatError('%s: %s' % (path, e))
    params.step, params.val_error = step, val_error
    return params


def save_features(path, records, experiment=1):
    """
    records -- iterable of (source path, label id, 101 x 40 features)
    experiment -- split convention the records were drawn with
    """
    records = list(records)
    with open(path, 'wb') as handle:
        out = _Writer(handle)
        out.write(FEATURE_MAGIC)
        out.pack('<II', FORMAT_VERSION, len(records))
        for source, label, features in records:
            values = np.asarray(features).reshape(-1)
            if values.size != FEATURE_SHAPE[0] * FEATURE_SHAPE[1]:
                raise DimensionError('%s: features must be %dx%d, got %s'
                                     % (source, FEATURE_SHAPE[0],
                                        FEATURE_SHAPE[1],
                                        np.shape(features)))
            out.text(source)
            out.pack('<B', label)
            out.write(values.astype('<f4').tobytes())
        out.write(FEATURE_META_MAGIC)
        out.pack('<II', META_VERSION, experiment)
        out.checksum()


def load_features(path, experiment=None):
    """
    Returns (paths, labels, features N x 1 x 101 x 40).

    experiment -- when given, a cache written for another experiment is a
                  ConfigurationError
    """
    try:
        handle = open(path, 'rb')
    except (IOError, OSError) as e:
        raise ModelFormatError('cannot open feature cache %s: %s'
                               % (path, e.strerror))
    with handle:
        reader = _Reader(handle, path)
        reader.magic(FEATURE_MAGIC, 'a DSFC feature cache')
        reader.version(FORMAT_VERSION, 'feature cache')
        count = reader.unpack('<I')
        paths, labels = [], []
        features = np.zeros((count, 1) + FEATURE_SHAPE)
        for index in range(count):
            paths.append(reader.text())
            labels.append(reader.unpack('<B'))
            features[index, 0] = reader.floats(FEATURE_SHAPE)
        reader.magic(FEATURE_META_MAGIC, 'the feature cache metadata section')
        reader.version(META_VERSION, 'metadata section')
        stored_experiment = reader.unpack('<I')
        reader.checksum()
    if experiment is not None and stored_experiment != experiment:
        raise ConfigurationError('%s holds features of experiment %d, not %d'
                                 % (path, stored_experiment, experiment))
    return paths, np.array(labels, dtype=np.int64), features
