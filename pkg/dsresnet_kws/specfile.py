"""
Plain-text architecture descriptions.

    # DS-ResNet10
    name DS-ResNet10
    input 1 101 40
    classes 12
    standard_conv   3 3 32  1    1    1
    se              - - 32  -    -    1
    avg_pool        4 2 32  -    -    1
    ds_conv         3 3 32  auto auto 7
    global_avg_pool - - 32  -    -    1
    softmax_fc      - - 12  -    -    1

Layer lines are `kind m r n d_w d_h repeat [se_after]`; `-` marks a field
that does not apply and `auto` a dilation taken from the schedule.
"""
import os
import re

from . import model_zoo
from .exceptions import ConfigurationError, SpecParseError
from .model_zoo import ArchitectureSpec, LayerConfig

FIELD_SEPARATOR = re.compile(r'[\s,]+')
NOT_APPLICABLE = '-'
SCHEDULED = 'auto'
TRUE_WORDS = ('true', 'yes', 'on', '1')
FALSE_WORDS = ('false', 'no', 'off', '0')


def _integer(token, what, lineno, path, allow_auto=False):
    if token == NOT_APPLICABLE or (allow_auto and token == SCHEDULED):
        return None
    try:
        value = int(token)
    except ValueError:
        raise SpecParseError('%s must be an integer%s, got %r'
                             % (what, " or 'auto'" if allow_auto else '',
                                token), lineno, path)
    if value < 1:
        raise SpecParseError('%s must be positive, got %d' % (what, value),
                             lineno, path)
    return value


def _directive(tokens, lineno, path, header):
    keyword, args = tokens[0].lower(), tokens[1:]
    if keyword == 'name':
        if not args:
            raise SpecParseError('name needs a value', lineno, path)
        header['name'] = ' '.join(args)
    elif keyword == 'input':
        if len(args) != 3:
            raise SpecParseError('input needs C H W', lineno, path)
        header['input_shape'] = tuple(_integer(a, 'input dimension', lineno,
                                               path) for a in args)
        if None in header['input_shape']:
            raise SpecParseError('input dimensions cannot be "-"', lineno,
                                 path)
    elif keyword == 'classes':
        if len(args) != 1:
            raise SpecParseError('classes needs one value', lineno, path)
        header['num_classes'] = _integer(args[0], 'classes', lineno, path)
    elif keyword == 'normalization':
        word = args[0].lower() if len(args) == 1 else ''
        if word not in TRUE_WORDS + FALSE_WORDS:
            raise SpecParseError('normalization must be true or false',
                                 lineno, path)
        header['normalization'] = word in TRUE_WORDS
    else:
        return False
    return True


def _layer(tokens, lineno, path):
    kind = tokens[0].lower()
    if kind not in model_zoo.LAYER_KINDS:
        raise SpecParseError('unknown directive or layer kind %r' % tokens[0],
                             lineno, path)
    if len(tokens) not in (7, 8):
        raise SpecParseError('%s needs 6 or 7 fields (m r n d_w d_h repeat '
                             '[se_after]), got %d'
                             % (kind, len(tokens) - 1), lineno, path)
    m = _integer(tokens[1], 'm', lineno, path)
    r = _integer(tokens[2], 'r', lineno, path)
    n = _integer(tokens[3], 'n', lineno, path)
    d_w = _integer(tokens[4], 'd_w', lineno, path, allow_auto=True)
    d_h = _integer(tokens[5], 'd_h', lineno, path, allow_auto=True)
    repeat = _integer(tokens[6], 'repeat', lineno, path) or 1
    se_after = tokens[7].lower() if len(tokens) == 8 else model_zoo.SE_NONE
    try:
        return LayerConfig(kind, m=m, r=r, n=n, d_w=d_w, d_h=d_h,
                           repeat=repeat, se_after=se_after)
    except ConfigurationError as e:
        raise SpecParseError(str(e), lineno, path)


def parse_spec(text, path=None, name=None):
    """
    Parses an architecture description and returns a validated
    ArchitectureSpec.

    name -- used when the text has no `name` directive
    """
    header = {}
    layers = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        tokens = [t for t in FIELD_SEPARATOR.split(line) if t]
        if _directive(tokens, lineno, path, header):
            continue
        layers.append(_layer(tokens, lineno, path))

    if not layers:
        raise SpecParseError('no layers defined', path=path)
    header.setdefault('name', name or (os.path.splitext(
        os.path.basename(path))[0] if path else 'custom'))
    spec = ArchitectureSpec(layers=layers, **header)
    try:
        return spec.validate()
    except ConfigurationError as e:
        raise SpecParseError(str(e), path=path)


def read_spec(path):
    try:
        with open(path) as handle:
            text = handle.read()
    except (IOError, OSError) as e:
        raise SpecParseError('cannot read architecture file: %s'
                             % e.strerror, path=path)
    return parse_spec(text, path)


def _field(value, auto=False):
    if value is None:
        return SCHEDULED if auto else NOT_APPLICABLE
    return str(value)


def format_spec(spec):
    lines = ['name %s' % spec.name,
             'input %d %d %d' % spec.input_shape,
             'classes %d' % spec.num_classes]
    if spec.normalization:
        lines.append('normalization true')
    ds_kinds = (model_zoo.RESIDUAL_GROUP, model_zoo.DS_CONV)
    for layer in spec.layers:
        auto = layer.kind in ds_kinds
        fields = [layer.kind, _field(layer.m), _field(layer.r),
                  _field(layer.n), _field(layer.d_w, auto),
                  _field(layer.d_h, auto), str(layer.repeat)]
        if layer.se_after != model_zoo.SE_NONE:
            fields.append(layer.se_after)
        lines.append(' '.join(fields))
    return '\n'.join(lines) + '\n'


def write_spec(spec, path):
    with open(path, 'w') as handle:
        handle.write(format_spec(spec))


def load_architecture(model):
    """
    A preset name or the path of an architecture file.
    """
    if model in model_zoo.PRESETS:
        return model_zoo.preset(model)
    if os.path.exists(model):
        return read_spec(model)
    raise ConfigurationError('%r is neither a preset (%s) nor an existing '
                             'architecture file'
                             % (model, ', '.join(model_zoo.PRESETS)))
