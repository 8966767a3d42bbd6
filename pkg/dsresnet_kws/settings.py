"""Loads KWS settings: built-in defaults < config file < overrides."""
import copy
import logging
import logging.config
import re
import zlib

import numpy as np
import yaml

from dsresnet_kws import DEFAULT_KWS_SETTINGS
from .exceptions import ConfigurationError

logger = logging.getLogger(__name__)

KEY_VALUE_LINE = re.compile(r'^\s*([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*?)\s*$')


def read_config_file(path):
    """
    Reads a flat YAML mapping from `path`.

    `key=value` lines are rewritten to `key: value` so that both spellings
    share YAML scalar typing (0.1 is a float, true is a bool, ...).
    """
    try:
        with open(path) as handle:
            lines = handle.read().splitlines()
    except (IOError, OSError) as e:
        raise ConfigurationError('cannot read config file %s: %s' % (path, e))

    normalised = []
    key_lines = {}
    for lineno, line in enumerate(lines, 1):
        match = KEY_VALUE_LINE.match(line)
        if match:
            line = '%s: %s' % match.groups()
        key = line.split(':', 1)[0].strip()
        if key and not key.startswith('#') and not line.startswith(' '):
            key_lines.setdefault(key, lineno)
        normalised.append(line)

    try:
        data = yaml.safe_load('\n'.join(normalised))
    except yaml.YAMLError as e:
        raise ConfigurationError('%s: YAMLError: %s' % (path, e))

    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(
            '%s: expected a mapping of settings, got %s'
            % (path, type(data).__name__))

    for key in data:
        if key not in DEFAULT_KWS_SETTINGS:
            raise ConfigurationError(
                '%s:%s: unknown setting %r'
                % (path, key_lines.get(key, '?'), key))
    return data


def load_settings(config_path=None, overrides=None):
    """
    Returns the merged settings dict.

    config_path -- optional YAML / key=value file
    overrides -- dict of values from the command line; None values are ignored
    """
    settings = {}
    if config_path is not None:
        settings.update(read_config_file(config_path))

    for key, value in (overrides or {}).items():
        if key not in DEFAULT_KWS_SETTINGS:
            raise ConfigurationError('unknown setting %r' % key)
        if value is not None:
            settings[key] = value

    for key, value in DEFAULT_KWS_SETTINGS.items():
        if key not in settings:
            settings[key] = copy.deepcopy(value)

    return settings


def configure_logging(settings, verbose=False):
    logging.config.dictConfig(settings['logging'])
    if verbose:
        logging.getLogger('dsresnet_kws').setLevel(logging.DEBUG)
    logger.debug('logging configured')


def random_stream(seed, *keys):
    """
    Returns a numpy Generator for the named sub-stream `keys` of `seed`.

    Keys may be strings (hashed with crc32, stable across platforms) or
    non-negative ints, e.g. random_stream(7, 'augment', path, epoch).
    """
    entropy = [int(seed)]
    for key in keys:
        if isinstance(key, str):
            key = zlib.crc32(key.encode('utf-8')) & 0xffffffff
        entropy.append(int(key))
    return np.random.default_rng(entropy)
