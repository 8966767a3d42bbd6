"""
Speech Commands ingestion: WAV reading, MFCC features, hash-based splits,
silence/unknown balancing and training-time augmentation.
"""
import glob
import hashlib
import logging
import os
import re
import wave
from collections import OrderedDict, namedtuple
from functools import lru_cache

import numpy as np
from scipy.fftpack import dct
from scipy.signal import get_window

from dsresnet_kws import DEFAULT_KWS_SETTINGS, SILENCE_INDEX, UNKNOWN_INDEX
from .compat import as_float64, frame_signal
from .exceptions import ConfigurationError, DimensionError, IngestionError
from .settings import random_stream
from .training import TRAIN, VALIDATION, TEST, SPLITS

logger = logging.getLogger(__name__)

BACKGROUND_NOISE_DIR = '_background_noise_'
VALIDATION_LIST = 'validation_list.txt'
TESTING_LIST = 'testing_list.txt'
MAX_NUM_WAVS_PER_CLASS = 2 ** 27 - 1
NOHASH = re.compile(r'_nohash_.*$')

EXPERIMENT_HASHED = 1
EXPERIMENT_STANDARD = 2

MFCC_OPTIONS = ('sample_rate', 'clip_samples', 'window_ms', 'shift_ms',
                'n_fft', 'n_mels', 'n_mfcc', 'fmin', 'fmax', 'log_floor')


Utterance = namedtuple('Utterance', ['path', 'label', 'split', 'offset',
                                     'volume'])
Utterance.__new__.__defaults__ = (None, None)
Utterance.__doc__ = """
One example of the corpus. Word utterances point at their WAV file; silence
utterances point at a background-noise file and carry the crop offset and
volume (offset is None for word utterances).
"""


def read_wav(path, sample_rate=DEFAULT_KWS_SETTINGS['sample_rate']):
    """
    Reads a 16-bit mono PCM WAV file into floats in [-1, 1).
    """
    try:
        with wave.open(path, 'rb') as handle:
            channels = handle.getnchannels()
            width = handle.getsampwidth()
            rate = handle.getframerate()
            frames = handle.readframes(handle.getnframes())
    except (wave.Error, EOFError) as e:
        raise IngestionError('%s: malformed WAV file: %s' % (path, e))
    except (IOError, OSError) as e:
        raise IngestionError('%s: cannot read: %s' % (path, e))

    if width != 2:
        raise IngestionError('%s: unsupported sample width %d bits, expected '
                             '16-bit PCM' % (path, 8 * width))
    if channels != 1:
        raise IngestionError('%s: %d channels, expected mono'
                             % (path, channels))
    if rate != sample_rate:
        raise IngestionError('%s: sample rate %d Hz, expected %d Hz'
                             % (path, rate, sample_rate))
    if len(frames) % 2:
        raise IngestionError('%s: truncated sample data' % path)
    return np.frombuffer(frames, dtype='<i2').astype(np.float64) / 32768.0


def write_wav(path, samples, sample_rate=DEFAULT_KWS_SETTINGS['sample_rate']):
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767)
    pcm = pcm.astype('<i2')
    with wave.open(path, 'wb') as handle:
        handle.setnchannels(1)
        handle.setsampwidth(2)
        handle.setframerate(sample_rate)
        handle.writeframes(pcm.tobytes())


def fit_length(samples, length=DEFAULT_KWS_SETTINGS['clip_samples']):
    """
    Zero-pads short clips at the end and crops long ones around their centre.
    """
    samples = as_float64(samples)
    if len(samples) < length:
        return np.pad(samples, (0, length - len(samples)))
    start = (len(samples) - length) // 2
    return samples[start:start + length]


def load_wav(path, clip_samples=DEFAULT_KWS_SETTINGS['clip_samples'],
             sample_rate=DEFAULT_KWS_SETTINGS['sample_rate']):
    return fit_length(read_wav(path, sample_rate), clip_samples)


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels, n_fft, sample_rate, fmin, fmax):
    """
    (n_fft // 2 + 1) x n_mels matrix of triangular filters equally spaced on
    the mel scale between fmin and fmax, each peaking at 1.
    """
    if not 0 <= fmin < fmax <= sample_rate / 2.0:
        raise ConfigurationError('mel band %g-%g Hz is not inside 0-%g Hz'
                                 % (fmin, fmax, sample_rate / 2.0))
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax),
                                  n_mels + 2))
    bins = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    lower, centre, upper = edges[:-2], edges[1:-1], edges[2:]
    rising = (bins[:, np.newaxis] - lower) / (centre - lower)
    falling = (upper - bins[:, np.newaxis]) / (upper - centre)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    weights.flags.writeable = False
    return weights


def mfcc(samples, sample_rate=16000, clip_samples=16000, window_ms=25,
         shift_ms=10, n_fft=512, n_mels=40, n_mfcc=40, fmin=20.0, fmax=8000.0,
         log_floor=1e-10):
    """
    MFCC feature matrix of shape 1 x frames x n_mfcc.

    Frames are centred: the clip is reflect-padded by half a window on both
    sides, so one second at a 10 ms shift gives 101 frames. Each frame is
    Hann windowed, its magnitude spectrum is pooled by the mel bank, logged
    (floored at log_floor) and decorrelated by an orthonormal DCT-II.
    """
    x = as_float64(samples)
    if x.ndim != 1 or len(x) != clip_samples:
        raise DimensionError('mfcc expects %d samples, got shape %s'
                             % (clip_samples, x.shape))
    frame_length = sample_rate * window_ms // 1000
    hop_length = sample_rate * shift_ms // 1000
    if frame_length > n_fft:
        raise ConfigurationError('window of %d samples does not fit a %d-point '
                                 'transform' % (frame_length, n_fft))
    padded = np.pad(x, frame_length // 2, mode='reflect')
    frames = frame_signal(padded, frame_length, hop_length)
    windowed = frames * get_window('hann', frame_length)
    spectrum = np.abs(np.fft.rfft(windowed, n=n_fft))
    energies = np.dot(spectrum, mel_filterbank(n_mels, n_fft, sample_rate,
                                               float(fmin), float(fmax)))
    log_energies = np.log(np.maximum(energies, log_floor))
    coefficients = dct(log_energies, type=2, axis=1, norm='ortho')[:, :n_mfcc]
    return coefficients[np.newaxis]


def mfcc_options(settings):
    return dict((key, settings[key]) for key in MFCC_OPTIONS)


def assign_split(filename, validation_percentage=10, testing_percentage=10):
    """
    Deterministic split of a Speech Commands file from the SHA1 of its
    speaker part (the name up to "_nohash_"), so one speaker never lands in
    two splits.
    """
    base = os.path.basename(filename)
    hash_name = NOHASH.sub('', base)
    digest = hashlib.sha1(hash_name.encode('utf-8')).hexdigest()
    percentage = ((int(digest, 16) % (MAX_NUM_WAVS_PER_CLASS + 1)) *
                  (100.0 / MAX_NUM_WAVS_PER_CLASS))
    if percentage < validation_percentage:
        return VALIDATION
    if percentage < validation_percentage + testing_percentage:
        return TEST
    return TRAIN


def label_index(word, keywords=DEFAULT_KWS_SETTINGS['keywords']):
    keywords = list(keywords)
    if word in keywords:
        return 2 + keywords.index(word)
    return UNKNOWN_INDEX


def _word_files(root):
    if not os.path.isdir(root):
        raise ConfigurationError('dataset directory %s does not exist' % root)
    for word in sorted(os.listdir(root)):
        directory = os.path.join(root, word)
        if word.startswith('_') or not os.path.isdir(directory):
            continue
        for path in sorted(glob.glob(os.path.join(directory, '*.wav'))):
            yield word, path


def read_list_file(path):
    try:
        with open(path) as handle:
            return set(os.path.normpath(line.strip())
                       for line in handle if line.strip())
    except (IOError, OSError) as e:
        raise ConfigurationError('cannot read list file %s: %s' % (path, e))


def scan_corpus(root, settings=DEFAULT_KWS_SETTINGS,
                experiment=EXPERIMENT_HASHED):
    """
    Returns {split: [Utterance]} for the word files under `root`.

    Experiment 1 splits by speaker hash; experiment 2 takes validation and
    test files from the published list files and trains on everything else.
    """
    if experiment == EXPERIMENT_HASHED:
        def split_of(relative):
            return assign_split(relative, settings['validation_percentage'],
                                settings['testing_percentage'])
    elif experiment == EXPERIMENT_STANDARD:
        validation = read_list_file(os.path.join(root, VALIDATION_LIST))
        testing = read_list_file(os.path.join(root, TESTING_LIST))

        def split_of(relative):
            if relative in validation:
                return VALIDATION
            if relative in testing:
                return TEST
            return TRAIN
    else:
        raise ConfigurationError('unknown experiment %r (choose 1 or 2)'
                                 % (experiment,))

    splits = OrderedDict((split, []) for split in SPLITS)
    for word, path in _word_files(root):
        relative = os.path.normpath(os.path.relpath(path, root))
        split = split_of(relative)
        splits[split].append(Utterance(path, label_index(word,
                                                         settings['keywords']),
                                       split))
    return splits


def load_background(root, sample_rate=DEFAULT_KWS_SETTINGS['sample_rate']):
    """
    Returns {path: samples} for every WAV in the background-noise directory.
    """
    pattern = os.path.join(root, BACKGROUND_NOISE_DIR, '*.wav')
    return OrderedDict((path, read_wav(path, sample_rate))
                       for path in sorted(glob.glob(pattern)))


def balance_dataset(utterances, background, seed=0, split=TRAIN,
                    silence_percentage=10, unknown_percentage=10,
                    clip_samples=DEFAULT_KWS_SETTINGS['clip_samples']):
    """
    Keeps every keyword utterance, subsamples the unknown pool and adds
    silence crops so that silence and unknown each make up their percentage
    of the result.

    background -- {path: samples}; silence crops are drawn from it with a
                  uniform [0, 1] volume
    """
    keywords = [u for u in utterances if u.label > UNKNOWN_INDEX]
    unknowns = [u for u in utterances if u.label == UNKNOWN_INDEX]
    if not unknowns:
        raise ConfigurationError('%s split has no unknown-word utterances to '
                                 'draw from' % split)
    if not background:
        raise ConfigurationError('no background noise files for silence '
                                 'segments')
    share = 100.0 - silence_percentage - unknown_percentage
    if share <= 0:
        raise ConfigurationError('silence and unknown percentages leave no '
                                 'room for keywords')
    unknown_count = int(round(len(keywords) * unknown_percentage / share))
    silence_count = int(round(len(keywords) * silence_percentage / share))

    rng = random_stream(seed, 'balance', split)
    chosen = rng.choice(len(unknowns), size=min(unknown_count, len(unknowns)),
                        replace=False)
    selected = keywords + [unknowns[i] for i in sorted(chosen)]

    paths = list(background)
    for _ in range(silence_count):
        path = paths[rng.integers(len(paths))]
        room = max(1, len(background[path]) - clip_samples + 1)
        selected.append(Utterance(path, SILENCE_INDEX, split,
                                  int(rng.integers(room)),
                                  float(rng.uniform(0.0, 1.0))))
    return selected


def background_crop(samples, offset, clip_samples):
    return fit_length(samples[offset:offset + clip_samples], clip_samples)


def time_shift(samples, shift):
    """
    Delays `samples` by `shift` (advances when negative), zero-filling.
    """
    out = np.zeros_like(samples)
    if shift > 0:
        out[shift:] = samples[:-shift]
    elif shift < 0:
        out[:shift] = samples[-shift:]
    else:
        out[:] = samples
    return out


def augment(samples, seed, path='', epoch=0, background=None,
            time_shift_ms=100, background_frequency=0.8,
            background_volume=0.1, sample_rate=16000):
    """
    Random time shift in [-time_shift_ms, +time_shift_ms] followed, with
    probability background_frequency, by a background crop scaled by a
    uniform [0, background_volume] factor; clipped to [-1, 1].

    Randomness comes from the (seed, path, epoch) sub-stream only.
    """
    samples = as_float64(samples)
    rng = random_stream(seed, 'augment', path, epoch)
    limit = sample_rate * time_shift_ms // 1000
    shifted = time_shift(samples, int(rng.integers(-limit, limit,
                                                   endpoint=True)))
    if rng.random() >= background_frequency or not background:
        return np.clip(shifted, -1.0, 1.0)
    paths = list(background)
    noise = background[paths[rng.integers(len(paths))]]
    room = max(1, len(noise) - len(samples) + 1)
    crop = background_crop(noise, int(rng.integers(room)), len(samples))
    volume = rng.uniform(0.0, background_volume)
    return np.clip(shifted + volume * crop, -1.0, 1.0)


class ArrayDataset(object):
    """
    In-memory features.

    splits -- {split: (features N x 1 x 101 x 40, labels N)}
    """

    def __init__(self, splits):
        self.splits = OrderedDict()
        for split in SPLITS:
            features, labels = splits.get(split, (np.zeros((0,)), []))
            labels = np.asarray(labels, dtype=np.int64)
            if len(features) != len(labels):
                raise DimensionError('%s split has %d feature matrices but %d '
                                     'labels' % (split, len(features),
                                                 len(labels)))
            self.splits[split] = (np.asarray(features, dtype=np.float64),
                                  labels)

    def size(self, split):
        return len(self.splits[split][1])

    def examples(self, split, indices, epoch=None):
        features, labels = self.splits[split]
        return features[indices], labels[indices]


class CorpusDataset(object):
    """
    Utterances read from a Speech Commands directory. Features are computed
    on demand; training examples are augmented per epoch when an epoch is
    given, validation and test features are cached.
    """

    def __init__(self, utterances, background, settings=DEFAULT_KWS_SETTINGS,
                 seed=0, augmentation=True):
        self.utterances = OrderedDict((split, list(utterances.get(split, [])))
                                      for split in SPLITS)
        self.background = background
        self.settings = settings
        self.seed = seed
        self.augmentation = augmentation
        self.options = mfcc_options(settings)
        self._cache = {}

    @classmethod
    def from_directory(cls, root, settings=DEFAULT_KWS_SETTINGS, seed=0,
                       experiment=EXPERIMENT_HASHED, augmentation=True):
        splits = scan_corpus(root, settings, experiment)
        background = load_background(root, settings['sample_rate'])
        if experiment == EXPERIMENT_HASHED:
            for split in SPLITS:
                splits[split] = balance_dataset(
                    splits[split], background, seed, split,
                    settings['silence_percentage'],
                    settings['unknown_percentage'], settings['clip_samples'])
        dataset = cls(splits, background, settings, seed, augmentation)
        logger.info('%s: %s', root, ', '.join(
            '%s=%d' % item for item in dataset.split_sizes().items()))
        return dataset

    @property
    def feature_shape(self):
        hop = self.settings['sample_rate'] * self.settings['shift_ms'] // 1000
        return (1, self.settings['clip_samples'] // hop + 1,
                self.settings['n_mfcc'])

    def split_sizes(self):
        return OrderedDict((split, len(items))
                           for split, items in self.utterances.items())

    def size(self, split):
        return len(self.utterances[split])

    def samples(self, utterance):
        clip = self.settings['clip_samples']
        if utterance.offset is not None:
            noise = self.background[utterance.path]
            return utterance.volume * background_crop(noise, utterance.offset,
                                                      clip)
        return load_wav(utterance.path, clip, self.settings['sample_rate'])

    def features(self, split, index, epoch=None):
        utterance = self.utterances[split][index]
        if split == TRAIN and epoch is not None and self.augmentation:
            samples = augment(
                self.samples(utterance), self.seed,
                '%s:%s' % (utterance.path, utterance.offset), epoch,
                self.background, self.settings['time_shift_ms'],
                self.settings['background_frequency'],
                self.settings['background_volume'],
                self.settings['sample_rate'])
            return mfcc(samples, **self.options)
        key = (split, index)
        if key not in self._cache:
            self._cache[key] = mfcc(self.samples(utterance), **self.options)
        return self._cache[key]

    def examples(self, split, indices, epoch=None):
        features = np.stack([self.features(split, int(i), epoch)
                             for i in indices])
        labels = np.array([self.utterances[split][int(i)].label
                           for i in indices], dtype=np.int64)
        return features, labels

    def to_arrays(self, split):
        """
        (paths, labels, features) of a split without augmentation.
        """
        items = self.utterances[split]
        paths = [u.path if u.offset is None else '%s@%d' % (u.path, u.offset)
                 for u in items]
        if items:
            features = np.stack([self.features(split, i)
                                 for i in range(len(items))])
        else:
            features = np.zeros((0,) + self.feature_shape)
        labels = np.array([u.label for u in items], dtype=np.int64)
        return paths, labels, features
