"""
Writes a miniature Speech Commands tree: a few word directories, one
background-noise file and the two list files of the standard split.

Speaker ids are chosen so that the hash split puts exactly one speaker in
each of train, validation and test.
"""
import os

import numpy as np

from dsresnet_kws.audio_pipeline import (BACKGROUND_NOISE_DIR, TESTING_LIST,
                                         VALIDATION_LIST, write_wav)

SPEAKERS = {
    'train': '0a7c2a8d',
    'validation': 'spk015',
    'test': '1b4c9b89',
}
WORD_TONES = {'yes': 440.0, 'no': 880.0, 'bed': 1320.0}
TAKES = 4
SAMPLE_RATE = 16000


def tone(frequency, rng, length=SAMPLE_RATE):
    t = np.arange(length) / float(SAMPLE_RATE)
    envelope = np.hanning(length)
    phase = rng.uniform(0.0, 2 * np.pi)
    return (0.3 * envelope * np.sin(2 * np.pi * frequency * t + phase) +
            0.01 * rng.normal(size=length))


def relative_path(word, speaker, take):
    return os.path.join(word, '%s_nohash_%d.wav' % (speaker, take))


def build(root, seed=0):
    """
    Returns {split: [relative wav paths]} of the files written under `root`.
    """
    rng = np.random.default_rng(seed)
    written = dict((split, []) for split in SPEAKERS)
    for word, frequency in sorted(WORD_TONES.items()):
        os.makedirs(os.path.join(root, word))
        for split, speaker in sorted(SPEAKERS.items()):
            for take in range(TAKES):
                relative = relative_path(word, speaker, take)
                write_wav(os.path.join(root, relative), tone(frequency, rng))
                written[split].append(relative)

    os.makedirs(os.path.join(root, BACKGROUND_NOISE_DIR))
    write_wav(os.path.join(root, BACKGROUND_NOISE_DIR, 'white_noise.wav'),
              0.1 * rng.uniform(-1.0, 1.0, 2 * SAMPLE_RATE))

    for name, split in ((VALIDATION_LIST, 'validation'),
                        (TESTING_LIST, 'test')):
        with open(os.path.join(root, name), 'w') as handle:
            handle.write('\n'.join(written[split]) + '\n')
    return written
