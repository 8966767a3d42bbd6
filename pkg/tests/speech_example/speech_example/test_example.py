import csv
import os
import shutil
import tempfile
from io import StringIO
from unittest import TestCase

from dsresnet_kws import SILENCE_INDEX, UNKNOWN_INDEX, cli
from dsresnet_kws.audio_pipeline import (EXPERIMENT_STANDARD, CorpusDataset,
                                         scan_corpus)
from dsresnet_kws.serialization import load_features, load_model
from dsresnet_kws.settings import load_settings

from . import corpus


def run(*argv):
    output = StringIO()
    code = cli.main([str(arg) for arg in argv], output=output)
    return code, output.getvalue()


class Test(TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.mkdtemp()
        cls.data = os.path.join(cls.tmp, 'speech_commands')
        cls.cache = os.path.join(cls.tmp, 'features')
        cls.written = corpus.build(cls.data)
        cls.features_code, cls.features_output = run(
            'features', '--data', cls.data, '--out', cls.cache)

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp)

    def train(self, data, out, seed=3):
        return run('train', '--data', data, '--out', out, '--model',
                   'DS-ResNet10', '--steps', 4, '--batch-size', 5,
                   '--eval-every', 2, '--seed', seed)

    def test_feature_caches(self):
        self.assertEqual(self.features_code, 0)
        self.assertIn('train: 10 records', self.features_output)
        for split in ('train', 'validation', 'test'):
            paths, labels, features = load_features(
                os.path.join(self.cache, split + '.dsfc'))
            self.assertEqual(features.shape, (10, 1, 101, 40))
            self.assertEqual(list(labels).count(SILENCE_INDEX), 1)
            self.assertEqual(list(labels).count(UNKNOWN_INDEX), 1)
            silence = [p for p, l in zip(paths, labels) if l == SILENCE_INDEX]
            self.assertIn('@', silence[0])

    def test_train_from_corpus(self):
        out = os.path.join(self.tmp, 'corpus_run')
        code, output = self.train(self.data, out)
        self.assertEqual(code, 0)
        self.assertIn('test error', output)

        with open(os.path.join(out, cli.LOG_NAME)) as handle:
            comment = handle.readline()
            rows = list(csv.reader(handle))
        self.assertEqual(comment.strip(), '# DS-ResNet10, train=10, '
                                          'validation=10, test=10')
        self.assertEqual(rows[0], ['step', 'lr', 'train_loss', 'val_error'])
        self.assertEqual([row[0] for row in rows[1:]], ['2', '4'])

        params = load_model(os.path.join(out, cli.CHECKPOINT_NAME))
        self.assertIn(params.step, (2, 4))
        self.assertEqual(params.spec.name, 'DS-ResNet10')

    def test_training_from_caches_is_reproducible(self):
        first = os.path.join(self.tmp, 'cached_a')
        second = os.path.join(self.tmp, 'cached_b')
        self.assertEqual(self.train(self.cache, first)[0], 0)
        self.assertEqual(self.train(self.cache, second)[0], 0)
        with open(os.path.join(first, cli.CHECKPOINT_NAME), 'rb') as a:
            with open(os.path.join(second, cli.CHECKPOINT_NAME), 'rb') as b:
                self.assertEqual(a.read(), b.read())

    def test_eval_several_runs(self):
        checkpoints = []
        for seed in (3, 4):
            out = os.path.join(self.tmp, 'seed%d' % seed)
            self.assertEqual(self.train(self.cache, out, seed)[0], 0)
            checkpoints.append(os.path.join(out, cli.CHECKPOINT_NAME))
        code, output = run('eval', checkpoints[0], checkpoints[1], '--data',
                           self.cache)
        self.assertEqual(code, 0)
        self.assertIn('95% CI, normal, 2 runs', output)
        self.assertIn('_silence_', output)

    def test_infer(self):
        out = os.path.join(self.tmp, 'infer_run')
        self.assertEqual(self.train(self.cache, out)[0], 0)
        wav = os.path.join(self.data, self.written['test'][0])
        code, output = run('infer', '--model',
                           os.path.join(out, cli.CHECKPOINT_NAME), '--wav', wav)
        self.assertEqual(code, 0)
        lines = output.splitlines()
        self.assertTrue(lines[0].startswith('top: '))
        self.assertEqual(len(lines), 13)

    def test_standard_split_from_list_files(self):
        splits = scan_corpus(self.data, experiment=EXPERIMENT_STANDARD)
        self.assertEqual(
            sorted(os.path.relpath(u.path, self.data)
                   for u in splits['validation']),
            sorted(self.written['validation']))
        self.assertEqual(len(splits['test']), 12)
        self.assertEqual(len(splits['train']), 12)

        dataset = CorpusDataset.from_directory(
            self.data, load_settings(), experiment=EXPERIMENT_STANDARD)
        labels = [u.label for u in dataset.utterances['train']]
        self.assertNotIn(SILENCE_INDEX, labels)
        self.assertEqual(labels.count(UNKNOWN_INDEX), 4)

    def test_missing_corpus(self):
        code, _ = run('features', '--data', os.path.join(self.tmp, 'nothing'),
                      '--out', os.path.join(self.tmp, 'nothing_out'))
        self.assertEqual(code, 2)
