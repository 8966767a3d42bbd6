"""
Command line entry point: analyze, features, train, eval, infer, gradcheck.

Every command takes --seed, --config, --out and --verbose. Exit codes: 0
success, 1 verification or training failure, 2 usage, I/O or input errors.
"""
import csv
import logging
import os
import sys

import argh
import numpy as np

from dsresnet_kws import CLASS_LABELS, VERSION
from . import audio_pipeline, cost_analyzer, model_zoo, serialization, training
from .exceptions import DivergenceError, KWSError, VerificationError
from .settings import configure_logging, load_settings, random_stream
from .specfile import load_architecture, write_spec

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

CACHE_SUFFIX = '.dsfc'
CHECKPOINT_NAME = 'best.dsrn'
LOG_NAME = 'train_log.csv'

MODEL_HELP = 'preset name (%s) or architecture file' % ', '.join(
    model_zoo.PRESETS)
DATA_HELP = 'Speech Commands directory or directory of feature caches'
EXPERIMENT_HELP = ('1: speaker-hashed split with silence and unknown; '
                   '2: validation/testing list files')


def common_flags(out_help='also write the output to this file',
                 out_required=False):
    """
    Declares the flags shared by every command.
    """
    def decorate(func):
        for declare in (
                argh.arg('--seed', type=int,
                         help='master random seed (default from settings)'),
                argh.arg('--config',
                         help='YAML or key=value settings file'),
                argh.arg('--verbose', help='log debug messages'),
                argh.arg('--out', required=out_required, help=out_help)):
            func = declare(func)
        return func
    return decorate


def _settings(config, verbose, **overrides):
    settings = load_settings(config, overrides)
    configure_logging(settings, verbose)
    return settings


def _write(out, text):
    with open(out, 'w') as handle:
        handle.write(text)


def _tee(out, lines):
    """
    Passes `lines` through and writes them to `out` once they are exhausted
    or fail.
    """
    written = []
    try:
        for line in lines:
            written.append(line)
            yield line
    finally:
        if out:
            _write(out, ''.join(line + '\n' for line in written))


def _cache_paths(data):
    return dict((split, os.path.join(data, split + CACHE_SUFFIX))
                for split in training.SPLITS)


def load_dataset(data, settings, experiment=audio_pipeline.EXPERIMENT_HASHED):
    """
    A directory holding `<split>.dsfc` caches of `experiment`, or a Speech
    Commands corpus.
    """
    caches = _cache_paths(data)
    if all(os.path.exists(path) for path in caches.values()):
        logger.info('using feature caches in %s', data)
        splits = {}
        for split, path in caches.items():
            _, labels, features = serialization.load_features(path, experiment)
            splits[split] = (features, labels)
        return audio_pipeline.ArrayDataset(splits)
    return audio_pipeline.CorpusDataset.from_directory(
        data, settings, settings['seed'], experiment)


def _split_sizes(dataset):
    return ', '.join('%s=%d' % (split, dataset.size(split))
                     for split in training.SPLITS)


@common_flags(out_help='write the table (or CSV) to this file')
@argh.arg('--model', help=MODEL_HELP)
@argh.arg('--golden', type=int, choices=[1, 2, 3, 5],
          help='compare with a published table (5: SE ablation totals)')
@argh.arg('--csv', help='print CSV instead of an aligned table')
@argh.arg('--save-spec', help='write the architecture as a text file')
def analyze(*, model='DS-ResNet18', golden=None, csv=False, save_spec=None,
            seed=None, out=None, config=None, verbose=False):
    """
    Print per-layer parameter and multiply counts.
    """
    _settings(config, verbose, seed=seed)
    spec = load_architecture(model)
    report = cost_analyzer.analyze(spec)
    text = report.as_csv() if csv else report.as_table()
    if out:
        _write(out, text if text.endswith('\n') else text + '\n')
    if save_spec:
        write_spec(spec, save_spec)
    yield text.rstrip('\n')
    if golden is None:
        return
    checks = cost_analyzer.verify_against_paper(report, golden)
    for check in checks:
        yield '%s %s %s: expected %s, got %s' % (
            'PASS' if check.passed else 'FAIL', check.row, check.field,
            check.expected, check.actual)
    failed = cost_analyzer.failures(checks)
    if failed:
        raise VerificationError('%d of %d checks against table %d failed'
                                % (len(failed), len(checks), golden), failed)
    yield 'table %d: all %d checks passed' % (golden, len(checks))


@common_flags(out_help='directory for <split>.dsfc files', out_required=True)
@argh.arg('--data', required=True, help='Speech Commands directory')
@argh.arg('--experiment', type=int, choices=[1, 2], help=EXPERIMENT_HELP)
def features(*, data=None, experiment=1, seed=None, out=None, config=None,
             verbose=False):
    """
    Extract un-augmented MFCC features of every split into feature caches.
    """
    settings = _settings(config, verbose, seed=seed)
    dataset = audio_pipeline.CorpusDataset.from_directory(
        data, settings, settings['seed'], experiment, augmentation=False)
    if not os.path.isdir(out):
        os.makedirs(out)
    for split, path in sorted(_cache_paths(out).items()):
        paths, labels, values = dataset.to_arrays(split)
        serialization.save_features(path, zip(paths, labels, values),
                                    experiment)
        yield '%s: %d records -> %s' % (split, len(labels), path)


@common_flags(out_help='directory for the checkpoint and training log',
              out_required=True)
@argh.arg('--data', required=True, help=DATA_HELP)
@argh.arg('--model', help=MODEL_HELP)
@argh.arg('--experiment', type=int, choices=[1, 2], help=EXPERIMENT_HELP)
@argh.arg('--steps', type=int, help='number of SGD updates')
@argh.arg('--batch-size', type=int, help='examples per update')
@argh.arg('--lr', type=float, help='initial learning rate')
@argh.arg('--lr-decay-every', type=int,
          help='steps between tenfold learning rate cuts')
@argh.arg('--eval-every', type=int,
          help='steps between validation evaluations')
@argh.arg('--momentum', type=float, help='SGD momentum')
@argh.arg('--weight-decay', type=float, help='L2 penalty coefficient')
@argh.arg('--early-stop-accuracy', type=float,
          help='stop once validation accuracy reaches this value')
@argh.arg('--normalization', help='insert batch normalization after each '
                                  'pointwise convolution')
def train(*, data=None, model='DS-ResNet18', experiment=1,
          steps=None, batch_size=None, lr=None, lr_decay_every=None,
          eval_every=None, momentum=None, weight_decay=None,
          early_stop_accuracy=None, normalization=False, seed=None, out=None,
          config=None, verbose=False):
    """
    Train a model; writes the best checkpoint and a CSV log to --out.
    """
    settings = _settings(
        config, verbose, seed=seed, total_steps=steps, batch_size=batch_size,
        lr_initial=lr, lr_decay_every=lr_decay_every, eval_every=eval_every,
        momentum=momentum, weight_decay=weight_decay,
        early_stop_accuracy=early_stop_accuracy,
        normalization=normalization or None)
    spec = load_architecture(model)
    if settings['normalization']:
        spec = spec.with_normalization()
    dataset = load_dataset(data, settings, experiment)
    train_config = training.TrainConfig.from_settings(settings)
    if not os.path.isdir(out):
        os.makedirs(out)

    log_path = os.path.join(out, LOG_NAME)
    with open(log_path, 'w', newline='') as handle:
        handle.write('# %s, %s\n' % (spec.name, _split_sizes(dataset)))
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(training.LogRow._fields)

        def on_eval(row):
            writer.writerow([row.step, repr(row.lr), '%.6f' % row.train_loss,
                             '%.6f' % row.val_error])
            handle.flush()

        yield 'training %s: %s' % (spec.name, _split_sizes(dataset))
        result = training.train(spec, dataset, train_config, on_eval=on_eval)

    checkpoint = os.path.join(out, CHECKPOINT_NAME)
    serialization.save_model(result.params, checkpoint)
    yield 'best checkpoint: step %d, validation error %.4f -> %s' % (
        result.params.step, result.params.val_error, checkpoint)
    if dataset.size(training.TEST):
        test = training.evaluate(result.params, dataset, training.TEST)
        yield 'test error: %.4f (%d examples)' % (test.error_rate,
                                                   test.n_examples)


def _evaluation_lines(models, dataset, split, method):
    rates = []
    for path in models:
        params = serialization.load_model(path)
        result = training.evaluate(params, dataset, split)
        rates.append(100.0 * result.error_rate)
        yield '%s: %s error %.2f%% (%d examples)' % (
            path, split, rates[-1], result.n_examples)
        for label, accuracy in zip(CLASS_LABELS, result.per_class_accuracy):
            if not np.isnan(accuracy):
                yield '  %-10s %.4f' % (label, accuracy)
    if len(rates) > 1:
        mean, half_width = training.confidence_interval(rates, method)
        yield 'error rate %.2f%% +- %.2f%% (95%% CI, %s, %d runs)' % (
            mean, half_width, method, len(rates))


@argh.named('eval')
@common_flags()
@argh.arg('models', nargs='+', help='checkpoint files (several: one per run)')
@argh.arg('--data', required=True, help=DATA_HELP)
@argh.arg('--split', choices=training.SPLITS, help='split to evaluate')
@argh.arg('--experiment', type=int, choices=[1, 2], help=EXPERIMENT_HELP)
@argh.arg('--method', choices=['normal', 't'],
          help='confidence interval over several checkpoints')
def evaluate(*models, data=None, split=training.TEST, experiment=1,
             method='normal', seed=None, out=None, config=None,
             verbose=False):
    """
    Error rate and per-class accuracy of one or more checkpoints.
    """
    settings = _settings(config, verbose, seed=seed)
    dataset = load_dataset(data, settings, experiment)
    yield from _tee(out, _evaluation_lines(models, dataset, split, method))


def _posterior_lines(posteriors):
    order = np.argsort(-posteriors, kind='stable')
    yield 'top: %s' % CLASS_LABELS[order[0]]
    for index in order:
        yield '%-10s %.6f' % (CLASS_LABELS[index], posteriors[index])


@common_flags()
@argh.arg('--model', required=True, help='checkpoint file')
@argh.arg('--wav', required=True, help='16 kHz mono 16-bit WAV file')
def infer(*, model=None, wav=None, seed=None, out=None, config=None,
          verbose=False):
    """
    Rank the class posteriors of one WAV file.
    """
    settings = _settings(config, verbose, seed=seed)
    params = serialization.load_model(model)
    samples = audio_pipeline.load_wav(wav, settings['clip_samples'],
                                      settings['sample_rate'])
    posteriors = model_zoo.forward(params, audio_pipeline.mfcc(
        samples, **audio_pipeline.mfcc_options(settings)))
    yield from _tee(out, _posterior_lines(posteriors))


def _gradcheck_lines(rows, tolerance):
    for row in rows:
        yield '%s %-28s max rel error %.3e (%d checked, %d skipped)' % (
            'PASS' if row.max_rel_error <= tolerance else 'FAIL', row.name,
            row.max_rel_error, row.checked, row.skipped)
    training.assert_gradients(rows, tolerance)
    yield 'all %d tensors within %g' % (len(rows), tolerance)


@common_flags()
@argh.arg('--model', help=MODEL_HELP)
@argh.arg('--tolerance', type=float, help='largest relative error accepted')
@argh.arg('--samples', type=int, help='coordinates checked per tensor')
@argh.arg('--batch', type=int, help='random examples in the check batch')
@argh.arg('--normalization', help='check the batch-normalized variant')
def gradcheck(*, model='DS-ResNet10', tolerance=1e-4, samples=4, batch=2,
              normalization=False, seed=None, out=None, config=None,
              verbose=False):
    """
    Compare analytic gradients with central finite differences.
    """
    settings = _settings(config, verbose, seed=seed)
    spec = load_architecture(model)
    if normalization:
        spec = spec.with_normalization()
    params = model_zoo.build(spec, settings['seed'])
    rng = random_stream(settings['seed'], 'gradcheck-data')
    x = rng.normal(size=(batch,) + spec.input_shape)
    labels = rng.integers(spec.num_classes, size=batch)
    rows = training.gradcheck(params, x, labels, samples, settings['seed'])
    yield from _tee(out, _gradcheck_lines(rows, tolerance))


COMMANDS = [analyze, features, train, evaluate, infer, gradcheck]


def build_parser():
    parser = argh.ArghParser(prog='dsresnet-kws',
                             description='DS-ResNet keyword spotting')
    parser.add_argument('--version', action='version',
                        version='%(prog)s ' + VERSION)
    parser.add_commands(COMMANDS)
    return parser


def main(argv=None, output=None):
    """
    Runs one command and returns its exit code; argparse usage errors exit
    with 2 directly.
    """
    parser = build_parser()
    try:
        parser.dispatch(argv, output_file=output or sys.stdout)
    except (VerificationError, DivergenceError) as e:
        logger.error('%s', e)
        sys.stderr.write('error: %s\n' % e)
        return EXIT_FAILURE
    except (KWSError, IOError, OSError) as e:
        logger.error('%s', e)
        sys.stderr.write('error: %s\n' % e)
        return EXIT_USAGE
    return EXIT_OK
