"""
SGD training, evaluation and gradient checking.
"""
import logging
import math
from collections import OrderedDict, namedtuple
from dataclasses import dataclass, fields

import numpy as np
from scipy import stats

from dsresnet_kws import DEFAULT_KWS_SETTINGS
from . import autodiff, model_zoo, nn_ops
from .exceptions import ConfigurationError, DivergenceError, VerificationError
from .settings import random_stream

logger = logging.getLogger(__name__)

TRAIN = 'train'
VALIDATION = 'validation'
TEST = 'test'
SPLITS = (TRAIN, VALIDATION, TEST)

GRADCHECK_STEP = 1e-5
GRADCHECK_FLOOR = 1e-4
NORMAL_QUANTILES = {0.95: 1.96}


@dataclass
class TrainConfig:
    batch_size: int = DEFAULT_KWS_SETTINGS['batch_size']
    total_steps: int = DEFAULT_KWS_SETTINGS['total_steps']
    momentum: float = DEFAULT_KWS_SETTINGS['momentum']
    weight_decay: float = DEFAULT_KWS_SETTINGS['weight_decay']
    lr_initial: float = DEFAULT_KWS_SETTINGS['lr_initial']
    lr_decay: float = DEFAULT_KWS_SETTINGS['lr_decay']
    lr_decay_every: int = DEFAULT_KWS_SETTINGS['lr_decay_every']
    eval_every: int = DEFAULT_KWS_SETTINGS['eval_every']
    seed: int = DEFAULT_KWS_SETTINGS['seed']
    early_stop_accuracy: float = DEFAULT_KWS_SETTINGS['early_stop_accuracy']

    def __post_init__(self):
        for name in ('batch_size', 'total_steps', 'lr_decay_every',
                     'eval_every'):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError('%s must be positive, got %r'
                                         % (name, getattr(self, name)))
        for name in ('momentum', 'weight_decay', 'lr_initial', 'lr_decay'):
            if getattr(self, name) < 0:
                raise ConfigurationError('%s must not be negative, got %r'
                                         % (name, getattr(self, name)))

    @classmethod
    def from_settings(cls, settings, **overrides):
        values = dict((f.name, settings[f.name]) for f in fields(cls)
                      if f.name in settings)
        values.update(overrides)
        return cls(**values)


def lr_at(step, config=None):
    """
    Learning rate for the 0-based update `step`: lr_initial decayed by
    lr_decay once every lr_decay_every steps.
    """
    config = config or TrainConfig()
    if step < 0:
        raise ValueError('step must be non-negative, got %d' % step)
    return config.lr_initial * config.lr_decay ** (step // config.lr_decay_every)


def cross_entropy(posteriors, label):
    """
    -log p[label] for a posterior vector.
    """
    p = np.asarray(posteriors, dtype=np.float64)
    return float(-np.log(max(p[label], np.finfo(np.float64).tiny)))


def softmax_cross_entropy(logits, labels):
    """
    Mean cross-entropy computed straight from logits (N x K, or one vector).
    """
    log_probs = nn_ops.log_softmax(np.atleast_2d(logits))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    return float(-log_probs[np.arange(len(labels)), labels].mean())


def grad(params, features, labels, training=True):
    """
    Gradients of the mean cross-entropy w.r.t. every tensor of `params`,
    in parameter order and with matching shapes.
    """
    return autodiff.loss_and_gradients(params, features, labels, training)[1]


def sgd_step(params, velocity, gradients, lr, config):
    """
    v <- momentum * v - lr * (g + weight_decay * w); w <- w + v, in place.
    """
    for name, weights in params.tensors.items():
        v = velocity[name]
        v *= config.momentum
        v -= lr * (gradients[name] + config.weight_decay * weights)
        weights += v


class EvalResult(object):
    """
    confusion -- K x K counts, rows are true labels, columns predictions
    """

    def __init__(self, confusion):
        self.confusion = np.asarray(confusion, dtype=np.int64)

    @property
    def n_examples(self):
        return int(self.confusion.sum())

    @property
    def correct(self):
        return int(np.trace(self.confusion))

    @property
    def error_rate(self):
        return (self.n_examples - self.correct) / float(self.n_examples)

    @property
    def accuracy(self):
        return 1.0 - self.error_rate

    @property
    def per_class_accuracy(self):
        totals = self.confusion.sum(axis=1)
        with np.errstate(invalid='ignore', divide='ignore'):
            return np.where(totals > 0,
                            np.diag(self.confusion) / totals.astype(float),
                            np.nan)

    def __repr__(self):
        return '<EvalResult n=%d error=%.4f>' % (self.n_examples,
                                                self.error_rate)


def evaluate(params, dataset, split=VALIDATION, batch_size=500):
    """
    Argmax classification of every example in `split` of `dataset`.
    """
    size = dataset.size(split)
    if size == 0:
        raise ConfigurationError('cannot evaluate on the empty %s split' % split)
    classes = params.spec.num_classes
    confusion = np.zeros((classes, classes), dtype=np.int64)
    for start in range(0, size, batch_size):
        indices = np.arange(start, min(start + batch_size, size))
        features, labels = dataset.examples(split, indices)
        predicted = model_zoo.logits(params, features).argmax(axis=1)
        np.add.at(confusion, (np.asarray(labels), predicted), 1)
    return EvalResult(confusion)


def confidence_interval(error_rates, method='normal', confidence=0.95):
    """
    Returns (mean, half_width) over independent runs.

    method -- 'normal': z * sd / sqrt(n) (z = 1.96 at 95%); 't': Student-t
              quantile with n - 1 degrees of freedom. sd is the sample
              standard deviation.
    """
    rates = np.asarray(error_rates, dtype=np.float64)
    if rates.size < 2:
        raise ValueError('a confidence interval needs at least two runs')
    mean = float(rates.mean())
    scale = float(rates.std(ddof=1)) / math.sqrt(rates.size)
    tail = (1.0 + confidence) / 2.0
    if method == 'normal':
        quantile = NORMAL_QUANTILES.get(confidence) or stats.norm.ppf(tail)
    elif method == 't':
        quantile = stats.t.ppf(tail, rates.size - 1)
    else:
        raise ValueError('unknown confidence interval method %r' % method)
    return mean, float(quantile * scale)


LogRow = namedtuple('LogRow', ['step', 'lr', 'train_loss', 'val_error'])
TrainResult = namedtuple('TrainResult', ['params', 'log', 'last'])


def _batches(size, batch_size, rng):
    """
    Yields (epoch, indices) forever; each epoch is a fresh permutation.
    """
    epoch = 0
    while True:
        order = rng.permutation(size)
        for start in range(0, size, batch_size):
            yield epoch, np.sort(order[start:start + batch_size])
        epoch += 1


def train(spec, dataset, config=None, params=None, on_eval=None):
    """
    Trains `spec` on `dataset` with SGD and returns a TrainResult whose
    `params` is the checkpoint with the best validation accuracy (earliest
    on ties).

    params -- starting point; freshly built from config.seed when omitted
    on_eval -- callback(LogRow) after every evaluation
    """
    config = config or TrainConfig()
    size = dataset.size(TRAIN)
    if size == 0:
        raise ConfigurationError('training split is empty')
    if params is None:
        params = model_zoo.build(spec, config.seed)
    params = params.copy()
    velocity = OrderedDict((name, np.zeros_like(w))
                           for name, w in params.tensors.items())
    batches = _batches(size, config.batch_size,
                       random_stream(config.seed, 'batches'))
    best, best_accuracy = None, -1.0
    log = []
    losses = []

    logger.info('training %s for %d steps on %d examples (batch %d)',
                spec.name, config.total_steps, size, config.batch_size)
    for step in range(config.total_steps):
        epoch, indices = next(batches)
        features, labels = dataset.examples(TRAIN, indices, epoch=epoch)
        loss, gradients, buffer_updates, _ = autodiff.loss_and_gradients(
            params, features, labels, training=True)
        if not np.isfinite(loss):
            raise DivergenceError(step, loss)
        lr = lr_at(step, config)
        sgd_step(params, velocity, gradients, lr, config)
        params.buffers.update(buffer_updates)
        losses.append(loss)

        done = step + 1
        if done % config.eval_every and done != config.total_steps:
            continue
        result = evaluate(params, dataset, VALIDATION)
        row = LogRow(done, lr, float(np.mean(losses)), result.error_rate)
        losses = []
        log.append(row)
        logger.info('step %d: lr=%g train_loss=%.4f val_error=%.4f',
                    row.step, row.lr, row.train_loss, row.val_error)
        if on_eval is not None:
            on_eval(row)
        if result.accuracy > best_accuracy:
            best_accuracy = result.accuracy
            best = params.copy(writeable=False)
            best.step, best.val_error = done, result.error_rate
        if (config.early_stop_accuracy is not None and
                result.accuracy >= config.early_stop_accuracy):
            logger.info('validation accuracy %.4f reached at step %d, '
                        'stopping', result.accuracy, done)
            break

    params.freeze()
    return TrainResult(best, log, params)


GradCheckRow = namedtuple('GradCheckRow', ['name', 'max_rel_error',
                                           'checked', 'skipped'])


class _MaskRecordingOps(model_zoo.ArrayOps):
    def __init__(self, params, training=False):
        super(_MaskRecordingOps, self).__init__(params, training)
        self.masks = []

    def relu(self, x):
        self.masks.append(x > 0)
        return super(_MaskRecordingOps, self).relu(x)


def _loss_and_masks(params, x, labels, training):
    ops = _MaskRecordingOps(params, training)
    out = model_zoo.run_network(params.spec, ops, x)
    return softmax_cross_entropy(out, labels), ops.masks


def _same_masks(a, b):
    return len(a) == len(b) and all(np.array_equal(p, q) for p, q in zip(a, b))


def relative_error(analytic, numeric, floor=GRADCHECK_FLOOR):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(params, features, labels, samples_per_tensor=4, seed=0,
              h=GRADCHECK_STEP, training=True):
    """
    Compares `grad` against central finite differences on a random sample of
    coordinates of every parameter tensor.

    Coordinates whose +/- h perturbation flips any ReLU are skipped and
    replaced, since the loss is not differentiable across them.
    Returns a GradCheckRow per tensor.
    """
    x, _ = model_zoo._check_features(params.spec, features)
    analytic = grad(params, x, labels, training)
    _, base_masks = _loss_and_masks(params, x, labels, training)
    work = params.copy()
    rng = random_stream(seed, 'gradcheck')
    rows = []
    for name, tensor in work.tensors.items():
        flat = tensor.reshape(-1)
        wanted = min(samples_per_tensor, flat.size)
        worst, checked, skipped = 0.0, 0, 0
        for index in rng.permutation(flat.size):
            if checked == wanted:
                break
            original = flat[index]
            flat[index] = original + h
            plus, plus_masks = _loss_and_masks(work, x, labels, training)
            flat[index] = original - h
            minus, minus_masks = _loss_and_masks(work, x, labels, training)
            flat[index] = original
            if not (_same_masks(base_masks, plus_masks) and
                    _same_masks(base_masks, minus_masks)):
                skipped += 1
                continue
            numeric = (plus - minus) / (2.0 * h)
            worst = max(worst, relative_error(
                analytic[name].reshape(-1)[index], numeric))
            checked += 1
        logger.debug('gradcheck %s: max relative error %.3g over %d '
                     'coordinates (%d skipped)', name, worst, checked, skipped)
        rows.append(GradCheckRow(name, worst, checked, skipped))
    return rows


def assert_gradients(rows, tolerance):
    failed = [row for row in rows if not row.max_rel_error <= tolerance]
    if failed:
        raise VerificationError(
            'gradient check failed for %s' % ', '.join(
                '%s (%.3g)' % (row.name, row.max_rel_error) for row in failed),
            failed)
    return rows
