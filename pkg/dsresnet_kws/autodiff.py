"""
Reverse-mode differentiation of the DS-ResNet graph.

`Tape` exposes the same primitive methods as `model_zoo.ArrayOps`, so
`model_zoo.run_network` builds the graph unchanged; every call records the
forward value together with a closure returning the vector-Jacobian products
for its inputs. Calling `backward` on a scalar node walks the record in reverse.
"""
from collections import OrderedDict

import numpy as np

from . import nn_ops
from . import model_zoo
from .nn_ops import BATCH_NORM_EPSILON

BATCH_NORM_MOMENTUM = 0.9


class Node(object):
    __slots__ = ('value', 'parents', 'vjp', 'grad', 'name')

    def __init__(self, value, parents=(), vjp=None, name=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return '<Node %s %s>' % (self.name or 'op', self.value.shape)


def _unpad(grad, kernel_h, kernel_w, dilation_h, dilation_w, height, width):
    top, _ = nn_ops.same_padding(kernel_h, dilation_h)
    left, _ = nn_ops.same_padding(kernel_w, dilation_w)
    return grad[:, :, top:top + height, left:left + width]


class Tape(object):
    """
    Records one forward pass over `params`.

    training -- batch normalisation uses batch statistics and queues running
                average updates in `buffer_updates`
    """

    def __init__(self, params, training=True, momentum=BATCH_NORM_MOMENTUM):
        self.params = params
        self.training = training
        self.momentum = momentum
        self.nodes = []
        self.leaves = OrderedDict()
        self.buffer_updates = OrderedDict()

    def _record(self, value, parents, vjp):
        node = Node(value, tuple(parents), vjp)
        self.nodes.append(node)
        return node

    def constant(self, value):
        node = Node(np.asarray(value, dtype=np.float64))
        self.nodes.append(node)
        return node

    def param(self, name):
        if name not in self.leaves:
            node = Node(self.params.tensors[name], name=name)
            self.nodes.append(node)
            self.leaves[name] = node
        return self.leaves[name]

    def conv2d_standard(self, x, w, dilation_h, dilation_w):
        xv, wv = x.value, w.value
        n, channels, height, width = xv.shape
        _, _, kernel_h, kernel_w = wv.shape
        padded = nn_ops.pad_same(xv, kernel_h, kernel_w, dilation_h, dilation_w)
        out = nn_ops.conv2d_standard_batch(xv, wv, dilation_h, dilation_w)

        def vjp(g):
            grad_w = np.zeros_like(wv)
            grad_padded = np.zeros_like(padded)
            for i, j, rows, cols in nn_ops.kernel_taps(
                    kernel_h, kernel_w, dilation_h, dilation_w, height, width):
                grad_w[:, :, i, j] = np.tensordot(
                    g, padded[:, :, rows, cols], axes=([0, 2, 3], [0, 2, 3]))
                grad_padded[:, :, rows, cols] += np.tensordot(
                    g, wv[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            return (_unpad(grad_padded, kernel_h, kernel_w, dilation_h,
                           dilation_w, height, width), grad_w)

        return self._record(out, (x, w), vjp)

    def conv2d_depthwise(self, x, w, dilation_h, dilation_w):
        xv, wv = x.value, w.value
        _, _, height, width = xv.shape
        _, kernel_h, kernel_w = wv.shape
        padded = nn_ops.pad_same(xv, kernel_h, kernel_w, dilation_h, dilation_w)
        out = nn_ops.conv2d_depthwise_batch(xv, wv, dilation_h, dilation_w)

        def vjp(g):
            grad_w = np.zeros_like(wv)
            grad_padded = np.zeros_like(padded)
            for i, j, rows, cols in nn_ops.kernel_taps(
                    kernel_h, kernel_w, dilation_h, dilation_w, height, width):
                grad_w[:, i, j] = (g * padded[:, :, rows, cols]).sum(
                    axis=(0, 2, 3))
                grad_padded[:, :, rows, cols] += \
                    g * wv[np.newaxis, :, i, j, np.newaxis, np.newaxis]
            return (_unpad(grad_padded, kernel_h, kernel_w, dilation_h,
                           dilation_w, height, width), grad_w)

        return self._record(out, (x, w), vjp)

    def conv2d_pointwise(self, x, w):
        xv, wv = x.value, w.value
        out = nn_ops.conv2d_pointwise_batch(xv, wv)

        def vjp(g):
            grad_w = np.tensordot(g, xv, axes=([0, 2, 3], [0, 2, 3]))
            grad_x = np.tensordot(g, wv, axes=([1], [0])).transpose(0, 3, 1, 2)
            return grad_x, grad_w

        return self._record(out, (x, w), vjp)

    def avg_pool2d(self, x, window_h, window_w):
        xv = x.value
        out = nn_ops.avg_pool2d_batch(xv, window_h, window_w)
        out_h, out_w = out.shape[2:]

        def vjp(g):
            spread = np.repeat(np.repeat(g, window_h, axis=2), window_w, axis=3)
            grad = np.zeros_like(xv)
            grad[:, :, :out_h * window_h, :out_w * window_w] = \
                spread / float(window_h * window_w)
            return (grad,)

        return self._record(out, (x,), vjp)

    def global_avg_pool(self, x):
        xv = x.value
        height, width = xv.shape[2:]

        def vjp(g):
            grad = np.broadcast_to(g[:, :, np.newaxis, np.newaxis] /
                                   float(height * width), xv.shape)
            return (np.array(grad),)

        return self._record(xv.mean(axis=(2, 3)), (x,), vjp)

    def fully_connected(self, x, w):
        xv, wv = x.value, w.value

        def vjp(g):
            return np.dot(g, wv), np.dot(g.T, xv)

        return self._record(np.dot(xv, wv.T), (x, w), vjp)

    def relu(self, x):
        mask = x.value > 0

        def vjp(g):
            return (g * mask,)

        return self._record(np.where(mask, x.value, 0.0), (x,), vjp)

    def sigmoid(self, x):
        out = nn_ops.sigmoid(x.value)

        def vjp(g):
            return (g * out * (1.0 - out),)

        return self._record(out, (x,), vjp)

    def channel_scale(self, x, scales):
        xv, sv = x.value, scales.value
        expanded = sv[:, :, np.newaxis, np.newaxis]

        def vjp(g):
            return g * expanded, (g * xv).sum(axis=(2, 3))

        return self._record(xv * expanded, (x, scales), vjp)

    def add(self, a, b):
        def vjp(g):
            return g, g

        return self._record(a.value + b.value, (a, b), vjp)

    def batch_norm(self, x, prefix):
        gamma = self.param(prefix + '.gamma')
        beta = self.param(prefix + '.beta')
        xv, gv = x.value, gamma.value
        if self.training:
            mean = xv.mean(axis=(0, 2, 3))
            variance = xv.var(axis=(0, 2, 3))
            self._queue_running_stats(prefix, mean, variance)
        else:
            mean = self.params.buffers[prefix + '.mean']
            variance = self.params.buffers[prefix + '.var']
        inv_std = 1.0 / np.sqrt(variance + BATCH_NORM_EPSILON)
        expand = (np.newaxis, slice(None), np.newaxis, np.newaxis)
        normalised = (xv - mean[expand]) * inv_std[expand]
        out = normalised * gv[expand] + beta.value[expand]
        count = float(xv.shape[0] * xv.shape[2] * xv.shape[3])
        training = self.training

        def vjp(g):
            grad_beta = g.sum(axis=(0, 2, 3))
            grad_gamma = (g * normalised).sum(axis=(0, 2, 3))
            grad_norm = g * gv[expand]
            if training:
                grad_x = inv_std[expand] / count * (
                    count * grad_norm
                    - grad_norm.sum(axis=(0, 2, 3))[expand]
                    - normalised *
                    (grad_norm * normalised).sum(axis=(0, 2, 3))[expand])
            else:
                grad_x = grad_norm * inv_std[expand]
            return grad_x, grad_gamma, grad_beta

        return self._record(out, (x, gamma, beta), vjp)

    def _queue_running_stats(self, prefix, mean, variance):
        keep = self.momentum
        for suffix, batch in (('.mean', mean), ('.var', variance)):
            name = prefix + suffix
            running = self.params.buffers[name]
            self.buffer_updates[name] = keep * running + (1.0 - keep) * batch

    def softmax_cross_entropy(self, logits, labels):
        """
        Mean cross-entropy of `logits` (N x K node) against integer labels.
        """
        labels = np.asarray(labels, dtype=np.int64)
        log_probs = nn_ops.log_softmax(logits.value)
        rows = np.arange(len(labels))
        loss = -log_probs[rows, labels].mean()

        def vjp(g):
            grad = np.exp(log_probs)
            grad[rows, labels] -= 1.0
            return (grad * (g / float(len(labels))),)

        return self._record(np.asarray(loss), (logits,), vjp)

    def backward(self, output):
        """
        Accumulates d(output)/d(node) into `node.grad` for every recorded node.
        """
        for node in self.nodes:
            node.grad = None
        output.grad = np.ones_like(output.value)
        for node in reversed(self.nodes):
            if node.grad is None or node.vjp is None:
                continue
            for parent, grad in zip(node.parents, node.vjp(node.grad)):
                if grad is None:
                    continue
                parent.grad = grad if parent.grad is None else parent.grad + grad

    def gradients(self):
        """
        Parameter gradients in parameter order; unused parameters get zeros.
        """
        grads = OrderedDict()
        for name, value in self.params.tensors.items():
            node = self.leaves.get(name)
            if node is None or node.grad is None:
                grads[name] = np.zeros_like(value)
            else:
                grads[name] = node.grad
        return grads


def loss_and_gradients(params, features, labels, training=True):
    """
    One forward/backward pass.

    Returns (loss, gradients, buffer_updates, logits) where loss is the mean
    cross-entropy over the batch and gradients is keyed like params.tensors.
    """
    x, _ = model_zoo._check_features(params.spec, features)
    if len(labels) != x.shape[0]:
        raise ValueError('%d labels for a batch of %d' % (len(labels),
                                                           x.shape[0]))
    tape = Tape(params, training=training)
    out = model_zoo.run_network(params.spec, tape, tape.constant(x))
    loss = tape.softmax_cross_entropy(out, labels)
    tape.backward(loss)
    return float(loss.value), tape.gradients(), tape.buffer_updates, out.value
