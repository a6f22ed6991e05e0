"""Central finite-difference checks for every layer and loss term (float64)."""

import numpy as np
import pytest

from mmexperts import objectives as O
from mmexperts import tensor as T
from mmexperts.gradcheck import grad_check
from mmexperts.tensor import Tensor

TOL = 1e-4
RNG = np.random.default_rng(7)


def away_from_zero(a, margin=0.05):
    """Nudge entries off the ReLU / max-pool kinks."""
    a = np.array(a, dtype=np.float64)
    a[np.abs(a) < margin] = margin * np.sign(a[np.abs(a) < margin] + 1e-12)
    return a


def _weights(shape, seed):
    return Tensor(np.random.default_rng(seed).uniform(-1, 1, size=shape))


def _reduce(y, seed=11):
    # random projection so that no output is degenerate
    return T.tsum(T.mul(y, _weights(y.shape, seed)))


def _distinct(shape, seed):
    """Inputs whose window maxima are unique (no pooling ties)."""
    n = int(np.prod(shape))
    vals = np.random.default_rng(seed).permutation(n) / n * 2 - 1
    return away_from_zero(vals.reshape(shape) + 0.013)


LAYER_CASES = {
    "dense": (lambda t: _reduce(T.dense(t[0], t[1], t[2])),
              [RNG.uniform(-1, 1, (3, 5)), RNG.uniform(-1, 1, (4, 5)), RNG.uniform(-1, 1, 4)]),
    "conv2d": (lambda t: _reduce(T.conv2d(t[0], t[1], t[2], (1, 2), (1, 1))),
               [RNG.uniform(-1, 1, (2, 3, 6, 7)), RNG.uniform(-1, 1, (4, 3, 3, 2)), RNG.uniform(-1, 1, 4)]),
    "conv2d_relu": (lambda t: _reduce(T.relu(T.conv2d(t[0], t[1], stride=(1, 1), pad=(1, 1)))),
                    [RNG.uniform(-1, 1, (1, 2, 5, 5)), RNG.uniform(-1, 1, (3, 2, 3, 3))]),
    "maxpool": (lambda t: _reduce(T.maxpool2d(t[0], (2, 2), (2, 2))), [_distinct((2, 3, 4, 6), 1)]),
    "maxpool_overlap_pad": (lambda t: _reduce(T.maxpool2d(t[0], (3, 3), (2, 2), (1, 1))),
                            [_distinct((1, 2, 5, 7), 2)]),
    "relu": (lambda t: _reduce(T.relu(t[0])), [away_from_zero(RNG.uniform(-1, 1, (4, 6)))]),
    "tanh": (lambda t: _reduce(T.tanh(t[0])), [RNG.uniform(-1, 1, (4, 6))]),
    "batchnorm_train": (
        lambda t: _reduce(T.tanh(T.batchnorm(t[0], t[1], t[2], np.zeros(3), np.ones(3), True))),
        [RNG.uniform(-1, 1, (6, 3)), RNG.uniform(0.5, 1.5, 3), RNG.uniform(-1, 1, 3)]),
    "batchnorm_eval": (
        lambda t: _reduce(T.batchnorm(t[0], t[1], t[2], np.full(3, 0.2), np.full(3, 1.5), False)),
        [RNG.uniform(-1, 1, (4, 3)), RNG.uniform(0.5, 1.5, 3), RNG.uniform(-1, 1, 3)]),
    "softmax": (lambda t: _reduce(T.softmax(t[0], axis=1)), [RNG.uniform(-1, 1, (3, 5))]),
    "log_softmax": (lambda t: _reduce(T.log_softmax(t[0], axis=1)), [RNG.uniform(-1, 1, (3, 5))]),
    "concat": (lambda t: _reduce(T.concat([t[0], t[1]], axis=1)),
               [RNG.uniform(-1, 1, (2, 3)), RNG.uniform(-1, 1, (2, 1))]),
    "crop_cols": (lambda t: _reduce(T.crop_cols(t[0], np.array([0, 3]), 4)), [RNG.uniform(-1, 1, (2, 2, 3, 9))]),
    "scatter_rows": (lambda t: _reduce(T.scatter_rows([t[0], t[1]], [[0, 2], [1]], 3)),
                     [RNG.uniform(-1, 1, (2, 4)), RNG.uniform(-1, 1, (1, 4))]),
    "xlogx": (lambda t: _reduce(T.xlogx(t[0])), [RNG.uniform(0.1, 1, (3, 4))]),
    "log": (lambda t: _reduce(T.log(t[0])), [RNG.uniform(0.5, 2, (3, 4))]),
    "mean_sum_reshape": (lambda t: T.tmean(T.reshape(T.square(t[0]), (6, 2)), axis=None),
                         [RNG.uniform(-1, 1, (3, 4))]),
}


@pytest.mark.parametrize("name", sorted(LAYER_CASES))
def test_layer_gradients(name):
    fn, inputs = LAYER_CASES[name]
    rep = grad_check(fn, inputs)
    assert rep.ok(TOL), (name, rep)


def test_dense_gradient_tight():
    fn, inputs = LAYER_CASES["dense"]
    assert grad_check(fn, inputs).max_rel_error < 1e-6


def test_softmax_cross_entropy_gradient_tight():
    target = O.onehot_gate_label(RNG.uniform(size=(4, 5)))
    rep = grad_check(lambda t: O.student_term(t[0], target, "cross_entropy"), [RNG.normal(size=(4, 5))])
    assert rep.max_rel_error < 1e-6


def _gate(t):
    return T.softmax(t[0], axis=1)


LOSS_CASES = {
    "prediction": (lambda t: O.prediction_loss(np.array([0.2, -0.5, 0.9]), T.tanh(t[0])),
                   [RNG.uniform(-1, 1, 3)]),
    "sparsity": (lambda t: O.sparsity_loss(_gate(t)), [RNG.normal(size=(4, 5))]),
    "nentropy": (lambda t: O.nentropy_loss(_gate(t)), [RNG.normal(size=(4, 4))]),
    "combined": (lambda t: O.combined_loss(np.array([0.1, -0.3]), T.tanh(t[1]), _gate(t),
                                           O.LossWeights(0.002, 0.0016)),
                 [RNG.normal(size=(2, 5)), RNG.uniform(-1, 1, 2)]),
    "kd_term": (lambda t: O.kd_term(t[0], RNG_TEACHER, 2.0), [RNG.normal(size=(3, 5))]),
    "student_mse": (lambda t: O.student_term(t[0], np.array([0.3, -0.6, 0.0]), "mse"), [RNG.normal(size=(3, 5))]),
    "student_ce": (lambda t: O.student_term(t[0], np.eye(4)[[1, 3, 0]], "cross_entropy"),
                   [RNG.normal(size=(3, 4))]),
    "distill_lidar": (lambda t: O.distill_loss(t[0], RNG_TEACHER, O.LIDAR_GATE_DISTILL,
                                               O.scalar_gate_label(O.softmax_np(RNG_TEACHER))),
                      [RNG.normal(size=(3, 5))]),
    "distill_main": (lambda t: O.distill_loss(t[0], RNG_TEACHER[:, :4], O.MAIN_GATE_DISTILL,
                                              O.onehot_gate_label(RNG_TEACHER[:, :4])),
                     [RNG.normal(size=(3, 4))]),
}
RNG_TEACHER = np.random.default_rng(3).normal(size=(3, 5))


@pytest.mark.parametrize("name", sorted(LOSS_CASES))
def test_loss_gradients(name):
    fn, inputs = LOSS_CASES[name]
    rep = grad_check(fn, inputs)
    assert rep.ok(TOL), (name, rep)


def test_grad_check_detects_wrong_gradient():
    def bad_square(x):
        return T._result(x.data ** 2, (x,), lambda g: (g * x.data,))  # missing factor 2

    rep = grad_check(lambda t: T.tsum(bad_square(t[0])), [np.array([0.5, -1.0])])
    assert not rep.ok(TOL)
