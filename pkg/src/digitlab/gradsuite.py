"""Finite-difference gradient suite over every differentiable op.

Each case draws several random shapes and keeps inputs away from kinks
(ReLU at 0, max-pool ties, clamp boundaries) so central differences with
``h = 1e-5`` are trustworthy in float64.
"""

import time
from dataclasses import dataclass

import numpy as np

from .layers import (
    batchnorm2d,
    binary_cross_entropy,
    categorical_cross_entropy,
    conv2d,
    dense,
    dropout,
    leaky_relu,
    maxpool2d,
    relu,
    sigmoid,
    sigmoid_binary_cross_entropy,
    softmax,
    softmax_cross_entropy,
    tanh,
    upsample2x,
)
from .tensor import Rng, grad_check

TOLERANCE = 1e-4
SHAPES_PER_CASE = 5


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(-1, 1, shape, dtype=np.float64)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x) * 1.5


def _distinct(rng, shape):
    # a shuffled ramp: every pooling window has a unique max with a gap of >= 0.05
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) * 0.05 - n * 0.025).astype(np.float64)


def _one_hot(rng, n, k):
    t = np.zeros((n, k))
    t[np.arange(n), rng.integers(0, k, n)] = 1
    return t


def _conv(stride, padding):
    def build(rng):
        n, c, o = (int(v) for v in rng.integers(1, 4, 3))
        k = int(rng.integers(1, 4))
        h, w = (int(v) for v in rng.integers(k, 7, 2))
        x = rng.normal((n, c, h, w), np.float64)
        wt = rng.normal((o, c, k, k), np.float64) * 0.5
        b = rng.normal((o,), np.float64)
        return (lambda x, w, b: conv2d(x, w, b, stride, padding)), [x, wt, b]
    return build


def _maxpool(rng):
    n, c = (int(v) for v in rng.integers(1, 3, 2))
    h, w = (int(v) for v in rng.integers(1, 6, 2))
    return (lambda x: maxpool2d(x, 2, 2, ceil_mode=True)), [_distinct(rng, (n, c, h, w))]


def _batchnorm(rng):
    n = int(rng.integers(2, 4))
    c, h, w = (int(v) for v in rng.integers(1, 4, 3))
    x = rng.normal((n, c, h, w), np.float64)
    gamma = rng.uniform(0.5, 1.5, (c,), np.float64)
    beta = rng.normal((c,), np.float64)

    def fn(x, g, b):
        return batchnorm2d(x, g, b, np.zeros(c), np.ones(c), training=True)
    return fn, [x, gamma, beta]


def _dense(rng):
    n, i, o = (int(v) for v in rng.integers(1, 7, 3))
    return dense, [rng.normal((n, i), np.float64), rng.normal((i, o), np.float64), rng.normal((o,), np.float64)]


def _upsample(rng):
    shape = tuple(int(v) for v in rng.integers(1, 4, 4))
    return upsample2x, [rng.normal(shape, np.float64)]


def _elementwise(op):
    def build(rng):
        shape = tuple(int(v) for v in rng.integers(1, 5, 2))
        return op, [_away_from_zero(rng, shape)]
    return build


def _softmax(rng):
    n, k = int(rng.integers(1, 5)), int(rng.integers(2, 12))
    return softmax, [rng.normal((n, k), np.float64)]


def _dropout(rng):
    shape = tuple(int(v) for v in rng.integers(1, 6, 2))
    seed = int(rng.integers(0, 1 << 30))
    return (lambda x: dropout(x, 0.5, True, Rng(seed))), [rng.normal(shape, np.float64)]


def _softmax_ce(fused):
    def build(rng):
        n, k = int(rng.integers(1, 6)), int(rng.integers(2, 12))
        t = _one_hot(rng, n, k)
        if fused:
            return (lambda z: softmax_cross_entropy(z, t)), [rng.normal((n, k), np.float64)]
        return (lambda z: categorical_cross_entropy(softmax(z), t)), [rng.normal((n, k), np.float64)]
    return build


def _sigmoid_bce(fused):
    def build(rng):
        n = int(rng.integers(1, 9))
        t = rng.integers(0, 2, (n, 1)).astype(np.float64)
        if fused:
            return (lambda z: sigmoid_binary_cross_entropy(z, t)), [rng.normal((n, 1), np.float64) * 2]
        return (lambda z: binary_cross_entropy(sigmoid(z), t)), [rng.normal((n, 1), np.float64) * 2]
    return build


def _composed(rng):
    # conv -> tanh -> pool -> flatten -> dense -> softmax CE, end to end (smooth, so no kinks)
    c, o = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    h = int(rng.integers(3, 6))
    x = rng.normal((2, c, h, h), np.float64)
    w = rng.normal((o, c, 3, 3), np.float64) * 0.5
    side = -(-h // 2)
    d = rng.normal((o * side * side, 3), np.float64)
    t = _one_hot(rng, 2, 3)

    def fn(x, w, d):
        y = maxpool2d(tanh(conv2d(x, w, None, 1, "same")), 2, 2)
        return softmax_cross_entropy(dense(y.reshape(2, -1), d), t)
    return fn, [x, w, d]


CASES = {
    "conv2d same stride 1": _conv(1, "same"),
    "conv2d same stride 2": _conv(2, "same"),
    "conv2d valid stride 1": _conv(1, "valid"),
    "conv2d valid stride 2": _conv(2, "valid"),
    "maxpool2d ceil mode": _maxpool,
    "batchnorm2d train": _batchnorm,
    "dense": _dense,
    "upsample2x": _upsample,
    "relu": _elementwise(relu),
    "leaky_relu": _elementwise(leaky_relu),
    "tanh": _elementwise(tanh),
    "sigmoid": _elementwise(sigmoid),
    "softmax": _softmax,
    "dropout": _dropout,
    "softmax + categorical CE (fused)": _softmax_ce(True),
    "softmax + categorical CE (composed)": _softmax_ce(False),
    "sigmoid + binary CE (fused)": _sigmoid_bce(True),
    "sigmoid + binary CE (composed)": _sigmoid_bce(False),
    "conv-pool-dense chain": _composed,
}


@dataclass
class CaseResult:
    name: str
    errors: list
    seconds: float

    @property
    def worst(self):
        return max(self.errors)

    @property
    def passed(self):
        return self.worst < TOLERANCE


def run_case(name, seed=0, shapes=SHAPES_PER_CASE):
    build = CASES[name]
    rng = Rng(seed).child(0x6C, sorted(CASES).index(name))
    start = time.perf_counter()
    errors = []
    for _ in range(shapes):
        fn, inputs = build(rng)
        errors.append(grad_check(fn, inputs))
    return CaseResult(name, errors, time.perf_counter() - start)


def run_suite(seed=0, shapes=SHAPES_PER_CASE):
    return [run_case(name, seed, shapes) for name in CASES]
