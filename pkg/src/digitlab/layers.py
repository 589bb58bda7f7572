"""Differentiable layers: convolution, pooling, normalization, dense, dropout,
upsampling, activations and the two cross-entropy losses.

Functional forms operate on :class:`~digitlab.tensor.Tensor` objects and
record their backward rule on the tape. The classes at the bottom bundle a
functional op with its parameters, buffers and static shape rule so that
:mod:`digitlab.models` can compose them.
"""

from collections import OrderedDict

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError
from .tensor import Tensor

LOSS_CLAMP = 1e-7


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(size, kernel, stride, padding):
    if padding == "same":
        return -(-size // stride)
    if padding == "valid":
        if size < kernel:
            raise DimensionError(f"valid convolution: input extent {size} smaller than kernel {kernel}")
        return (size - kernel) // stride + 1
    raise ContractError(f"unknown padding mode {padding!r}")


def _leading_pad(kernel, padding):
    # same: total k-1, floor on top/left, ceil on bottom/right
    return (kernel - 1) // 2 if padding == "same" else 0


def _live_taps(size, kernel, stride, out, lead):
    """Kernel offsets that touch at least one real (non-padding) input element."""
    lo = max(0, lead - (out - 1) * stride)
    hi = min(kernel - 1, size - 1 + lead)
    return lo, hi + 1


def _embed(x, top, left, hp, wp):
    n, c, h, w = x.shape
    xp = np.zeros((n, c, hp, wp), dtype=x.dtype)
    hh, ww = min(h, hp - top), min(w, wp - left)
    xp[:, :, top:top + hh, left:left + ww] = x[:, :, :hh, :ww]
    return xp


def _extract(dxp, top, left, shape):
    n, c, h, w = shape
    hh, ww = min(h, dxp.shape[2] - top), min(w, dxp.shape[3] - left)
    if (hh, ww) == (h, w):
        return np.ascontiguousarray(dxp[:, :, top:top + h, left:left + w])
    dx = np.zeros(shape, dtype=dxp.dtype)
    dx[:, :, :hh, :ww] = dxp[:, :, top:top + hh, left:left + ww]
    return dx


def conv2d(x, weight, bias=None, stride=1, padding="same"):
    """2-D cross-correlation of an NCHW batch (im2col + GEMM).

    Kernel taps that can only ever see padding are skipped, which is exact and
    matters for 5x5 kernels on 2x2 and 1x1 maps.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input and OIHW weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise DimensionError(f"conv2d: input has {c} channels but weight {weight.shape} expects {ci}")
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    top, left = _leading_pad(kh, padding), _leading_pad(kw, padding)
    y0, y1 = _live_taps(h, kh, stride, oh, top)
    x0, x1 = _live_taps(w, kw, stride, ow, left)
    kh_e, kw_e = y1 - y0, x1 - x0
    hp = (oh - 1) * stride + kh_e
    wp = (ow - 1) * stride + kw_e
    pt, pl = top - y0, left - x0

    xp = _embed(x.data, pt, pl, hp, wp)
    cols = kernels.im2col(xp, kh_e, kw_e, stride, oh, ow)
    w_full = weight.data
    w_eff = np.ascontiguousarray(w_full[:, :, y0:y1, x0:x1]).reshape(o, -1)
    out = w_eff @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, oh, ow).transpose(1, 0, 2, 3))
    x_shape = x.shape

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        dw = np.zeros_like(w_full)
        dw[:, :, y0:y1, x0:x1] = (g2 @ cols.T).reshape(o, c, kh_e, kw_e)
        dcols = w_eff.T @ g2
        dx = _extract(kernels.col2im(dcols, (n, c, hp, wp), kh_e, kw_e, stride, oh, ow), pt, pl, x_shape)
        db = g2.sum(axis=1) if bias is not None else None
        return dx, dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)


def conv2d_naive_oracle(x, weight, bias=None, stride=1, padding="same"):
    """Reference convolution by direct loops over (sample, filter, row, col).

    Shares no code with :func:`conv2d`: padding is handled by clipping each
    window against the input bounds. Accepts arrays or tensors; returns an array.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    wt = np.asarray(weight.data if isinstance(weight, Tensor) else weight)
    b = None if bias is None else np.asarray(bias.data if isinstance(bias, Tensor) else bias)
    n, c, h, w = x.shape
    o, ci, kh, kw = wt.shape
    if c != ci:
        raise DimensionError(f"conv2d: input has {c} channels but weight {wt.shape} expects {ci}")
    if padding == "same":
        oh, ow = -(-h // stride), -(-w // stride)
        top, left = (kh - 1) // 2, (kw - 1) // 2
    elif padding == "valid":
        if h < kh or w < kw:
            raise DimensionError(f"valid convolution: input {h}x{w} smaller than kernel {kh}x{kw}")
        oh, ow = (h - kh) // stride + 1, (w - kw) // stride + 1
        top = left = 0
    else:
        raise ContractError(f"unknown padding mode {padding!r}")
    out = np.zeros((n, o, oh, ow), dtype=np.float64)
    for ni in range(n):
        for oi in range(o):
            for oy in range(oh):
                r = oy * stride - top
                r0, r1 = max(r, 0), min(r + kh, h)
                for ox in range(ow):
                    q = ox * stride - left
                    q0, q1 = max(q, 0), min(q + kw, w)
                    acc = 0.0
                    if r0 < r1 and q0 < q1:
                        patch = x[ni, :, r0:r1, q0:q1].astype(np.float64)
                        kern = wt[oi, :, r0 - r:r1 - r, q0 - q:q1 - q].astype(np.float64)
                        acc = float(np.sum(patch * kern))
                    if b is not None:
                        acc += float(b[oi])
                    out[ni, oi, oy, ox] = acc
    return out.astype(x.dtype)


# ---------------------------------------------------------------------------
# pooling, upsampling
# ---------------------------------------------------------------------------

def pool_output_size(size, window, stride, ceil_mode=True):
    if not ceil_mode:
        if size < window:
            raise DimensionError(f"floor-mode pooling: extent {size} smaller than window {window}")
        return (size - window) // stride + 1
    out = max(-(-(size - window) // stride), 0) + 1
    if (out - 1) * stride >= size:
        out -= 1
    return out


def maxpool2d(x, window=2, stride=2, ceil_mode=True):
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise DimensionError(f"maxpool2d: empty spatial extent in {x.shape}")
    oh = pool_output_size(h, window, stride, ceil_mode)
    ow = pool_output_size(w, window, stride, ceil_mode)
    out, arg = kernels.maxpool_forward(x.data, window, stride, oh, ow)
    shape = x.shape
    return Tensor._from_op(out, (x,), lambda g: (kernels.maxpool_backward(g, arg, shape),))


def upsample2x(x):
    """Nearest-neighbour 2x upsampling of an NCHW batch."""
    if x.ndim != 4:
        raise DimensionError(f"upsample2x expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


# ---------------------------------------------------------------------------
# normalization, dense, dropout
# ---------------------------------------------------------------------------

def batchnorm2d(x, gamma, beta, running_mean, running_var, training=True,
                momentum=0.9, eps=1e-5, update_stats=True):
    """Per-channel batch normalization for (N, C) or (N, C, H, W) input.

    In training mode the batch statistics normalize the input and, when
    ``update_stats`` is set, are folded into the running buffers in place:
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    if x.ndim not in (2, 4):
        raise DimensionError(f"batchnorm expects (N,C) or (N,C,H,W), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,):
        raise DimensionError(f"batchnorm: input has {c} channels, parameters have shape {gamma.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    xd = x.data
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if update_stats:
            running_mean *= momentum
            running_mean += (1 - momentum) * mu.astype(running_mean.dtype)
            running_var *= momentum
            running_var += (1 - momentum) * var.astype(running_var.dtype)
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    m = xd.size // c
    gam = gamma.data

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gam.reshape(bshape)
        if training:
            dx = (inv.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            dx = dxhat * inv.reshape(bshape)
        return dx, dgamma, dbeta

    return Tensor._from_op(out, (x, gamma, beta), backward)


def dense(x, weight, bias=None):
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"dense: cannot apply weight {weight.shape} to input {x.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out += bias.data

    def backward(g):
        return g @ wd.T, xd.T @ g, (g.sum(axis=0) if bias is not None else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)


def dropout(x, rate, training=True, rng=None):
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` at train time."""
    if not 0 <= rate < 1:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return Tensor._from_op(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x):
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def leaky_relu(x, alpha=0.2):
    slope = np.where(x.data > 0, 1.0, alpha).astype(x.dtype)
    return Tensor._from_op(x.data * slope, (x,), lambda g: (g * slope,))


def tanh(x):
    y = np.tanh(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * (1 - y * y),))


def _sigmoid(z):
    return 0.5 * (1 + np.tanh(0.5 * z))


def sigmoid(x):
    y = _sigmoid(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * y * (1 - y),))


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits):
    """Row-wise softmax over the last axis, max-shifted for stability."""
    p = _softmax(logits.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(p, (logits,), backward)


def activation(x, kind, alpha=0.2):
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        return softmax(x)
    raise ContractError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _as_array(t):
    return t.data if isinstance(t, Tensor) else np.asarray(t)


def _check_one_hot(t, k):
    if t.ndim != 2 or t.shape[1] != k:
        raise DimensionError(f"targets of shape {t.shape} do not match {k} classes")
    ok = np.all((t == 0) | (t == 1), axis=1) & (t.sum(axis=1) == 1)
    if not ok.all():
        raise ContractError(f"target rows {np.flatnonzero(~ok)[:5].tolist()} are not one-hot")


def _check_binary(t):
    if not np.all((t == 0) | (t == 1)):
        raise ContractError("binary targets must be 0 or 1")


def categorical_cross_entropy(probs, targets):
    """Mean over rows of ``-sum(t * log(clip(p)))`` with clip to [1e-7, 1-1e-7]."""
    t = _as_array(targets)
    p = probs.data
    _check_one_hot(t, p.shape[1])
    if np.any(np.abs(p.sum(axis=1) - 1) > 1e-5):
        raise ContractError("categorical_cross_entropy needs probability rows summing to 1")
    t = t.astype(p.dtype)
    n = p.shape[0]
    live = (p > LOSS_CLAMP) & (p < 1 - LOSS_CLAMP)
    pc = np.clip(p, LOSS_CLAMP, 1 - LOSS_CLAMP)
    loss = np.asarray(-(t * np.log(pc)).sum() / n, dtype=p.dtype)
    return Tensor._from_op(loss, (probs,), lambda g: (g * live * (-t / pc) / n,))


def binary_cross_entropy(p, targets):
    """Mean of ``-(t log p + (1-t) log(1-p))`` with the same clamp."""
    t = _as_array(targets)
    pd = p.data
    if t.shape != pd.shape:
        raise DimensionError(f"binary targets {t.shape} do not match predictions {pd.shape}")
    _check_binary(t)
    if np.any((pd < 0) | (pd > 1)):
        raise ContractError("binary_cross_entropy needs predictions in [0, 1]")
    t = t.astype(pd.dtype)
    live = (pd > LOSS_CLAMP) & (pd < 1 - LOSS_CLAMP)
    pc = np.clip(pd, LOSS_CLAMP, 1 - LOSS_CLAMP)
    loss = np.asarray(-(t * np.log(pc) + (1 - t) * np.log(1 - pc)).mean(), dtype=pd.dtype)
    n = pd.size
    return Tensor._from_op(loss, (p,), lambda g: (g * live * (-t / pc + (1 - t) / (1 - pc)) / n,))


def softmax_cross_entropy(logits, targets):
    """``categorical_cross_entropy(softmax(logits), targets)`` as one op.

    Same value and same gradient as the composition, including the clamp
    (rows whose target probability is clamped contribute no gradient).
    """
    t = _as_array(targets)
    z = logits.data
    _check_one_hot(t, z.shape[1])
    t = t.astype(z.dtype)
    p = _softmax(z)
    n = z.shape[0]
    pt = (p * t).sum(axis=1)
    live = ((pt > LOSS_CLAMP) & (pt < 1 - LOSS_CLAMP)).astype(z.dtype)[:, None]
    loss = np.asarray(-np.log(np.clip(pt, LOSS_CLAMP, 1 - LOSS_CLAMP)).sum() / n, dtype=z.dtype)
    return Tensor._from_op(loss, (logits,), lambda g: (g * live * (p - t) / n,))


def sigmoid_binary_cross_entropy(logits, targets):
    """``binary_cross_entropy(sigmoid(logits), targets)`` as one op."""
    t = _as_array(targets)
    z = logits.data
    if t.shape != z.shape:
        raise DimensionError(f"binary targets {t.shape} do not match logits {z.shape}")
    _check_binary(t)
    t = t.astype(z.dtype)
    p = _sigmoid(z)
    live = (p > LOSS_CLAMP) & (p < 1 - LOSS_CLAMP)
    pc = np.clip(p, LOSS_CLAMP, 1 - LOSS_CLAMP)
    loss = np.asarray(-(t * np.log(pc) + (1 - t) * np.log(1 - pc)).mean(), dtype=z.dtype)
    n = z.size
    return Tensor._from_op(loss, (logits,), lambda g: (g * live * (p - t) / n,))


# ---------------------------------------------------------------------------
# layer objects
# ---------------------------------------------------------------------------

def he_uniform(shape, fan_in, rng):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, shape)


def xavier_uniform(shape, fan_in, fan_out, rng):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


class Layer:
    """Base layer: named parameters, non-trainable buffers, a static shape rule."""

    def __init__(self):
        self.params = OrderedDict()
        self.buffers = OrderedDict()

    def forward(self, x, training=False, rng=None, update_stats=True):
        raise NotImplementedError

    def output_shape(self, shape):
        return shape

    def describe(self):
        return type(self).__name__


def _spatial(shape, who):
    if len(shape) != 4:
        raise DimensionError(f"{who} expects a 4-D (N,C,H,W) input, got {shape}")
    return shape


class Conv2d(Layer):
    def __init__(self, in_channels, out_channels, kernel, rng, stride=1, padding="same", init="he"):
        super().__init__()
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = (kh, kw), stride, padding
        shape = (out_channels, in_channels, kh, kw)
        fan_in, fan_out = in_channels * kh * kw, out_channels * kh * kw
        w = he_uniform(shape, fan_in, rng) if init == "he" else xavier_uniform(shape, fan_in, fan_out, rng)
        self.params["weight"] = Tensor(w, requires_grad=True)
        self.params["bias"] = Tensor(np.zeros(out_channels, np.float32), requires_grad=True)

    def forward(self, x, training=False, rng=None, update_stats=True):
        return conv2d(x, self.params["weight"], self.params["bias"], self.stride, self.padding)

    def output_shape(self, shape):
        n, c, h, w = _spatial(shape, "conv2d")
        if c != self.in_channels:
            raise DimensionError(f"conv2d expects {self.in_channels} channels, got shape {shape}")
        kh, kw = self.kernel
        return (n, self.out_channels, conv_output_size(h, kh, self.stride, self.padding),
                conv_output_size(w, kw, self.stride, self.padding))

    def describe(self):
        kh, kw = self.kernel
        return f"Conv2d({self.in_channels}->{self.out_channels}, {kh}x{kw}, stride {self.stride}, {self.padding})"


class Dense(Layer):
    def __init__(self, in_features, out_features, rng, init="he"):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        shape = (in_features, out_features)
        if init == "he":
            w = he_uniform(shape, in_features, rng)
        elif init == "xavier":
            w = xavier_uniform(shape, in_features, out_features, rng)
        elif init == "zeros":
            w = np.zeros(shape, np.float32)
        else:
            raise ContractError(f"unknown init {init!r}")
        self.params["weight"] = Tensor(w, requires_grad=True)
        self.params["bias"] = Tensor(np.zeros(out_features, np.float32), requires_grad=True)

    def forward(self, x, training=False, rng=None, update_stats=True):
        return dense(x, self.params["weight"], self.params["bias"])

    def output_shape(self, shape):
        if len(shape) != 2 or shape[1] != self.in_features:
            raise DimensionError(f"dense expects (N,{self.in_features}), got {shape}")
        return (shape[0], self.out_features)

    def describe(self):
        return f"Dense({self.in_features}->{self.out_features})"


class BatchNorm2d(Layer):
    def __init__(self, channels, momentum=0.9, eps=1e-5):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.params["gamma"] = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.params["beta"] = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.buffers["running_mean"] = np.zeros(channels, np.float32)
        self.buffers["running_var"] = np.ones(channels, np.float32)

    def forward(self, x, training=False, rng=None, update_stats=True):
        return batchnorm2d(x, self.params["gamma"], self.params["beta"],
                           self.buffers["running_mean"], self.buffers["running_var"],
                           training, self.momentum, self.eps, update_stats)

    def output_shape(self, shape):
        if len(shape) not in (2, 4) or shape[1] != self.channels:
            raise DimensionError(f"batchnorm over {self.channels} channels got shape {shape}")
        return shape

    def describe(self):
        return f"BatchNorm({self.channels})"


class MaxPool2d(Layer):
    def __init__(self, window=2, stride=2, ceil_mode=True):
        super().__init__()
        self.window, self.stride, self.ceil_mode = window, stride, ceil_mode

    def forward(self, x, training=False, rng=None, update_stats=True):
        return maxpool2d(x, self.window, self.stride, self.ceil_mode)

    def output_shape(self, shape):
        n, c, h, w = _spatial(shape, "maxpool2d")
        return (n, c, pool_output_size(h, self.window, self.stride, self.ceil_mode),
                pool_output_size(w, self.window, self.stride, self.ceil_mode))

    def describe(self):
        return f"MaxPool({self.window}x{self.window}, stride {self.stride})"


class Upsample2x(Layer):
    def forward(self, x, training=False, rng=None, update_stats=True):
        return upsample2x(x)

    def output_shape(self, shape):
        n, c, h, w = _spatial(shape, "upsample2x")
        return (n, c, 2 * h, 2 * w)


class Dropout(Layer):
    def __init__(self, rate):
        super().__init__()
        if not 0 <= rate < 1:
            raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, training=False, rng=None, update_stats=True):
        return dropout(x, self.rate, training, rng)

    def describe(self):
        return f"Dropout({self.rate})"


class Activation(Layer):
    def __init__(self, kind, alpha=0.2):
        super().__init__()
        if kind not in ("relu", "leaky_relu", "tanh", "sigmoid", "softmax"):
            raise ContractError(f"unknown activation {kind!r}")
        self.kind, self.alpha = kind, alpha

    def forward(self, x, training=False, rng=None, update_stats=True):
        return activation(x, self.kind, self.alpha)

    def describe(self):
        return f"LeakyReLU({self.alpha})" if self.kind == "leaky_relu" else self.kind


class Flatten(Layer):
    def forward(self, x, training=False, rng=None, update_stats=True):
        return x.reshape(x.shape[0], -1)

    def output_shape(self, shape):
        width = 1
        for s in shape[1:]:
            width *= s
        return (shape[0], width)


class Reshape(Layer):
    def __init__(self, target):
        super().__init__()
        self.target = tuple(target)

    def forward(self, x, training=False, rng=None, update_stats=True):
        return x.reshape((x.shape[0],) + self.target)

    def output_shape(self, shape):
        width = 1
        for s in shape[1:]:
            width *= s
        need = int(np.prod(self.target))
        if width != need:
            raise DimensionError(f"cannot reshape {shape} to (N,{','.join(map(str, self.target))})")
        return (shape[0],) + self.target

    def describe(self):
        return f"Reshape{self.target}"
