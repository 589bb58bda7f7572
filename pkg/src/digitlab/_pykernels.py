"""Numpy implementations of the hot convolution and pooling kernels.

These are the fallback used when the compiled ``_kernels`` extension is not
available. Both backends expose identical signatures and produce identical
values (the operations are pure data movement plus max selection, so there is
no reduction-order difference between them).
"""

import numpy as np


def im2col(xp, kh, kw, stride, oh, ow):
    """Unfold a padded NCHW batch into a ``(C*kh*kw, N*oh*ow)`` column matrix.

    Row order is ``(channel, ky, kx)`` so that ``weight.reshape(out, -1)``
    multiplies it directly.
    """
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=xp.dtype)
    ylim = stride * (oh - 1) + 1
    xlim = stride * (ow - 1) + 1
    for ky in range(kh):
        for kx in range(kw):
            patch = xp[:, :, ky:ky + ylim:stride, kx:kx + xlim:stride]
            cols[:, ky, kx] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * oh * ow)


def col2im(cols, xp_shape, kh, kw, stride, oh, ow):
    """Adjoint of :func:`im2col`: scatter-add columns back into a padded batch."""
    n, c, hp, wp = xp_shape
    cols = cols.reshape(c, kh, kw, n, oh, ow)
    dxp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    ylim = stride * (oh - 1) + 1
    xlim = stride * (ow - 1) + 1
    for ky in range(kh):
        for kx in range(kw):
            dxp[:, :, ky:ky + ylim:stride, kx:kx + xlim:stride] += cols[:, ky, kx].transpose(1, 0, 2, 3)
    return dxp


def maxpool_forward(x, k, stride, oh, ow):
    """Max over ``k x k`` windows; partial border windows use the elements present.

    Returns ``(out, argmax)`` where ``argmax`` holds the flat ``y*W + x`` index of
    the first maximal element (row-major window order) of every window.
    """
    n, c, h, w = x.shape
    hp = max(h, stride * (oh - 1) + k)
    wp = max(w, stride * (ow - 1) + k)
    xp = np.full((n, c, hp, wp), -np.inf, dtype=x.dtype)
    xp[:, :, :h, :w] = x
    ylim = stride * (oh - 1) + 1
    xlim = stride * (ow - 1) + 1
    rows = np.arange(oh) * stride
    cols = np.arange(ow) * stride
    best = None
    arg = None
    for dy in range(k):
        for dx in range(k):
            v = xp[:, :, dy:dy + ylim:stride, dx:dx + xlim:stride]
            idx = (rows[:, None] + dy) * w + (cols[None, :] + dx)
            if best is None:
                best = v.copy()
                arg = np.broadcast_to(idx, v.shape).copy()
            else:
                better = v > best
                best = np.where(better, v, best)
                arg = np.where(better, idx, arg)
    return best, arg.astype(np.int64)


def maxpool_backward(dout, argmax, x_shape):
    n, c, h, w = x_shape
    plane = np.arange(n * c, dtype=np.int64).reshape(n, c, 1, 1) * (h * w)
    flat = (argmax + plane).ravel()
    dx = np.bincount(flat, weights=dout.ravel(), minlength=n * c * h * w)
    return dx.astype(dout.dtype, copy=False).reshape(x_shape)
