"""NHWC layer primitives with explicit backward passes.

Each ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EPS = 1e-7


def _im2col(x):
    # (N, H, W, C) -> (N*H*W, 9*C) with column order (kh, kw, c)
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # N, H, W, C, 3, 3
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, 9 * c)


def conv3x3_forward(x, w, b):
    """3x3 convolution, stride 1, zero 'same' padding. ``w`` is (3, 3, Cin, Cout)."""
    if x.shape[-1] != w.shape[2]:
        raise ValueError(f"conv3x3: input has {x.shape[-1]} channels, kernel expects {w.shape[2]}")
    n, h, wd, _ = x.shape
    cols = _im2col(x)
    out = cols @ w.reshape(-1, w.shape[3]) + b
    return out.reshape(n, h, wd, w.shape[3]), (cols, w, x.shape)


def conv3x3_backward(dout, cache):
    cols, w, xshape = cache
    n, h, wd, cin = xshape
    d2 = dout.reshape(-1, w.shape[3])
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    # input gradient of a 'same' conv is a 'same' conv with the flipped, transposed kernel
    wf = w[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, cin)
    dx = (_im2col(dout.reshape(n, h, wd, -1)) @ wf).reshape(n, h, wd, cin)
    return dx, dw, db


def conv1x1_forward(x, w, b):
    """Pointwise convolution, ``w`` is (Cin, Cout)."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"conv1x1: input has {x.shape[-1]} channels, kernel expects {w.shape[0]}")
    return x @ w + b, (x, w)


def conv1x1_backward(dout, cache):
    x, w = cache
    cin, cout = w.shape
    dw = x.reshape(-1, cin).T @ dout.reshape(-1, cout)
    db = dout.reshape(-1, cout).sum(axis=0)
    return dout @ w.T, dw, db


def lrelu_forward(x, slope=0.01):
    pos = x > 0
    return np.where(pos, x, slope * x), (pos, slope)


def lrelu_backward(dout, cache):
    pos, slope = cache
    return np.where(pos, dout, slope * dout)


def maxpool_forward(x):
    """2x2 max pooling, stride 2. Gradient routes to the first maximum."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool: spatial size {h}x{w} is not even")
    blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def maxpool_backward(dout, cache):
    arg, shape = cache
    n, h, w, c = shape
    dblocks = np.zeros(dout.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(dblocks, arg[..., None], dout[..., None], axis=-1)
    return dblocks.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(shape)


def upsample_forward(x):
    """Nearest-neighbour 2x upsampling."""
    return x.repeat(2, axis=1).repeat(2, axis=2), x.shape


def upsample_backward(dout, shape):
    n, h, w, c = shape
    return dout.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4))


def sigmoid(z):
    # Split by sign so exp never overflows.
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_loss(pred, target):
    """Mean binary cross-entropy and its gradient with respect to ``pred``.

    Predictions are clamped to ``[EPS, 1 - EPS]`` before taking logs.
    """
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    p = np.clip(pred, EPS, 1.0 - EPS)
    loss = -np.mean(target * np.log(p) + (1.0 - target) * np.log1p(-p))
    grad = (p - target) / (p * (1.0 - p)) / pred.size
    return float(loss), grad
