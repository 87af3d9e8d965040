"""Layer primitives with explicit backward passes.

Activations use the channel-major layout ``(C, N, H, W)``. Every forward
returns ``(out, cache)`` and every backward consumes that cache, so layers
hold no per-call state.
"""

import numpy as np

from .. import kernels

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def conv2d_forward(x, w, stride=1, pad=0):
    c_in, n, h, wd = x.shape
    f, c_w, kh, kw = w.shape
    if c_w != c_in:
        raise ValueError(f"conv expects {c_w} input channels, got {c_in}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    cols = kernels.im2col(x, kh, kw, stride, oh, ow)
    out = (w.reshape(f, -1) @ cols).reshape(f, n, oh, ow)
    return out, (cols, x.shape, w, stride, pad, oh, ow)


def conv2d_backward(dout, cache, need_dx=True):
    cols, padded_shape, w, stride, pad, oh, ow = cache
    f, _, kh, kw = w.shape
    d2 = dout.reshape(f, -1)
    dw = (d2 @ cols.T).reshape(w.shape)
    if not need_dx:
        return None, dw
    dcols = w.reshape(f, -1).T @ d2
    dx = kernels.col2im(dcols, padded_shape, kh, kw, stride, oh, ow)
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return dx, dw


def _bcast(v):
    return v.reshape(-1, 1, 1, 1)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, batch_stats, update_running):
    """Per-channel normalization over (N, H, W).

    ``batch_stats`` selects batch statistics (training) over running ones.
    ``update_running`` updates the running buffers in place; it only takes
    effect together with ``batch_stats``.
    """
    if batch_stats:
        m = x.shape[1] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=(1, 2, 3))
        centered = x - _bcast(mean)
        var = (centered * centered).mean(axis=(1, 2, 3))
        if update_running:
            unbiased = var * (m / max(m - 1, 1))
            running_mean *= 1.0 - BN_MOMENTUM
            running_mean += BN_MOMENTUM * mean
            running_var *= 1.0 - BN_MOMENTUM
            running_var += BN_MOMENTUM * unbiased
    else:
        centered = x - _bcast(running_mean)
        var = running_var
    inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
    xhat = centered * _bcast(inv_std)
    out = xhat * _bcast(gamma) + _bcast(beta)
    return out, (xhat, inv_std, gamma, batch_stats)


def batchnorm_backward(dout, cache, need_dx=True):
    xhat, inv_std, gamma, batch_stats = cache
    dgamma = (dout * xhat).sum(axis=(1, 2, 3))
    dbeta = dout.sum(axis=(1, 2, 3))
    if not need_dx:
        return None, dgamma, dbeta
    scale = _bcast(gamma * inv_std)
    if batch_stats:
        m = xhat.shape[1] * xhat.shape[2] * xhat.shape[3]
        dx = scale * (dout - _bcast(dbeta / m) - xhat * _bcast(dgamma / m))
    else:
        dx = dout * scale
    return dx, dgamma, dbeta


def relu_forward(x):
    out = np.maximum(x, 0)
    return out, out > 0


def relu_backward(dout, mask):
    return dout * mask


def maxpool2_forward(x):
    """2x2 max pool, stride 2; odd trailing rows/columns are dropped."""
    c, n, h, w = x.shape
    h2, w2 = h // 2, w // 2
    xw = (
        x[:, :, : 2 * h2, : 2 * w2]
        .reshape(c, n, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(c, n, h2, w2, 4)
    )
    idx = xw.argmax(axis=-1)
    out = np.take_along_axis(xw, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2_backward(dout, cache):
    idx, shape = cache
    c, n, h, w = shape
    h2, w2 = h // 2, w // 2
    dw = np.zeros((c, n, h2, w2, 4), dtype=dout.dtype)
    np.put_along_axis(dw, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[:, :, : 2 * h2, : 2 * w2] = (
        dw.reshape(c, n, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(c, n, 2 * h2, 2 * w2)
    )
    return dx


def global_avgpool_forward(x):
    """(C, N, H, W) -> (N, C)."""
    return x.mean(axis=(2, 3)).T.copy(), x.shape


def global_avgpool_backward(dout, shape):
    c, n, h, w = shape
    dx = np.empty(shape, dtype=dout.dtype)
    dx[...] = (dout.T / (h * w))[:, :, None, None]
    return dx


def linear_forward(x, w, b):
    return x @ w.T + b, x


def linear_backward(dout, x, w, need_dx=True):
    dw = dout.T @ x
    db = dout.sum(axis=0)
    dx = dout @ w if need_dx else None
    return dx, dw, db


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    b = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(b), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b
    return float(loss), dlogits
