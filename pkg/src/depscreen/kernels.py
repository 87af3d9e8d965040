"""Hot inner loops, each with a numba kernel and a numpy twin.

The public names (``fir_decimate``, ``resize_bilinear``, ``im2col``,
``col2im``) dispatch on ``depscreen._accel.USE_NUMBA``. Both variants are
importable under ``*_numba`` / ``*_numpy`` so tests and the benchmark can
compare them directly.

Convolution helpers work on the channel-major activation layout
``(C, N, H, W)`` used throughout :mod:`depscreen.nn`; the column matrix is
``(C*kh*kw, N*OH*OW)`` so a convolution is a single GEMM.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ._accel import USE_NUMBA, njit


# -- FIR filtering + decimation ---------------------------------------------


@njit
def _fir_decimate_kernel(x, taps, factor):
    n = x.shape[0]
    m = taps.shape[0]
    delay = (m - 1) // 2
    n_out = (n + factor - 1) // factor
    out = np.zeros(n_out, dtype=np.float64)
    for j in range(n_out):
        center = j * factor + delay
        # y[c - delay] = sum_k taps[k] * x[c - k]
        k_lo = max(0, center - (n - 1))
        k_hi = min(m - 1, center)
        acc = 0.0
        for k in range(k_lo, k_hi + 1):
            acc += taps[k] * x[center - k]
        out[j] = acc
    return out


def fir_decimate_numba(x, taps, factor):
    x = np.ascontiguousarray(x, dtype=np.float64)
    taps = np.ascontiguousarray(taps, dtype=np.float64)
    return _fir_decimate_kernel(x, taps, int(factor))


def fir_decimate_numpy(x, taps, factor):
    x = np.asarray(x, dtype=np.float64)
    taps = np.asarray(taps, dtype=np.float64)
    delay = (len(taps) - 1) // 2
    full = np.convolve(x, taps)
    return np.ascontiguousarray(full[delay:delay + len(x)][::factor])


# -- bilinear resize (pixel-center convention) -------------------------------


def _source_coords(n_in, n_out):
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


@njit
def _resize_kernel(img, y0, y1, wy, x0, x1, wx):
    out = np.empty((y0.shape[0], x0.shape[0]), dtype=np.float64)
    for i in range(y0.shape[0]):
        a = y0[i]
        b = y1[i]
        t = wy[i]
        for j in range(x0.shape[0]):
            c = x0[j]
            d = x1[j]
            u = wx[j]
            top = img[a, c] * (1.0 - u) + img[a, d] * u
            bot = img[b, c] * (1.0 - u) + img[b, d] * u
            out[i, j] = top * (1.0 - t) + bot * t
    return out


def resize_bilinear_numba(img, out_h, out_w):
    img = np.ascontiguousarray(img, dtype=np.float64)
    y0, y1, wy = _source_coords(img.shape[0], out_h)
    x0, x1, wx = _source_coords(img.shape[1], out_w)
    return _resize_kernel(img, y0, y1, wy, x0, x1, wx)


def resize_bilinear_numpy(img, out_h, out_w):
    img = np.asarray(img, dtype=np.float64)
    y0, y1, wy = _source_coords(img.shape[0], out_h)
    x0, x1, wx = _source_coords(img.shape[1], out_w)
    rows = img[y0] * (1.0 - wy)[:, None] + img[y1] * wy[:, None]
    return rows[:, x0] * (1.0 - wx)[None, :] + rows[:, x1] * wx[None, :]


# -- im2col / col2im on (C, N, H, W) ----------------------------------------


@njit
def _im2col_kernel(xpad, kh, kw, stride, oh, ow):
    c_in, n, _, _ = xpad.shape
    cols = np.empty((c_in * kh * kw, n * oh * ow), dtype=xpad.dtype)
    for c in range(c_in):
        for ki in range(kh):
            for kj in range(kw):
                row = (c * kh + ki) * kw + kj
                for b in range(n):
                    for i in range(oh):
                        base = (b * oh + i) * ow
                        y = i * stride + ki
                        for j in range(ow):
                            cols[row, base + j] = xpad[c, b, y, j * stride + kj]
    return cols


@njit
def _col2im_kernel(cols, out, kh, kw, stride, oh, ow):
    c_in, n, _, _ = out.shape
    for c in range(c_in):
        for ki in range(kh):
            for kj in range(kw):
                row = (c * kh + ki) * kw + kj
                for b in range(n):
                    for i in range(oh):
                        base = (b * oh + i) * ow
                        y = i * stride + ki
                        for j in range(ow):
                            out[c, b, y, j * stride + kj] += cols[row, base + j]
    return out


def im2col_numba(xpad, kh, kw, stride, oh, ow):
    return _im2col_kernel(np.ascontiguousarray(xpad), kh, kw, stride, oh, ow)


def im2col_numpy(xpad, kh, kw, stride, oh, ow):
    xpad = np.ascontiguousarray(xpad)
    c_in, n, _, _ = xpad.shape
    s_c, s_n, s_h, s_w = xpad.strides
    view = as_strided(
        xpad,
        shape=(c_in, kh, kw, n, oh, ow),
        strides=(s_c, s_h, s_w, s_n, s_h * stride, s_w * stride),
        writeable=False,
    )
    return view.reshape(c_in * kh * kw, n * oh * ow)


def col2im_numba(cols, padded_shape, kh, kw, stride, oh, ow):
    out = np.zeros(padded_shape, dtype=cols.dtype)
    return _col2im_kernel(np.ascontiguousarray(cols), out, kh, kw, stride, oh, ow)


def col2im_numpy(cols, padded_shape, kh, kw, stride, oh, ow):
    c_in, n = padded_shape[0], padded_shape[1]
    out = np.zeros(padded_shape, dtype=cols.dtype)
    cols6 = cols.reshape(c_in, kh, kw, n, oh, ow)
    h_span = stride * (oh - 1) + 1
    w_span = stride * (ow - 1) + 1
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki:ki + h_span:stride, kj:kj + w_span:stride] += cols6[:, ki, kj]
    return out


if USE_NUMBA:
    fir_decimate = fir_decimate_numba
    resize_bilinear = resize_bilinear_numba
    im2col = im2col_numba
    col2im = col2im_numba
else:
    fir_decimate = fir_decimate_numpy
    resize_bilinear = resize_bilinear_numpy
    im2col = im2col_numpy
    col2im = col2im_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
