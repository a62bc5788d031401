"""Forward and backward kernels for the layer vocabulary.

Each ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
consumes the cache. Convolution is cross-correlation (no kernel flip).
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NORM_EPS = 1e-5


def _windows(x, k, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # N, C, Ho, Wo, k, k
    return x, sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d(x, w, b=None, stride=1, padding=0):
    _, win = _windows(x, w.shape[2], stride, padding)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_forward(x, w, b, stride, padding):
    out = conv2d(x, w, b, stride, padding)
    return out, (x.shape, x, w, b is not None, stride, padding)


def conv2d_backward(dout, cache):
    x_shape, x, w, has_bias, stride, padding = cache
    k = w.shape[2]
    _, win = _windows(x, k, stride, padding)
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3)) if has_bias else None
    N, C, H, W = x_shape
    Ho, Wo = dout.shape[2:]
    dxp = np.zeros((N, C, H + 2 * padding, W + 2 * padding), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(dout, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            dxp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += contrib
    dx = dxp[:, :, padding:padding + H, padding:padding + W]
    return np.ascontiguousarray(dx), dw, db


def instance_norm_forward(x, gamma, beta, eps=NORM_EPS):
    mean = x.mean(axis=(2, 3), keepdims=True)
    var = x.var(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, inv_std, gamma)


def instance_norm_backward(dout, cache):
    xhat, inv_std, gamma = cache
    m = xhat.shape[2] * xhat.shape[3]
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    dx = (inv_std / m) * (m * dxhat
                          - dxhat.sum(axis=(2, 3), keepdims=True)
                          - xhat * (dxhat * xhat).sum(axis=(2, 3), keepdims=True))
    return dx, dgamma, dbeta


def sigmoid(x):
    # split by sign to stay finite for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def relu_backward(dout, out):
    return dout * (out > 0)


def sigmoid_backward(dout, out):
    return dout * out * (1 - out)


def tanh_backward(dout, out):
    return dout * (1 - out * out)


def gru_forward(h, x, p, padding):
    """Convolutional GRU step, gate input ordering [hidden, input]."""
    hx = np.concatenate([h, x], axis=1)
    z_pre, cz = conv2d_forward(hx, p["wz"], p["bz"], 1, padding)
    r_pre, cr = conv2d_forward(hx, p["wr"], p["br"], 1, padding)
    z, r = sigmoid(z_pre), sigmoid(r_pre)
    rhx = np.concatenate([r * h, x], axis=1)
    q_pre, cq = conv2d_forward(rhx, p["wq"], p["bq"], 1, padding)
    q = np.tanh(q_pre)
    out = (1 - z) * h + z * q
    return out, (h, z, r, q, cz, cr, cq)


def gru_backward(dout, cache):
    h, z, r, q, cz, cr, cq = cache
    ch = h.shape[1]
    dz = dout * (q - h)
    dq = dout * z
    dh = dout * (1 - z)

    drhx, dwq, dbq = conv2d_backward(tanh_backward(dq, q), cq)
    drh, dx = drhx[:, :ch], drhx[:, ch:]
    dr = drh * h
    dh = dh + drh * r

    dhx_z, dwz, dbz = conv2d_backward(sigmoid_backward(dz, z), cz)
    dhx_r, dwr, dbr = conv2d_backward(sigmoid_backward(dr, r), cr)
    dhx = dhx_z + dhx_r
    dh = dh + dhx[:, :ch]
    dx = dx + dhx[:, ch:]
    grads = {"wz": dwz, "bz": dbz, "wr": dwr, "br": dbr, "wq": dwq, "bq": dbq}
    return dh, dx, grads
