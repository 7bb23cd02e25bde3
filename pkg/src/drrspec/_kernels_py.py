"""Pure-numpy reference kernels for the bilinear layer primitives.

Every function here has a twin with the same signature in the compiled
``_ckernels`` module. Shapes use ``B`` batch, ``Ci``/``Co`` in/out channels,
``n`` input length, ``w`` kernel width, ``L`` locally-connected positions.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _conv_windows(x, w, pad, n_out):
    xpad = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    return sliding_window_view(xpad, w, axis=2)[:, :, :n_out, :]


def conv1d_forward(x, K, pad):
    """Zero-padded cross-correlation ``y[b,o,t] = sum K[o,c,j] x[b,c,t+j-pad]``."""
    w = K.shape[2]
    n_out = x.shape[2] + 2 * pad - w + 1
    win = _conv_windows(x, w, pad, n_out)
    y = np.tensordot(win, K, axes=([1, 3], [1, 2]))  # (B, n_out, Co)
    return np.ascontiguousarray(y.transpose(0, 2, 1))


def conv1d_input_grad(g, K, pad, n):
    """Adjoint of :func:`conv1d_forward` with respect to ``x``."""
    w = K.shape[2]
    Kflip = np.ascontiguousarray(K[:, :, ::-1].transpose(1, 0, 2))
    return conv1d_forward(g, Kflip, w - 1 - pad)[:, :, :n]


def conv1d_kernel_grad(x, g, w, pad):
    """Adjoint of :func:`conv1d_forward` with respect to ``K``."""
    n_out = g.shape[2]
    win = _conv_windows(x, w, pad, n_out)
    return np.tensordot(g, win, axes=([0, 2], [0, 2]))  # (Co, Ci, w)


def _lc_windows(x, w, stride, L):
    win = sliding_window_view(x, w, axis=2)[:, :, ::stride, :][:, :, :L, :]
    B, Ci = x.shape[:2]
    # (L, B, Ci*w)
    return np.ascontiguousarray(win.transpose(2, 0, 1, 3)).reshape(L, B, Ci * w)


def lc_forward(x, W, stride):
    """Locally-connected layer ``y[b,o,l] = sum W[l,o,c,j] x[b,c,l*stride+j]``."""
    L, Co, Ci, w = W.shape
    win = _lc_windows(x, w, stride, L)
    y = np.matmul(win, W.reshape(L, Co, Ci * w).transpose(0, 2, 1))  # (L, B, Co)
    return np.ascontiguousarray(y.transpose(1, 2, 0))


def lc_input_grad(g, W, stride, n):
    """Adjoint of :func:`lc_forward` with respect to ``x``."""
    L, Co, Ci, w = W.shape
    B = g.shape[0]
    contrib = np.matmul(g.transpose(2, 0, 1), W.reshape(L, Co, Ci * w))
    contrib = contrib.reshape(L, B, Ci, w)
    gx = np.zeros((B, Ci, n))
    stop = stride * (L - 1) + 1
    for j in range(w):
        gx[:, :, j:j + stop:stride] += contrib[:, :, :, j].transpose(1, 2, 0)
    return gx


def lc_weight_grad(x, g, w, stride):
    """Adjoint of :func:`lc_forward` with respect to ``W``."""
    B, Co, L = g.shape
    Ci = x.shape[1]
    win = _lc_windows(x, w, stride, L)
    gW = np.matmul(g.transpose(2, 1, 0), win)  # (L, Co, Ci*w)
    return gW.reshape(L, Co, Ci, w)
