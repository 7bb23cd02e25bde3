"""Relevance maps: saliency, LRP z-rule and diagnostics on them.

For networks whose only nonlinearities are ReLUs, the LRP z-rule relevance of
input bin ``i`` for class ``y`` equals ``x_i * d f_y / d x_i``. Batch maps and
the training penalty use that identity on the autodiff tape; :func:`lrp_z`
runs the layer-wise rule itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .model import Spectrum, logits_graph

SCORE_MODES = ("logit", "softmax")


class NotReluOnlyError(ValueError):
    """The z-rule / gradient identity needs a ReLU-only network."""


@dataclass
class RelevanceMap:
    values: np.ndarray
    label: int
    mode: str = "logit"

    def __len__(self):
        return self.values.shape[-1]


def _batch(model, x):
    if isinstance(x, Spectrum):
        x = x.intensities
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != model.n_inputs:
        raise ValueError(f"spectrum length {arr.shape[1]} does not match model input "
                         f"length {model.n_inputs}")
    return arr, single


def _labels(model, y, B):
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (B,))
    if np.any(y < 0) or np.any(y >= model.n_classes):
        raise ValueError(f"class index out of range for {model.n_classes} classes")
    return y


def one_hot(y, C):
    out = np.zeros((len(y), C))
    out[np.arange(len(y)), y] = 1.0
    return out


def score_gradient_graph(model, x, y, params=None, mode="logit", create_graph=False):
    """Input gradient of the class score for each row of ``x``.

    ``x`` must be an input leaf of a tape. Returns ``(grad_x, logits)`` as
    Values; rows do not interact, so the gradient of the summed score is the
    per-row gradient.
    """
    if mode not in SCORE_MODES:
        raise ValueError(f"score mode must be one of {SCORE_MODES}")
    z = logits_graph(model, x, params)
    mask = one_hot(y, model.n_classes)
    if mode == "logit":
        score = ad.vsum(ad.mul(z, mask))
    else:
        score = ad.vsum(ad.mul(ad.softmax(z), mask))
    (gx,) = ad.gradient(score, [x], create_graph=create_graph)
    return gx, z


def relevance_graph(model, x, y, params=None, mode="logit", create_graph=False):
    """``x * grad_x score`` as a Value, plus the logits."""
    gx, z = score_gradient_graph(model, x, y, params, mode, create_graph)
    return ad.mul(x, gx), z


def _input_gradient(model, x, y, mode):
    arr, single = _batch(model, x)
    y = _labels(model, y, arr.shape[0])
    tape = ad.Tape()
    xin = tape.input(arr)
    gx, _ = score_gradient_graph(model, xin, y, mode=mode)
    return arr, gx.data, single


def saliency(model, x, y):
    """Gradient of the class-``y`` logit with respect to the input."""
    _, g, single = _input_gradient(model, x, y, "logit")
    return g[0] if single else g


def std_weighted_saliency(model, x, y, sigma):
    """Saliency scaled per bin by the training-set standard deviation ``sigma``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape != (model.n_inputs,):
        raise ValueError(f"sigma must have length {model.n_inputs}")
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    return saliency(model, x, y) * sigma


def relevance(model, x, y, mode="logit"):
    """Relevance array ``x * grad_x score_y``; 1-d for one spectrum, else (B, n)."""
    if not model.is_relu_only():
        raise NotReluOnlyError(
            "the network has non-ReLU nonlinearities, so the LRP z-rule is not equal to "
            "input times gradient; refusing to compute it")
    arr, g, single = _input_gradient(model, x, y, mode)
    r = arr * g
    return r[0] if single else r


def _linear_forward(spec, p, a):
    if spec.kind == "conv":
        pad = (spec.width - 1) // 2 if spec.padding == "same" else 0
        return kernels.conv1d_forward(a, p["W"], pad) + p["b"][None, :, None]
    if spec.kind == "locally-connected":
        return kernels.lc_forward(a, p["W"], spec.stride) + p["b"][None]
    return a.reshape(1, -1) @ p["W"].T + p["b"][None]


def _linear_adjoint(spec, p, s, a):
    """``W^T s`` for the layer that mapped ``a`` to its output."""
    if spec.kind == "conv":
        pad = (spec.width - 1) // 2 if spec.padding == "same" else 0
        return kernels.conv1d_input_grad(s, p["W"], pad, a.shape[2])
    if spec.kind == "locally-connected":
        return kernels.lc_input_grad(s, p["W"], spec.stride, a.shape[2])
    return (s @ p["W"]).reshape(a.shape)


def _ratio(R, z):
    out = np.zeros_like(z)
    np.divide(R, z, out=out, where=z != 0)
    return out


def lrp_z(model, x, y):
    """LRP z-rule relevance map of one spectrum for class ``y`` (logit score).

    Relevance starts as the class logit and is redistributed layer by layer,
    ``R_i = a_i * sum_j w_ij R_j / z_j``, with ReLUs passing it through. This
    is computed from the recorded activations, not from the autodiff tape, so
    comparing it with ``x * saliency`` is an independent check.
    """
    if not model.is_relu_only():
        raise NotReluOnlyError(
            "the network has non-ReLU nonlinearities, so the LRP z-rule is not equal to "
            "input times gradient; refusing to compute it")
    arr, single = _batch(model, x)
    if not single:
        raise ValueError("lrp_z takes a single spectrum; use relevance() for batches")
    y = int(_labels(model, y, 1)[0])
    layers = model.layers
    if layers[-1].kind == "softmax":
        layers = layers[:-1]
    acts = []  # input of every layer
    h = arr.reshape(1, 1, -1) * model.input_scale
    outs = []
    for spec, p in zip(layers, model.params):
        acts.append(h)
        if spec.kind == "relu":
            h = np.maximum(h, 0.0)
        elif spec.kind == "residual-add":
            h = h + outs[spec.source]
        else:
            h = _linear_forward(spec, p, h)
        outs.append(h)
    z = h.reshape(-1)
    R = np.zeros((1, z.size))
    R[0, y] = z[y]
    R = R.reshape(h.shape)
    pending = {}
    for i in range(len(layers) - 1, -1, -1):
        spec, p, a = layers[i], model.params[i], acts[i]
        if i in pending:
            R = R + pending.pop(i)
        if spec.kind == "relu":
            continue  # inactive units hold zero relevance already
        if spec.kind == "residual-add":
            s = _ratio(R, outs[i])
            src = spec.source
            pending[src] = pending.get(src, 0.0) + outs[src] * s
            R = a * s
            continue
        R = a * _linear_adjoint(spec, p, _ratio(R, outs[i]), a)
    return RelevanceMap(R.reshape(-1), y, "logit")


def softmax_relevance(model, x, y=0):
    """Relevance with respect to the softmax probability of class ``y`` (two classes)."""
    if model.n_classes != 2:
        raise ValueError("softmax relevance relation is defined for two classes")
    vals = relevance(model, x, y, "softmax")
    if vals.ndim == 1:
        return RelevanceMap(vals, int(y), "softmax")
    return vals


def softmax_gradient_pair(model, x):
    """``grad_x p_1`` by autodiff and by ``p_1 (1 - p_1) (grad z_1 - grad z_2)``.

    Here ``p_1`` is the probability of class index 0. Returns both arrays.
    """
    if model.n_classes != 2:
        raise ValueError("the relation holds for two classes")
    arr, single = _batch(model, x)
    B = arr.shape[0]
    tape = ad.Tape()
    xin = tape.input(arr)
    gp, z = score_gradient_graph(model, xin, np.zeros(B, dtype=np.int64), mode="softmax")
    g1, _ = score_gradient_graph(model, xin, np.zeros(B, dtype=np.int64), mode="logit")
    g2, _ = score_gradient_graph(model, xin, np.ones(B, dtype=np.int64), mode="logit")
    zz = z.data
    p1 = 1.0 / (1.0 + np.exp(zz[:, 1] - zz[:, 0]))
    formula = (p1 * (1.0 - p1))[:, None] * (g1.data - g2.data)
    if single:
        return gp.data[0], formula[0]
    return gp.data, formula


def mean_relevance(model, X, y, mode="logit", chunk=256):
    """Mean relevance map over the spectra ``X`` for class ``y``."""
    arr = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if arr.shape[0] == 0:
        raise ValueError("cannot average relevance over an empty subset")
    total = np.zeros(model.n_inputs)
    for i in range(0, arr.shape[0], chunk):
        total += relevance(model, arr[i:i + chunk], y, mode).reshape(-1, model.n_inputs).sum(axis=0)
    return RelevanceMap(total / arr.shape[0], int(y), mode)


def cosine_similarity(u, v):
    u = np.asarray(getattr(u, "values", u), dtype=np.float64).ravel()
    v = np.asarray(getattr(v, "values", v), dtype=np.float64).ravel()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def relevance_sparsity(rho, tau=0.01):
    """Fraction of bins with ``|rho_i| > tau * max |rho|`` (0 for an all-zero map)."""
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    r = np.abs(np.asarray(getattr(rho, "values", rho), dtype=np.float64)).ravel()
    m = r.max() if r.size else 0.0
    if m == 0:
        return 0.0
    return float(np.count_nonzero(r > tau * m) / r.size)
