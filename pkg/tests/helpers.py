"""Small models and a loop-based forward pass used as an oracle in tests."""

import numpy as np

from drrspec.model import LayerSpec, ModelParams, init_params


def tiny_layers(conv_width=3, conv_filters=3, lc_width=8, lc_stride=8, lc_filters=2,
                n_classes=2, act="relu"):
    return [
        LayerSpec("conv", width=conv_width, filters=conv_filters),
        LayerSpec(act),
        LayerSpec("locally-connected", width=lc_width, filters=lc_filters, stride=lc_stride,
                  padding="valid"),
        LayerSpec(act),
        LayerSpec("dense", filters=n_classes),
    ]


def tiny_model(n=64, seed=0, bias_scale=0.1, input_scale=1.0, **kw):
    rng = np.random.default_rng(seed)
    layers = tiny_layers(**kw)
    params = init_params(layers, n, rng)
    for p in params:
        if p is not None:
            p["b"] = rng.normal(0.0, bias_scale, size=p["b"].shape)
    return ModelParams(layers, params, n, layers[-1].filters, input_scale=input_scale, seed=seed)


def reference_logits(model, x):
    """Direct loop evaluation of the layer arithmetic, one spectrum at a time."""
    x = np.asarray(x, dtype=np.float64)
    h = (x * model.input_scale)[None, :]  # (channels, length)
    for spec, p in zip(model.layers, model.params):
        if spec.kind == "conv":
            W, b = p["W"], p["b"]
            Co, Ci, w = W.shape
            pad = (w - 1) // 2 if spec.padding == "same" else 0
            L = h.shape[1]
            out = np.zeros((Co, L + 2 * pad - w + 1))
            for o in range(Co):
                for t in range(out.shape[1]):
                    s = b[o]
                    for c in range(Ci):
                        for j in range(w):
                            src = t + j - pad
                            if 0 <= src < L:
                                s += W[o, c, j] * h[c, src]
                    out[o, t] = s
            h = out
        elif spec.kind == "locally-connected":
            W, b = p["W"], p["b"]
            Lo, Co, Ci, w = W.shape
            out = np.zeros((Co, Lo))
            for l in range(Lo):
                for o in range(Co):
                    out[o, l] = b[o, l] + sum(W[l, o, c, j] * h[c, l * spec.stride + j]
                                              for c in range(Ci) for j in range(w))
            h = out
        elif spec.kind == "dense":
            flat = h.reshape(-1)
            h = (p["W"] @ flat + p["b"])[:, None]
        elif spec.kind == "relu":
            h = np.maximum(h, 0.0)
        elif spec.kind == "tanh":
            h = np.tanh(h)
    return h.reshape(-1)
