"""Spectra, layer specifications and the IsotopeNet-lite classifier."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad

LAYER_KINDS = ("conv", "locally-connected", "dense", "relu", "tanh", "residual-add", "softmax")
CHECKPOINT_FORMAT = "drrspec-checkpoint"


@dataclass
class Spectrum:
    intensities: np.ndarray
    mz_start: float = 800.0
    mz_step: float = 0.6

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=np.float64)

    @property
    def mz(self):
        return self.mz_start + self.mz_step * np.arange(self.intensities.size)

    def __len__(self):
        return self.intensities.size


def tic_normalize(x):
    """Scale intensities to unit total ion count.

    Accepts a :class:`Spectrum`, a 1-d array, or a 2-d array of spectra
    (normalized row-wise). Raises ``ValueError`` on a zero-sum spectrum.
    """
    if isinstance(x, Spectrum):
        return replace(x, intensities=tic_normalize(x.intensities))
    arr = np.asarray(x, dtype=np.float64)
    tic = arr.sum(axis=-1, keepdims=True)
    if np.any(tic <= 0) or not np.all(np.isfinite(tic)):
        raise ValueError("cannot TIC-normalize a spectrum with non-positive total ion count")
    return arr / tic


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class LayerSpec:
    kind: str
    width: int | None = None
    filters: int | None = None
    stride: int = 1
    padding: str = "same"
    source: int | None = None  # residual-add: index of the layer whose output is added

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv":
            if self.width is None or self.filters is None:
                raise ValueError("conv layer needs width and filters")
            if self.padding == "same" and self.width % 2 == 0:
                raise ValueError("same-padded conv needs an odd kernel width")
            if self.stride != 1:
                raise ValueError("conv layers support stride 1 only")
        if self.kind == "locally-connected":
            if self.width is None or self.filters is None or self.stride < 1:
                raise ValueError("locally-connected layer needs width, filters and stride >= 1")
        if self.kind == "dense" and self.filters is None:
            raise ValueError("dense layer needs filters (output units)")
        if self.kind == "residual-add" and self.source is None:
            raise ValueError("residual-add needs a source layer index")


def output_shapes(layers, n_inputs):
    """(channels, length) after each layer, starting from a 1-channel input.

    Dense layers report ``(units, 1)``.
    """
    shapes = []
    ch, length = 1, n_inputs
    for i, spec in enumerate(layers):
        if spec.kind == "conv":
            pad = (spec.width - 1) // 2 if spec.padding == "same" else 0
            length = length + 2 * pad - spec.width + 1
            ch = spec.filters
        elif spec.kind == "locally-connected":
            if length < spec.width:
                raise ValueError(f"layer {i}: input length {length} shorter than width {spec.width}")
            length = (length - spec.width) // spec.stride + 1
            ch = spec.filters
        elif spec.kind == "dense":
            ch, length = spec.filters, 1
        elif spec.kind == "residual-add":
            if not 0 <= spec.source < i or shapes[spec.source] != (ch, length):
                raise ValueError(f"layer {i}: residual source {spec.source} has an incompatible shape")
        if length < 1:
            raise ValueError(f"layer {i} ({spec.kind}) produces an empty output")
        shapes.append((ch, length))
    return shapes


def receptive_field(layers):
    """Receptive field in bins of the leading run of conv/relu layers."""
    rf = 1
    for spec in layers:
        if spec.kind == "conv":
            rf += spec.width - 1
        elif spec.kind in ("relu", "tanh"):
            continue
        else:
            break
    return rf


@dataclass
class ModelParams:
    layers: list
    params: list  # per layer: None or {"W": array, "b": array}
    n_inputs: int
    n_classes: int
    input_scale: float = 1.0
    seed: int | None = None
    bin_width: float | None = None

    def __post_init__(self):
        shapes = output_shapes(self.layers, self.n_inputs)
        expected = self.param_shapes()
        if len(self.params) != len(self.layers):
            raise ValueError("params must have one entry per layer")
        for i, (p, exp) in enumerate(zip(self.params, expected)):
            if exp is None:
                if p is not None:
                    raise ValueError(f"layer {i} ({self.layers[i].kind}) takes no parameters")
                continue
            for name in ("W", "b"):
                if np.shape(p[name]) != exp[name]:
                    raise ValueError(f"layer {i} {name}: shape {np.shape(p[name])}, "
                                     f"expected {exp[name]}")
        logits = [i for i, s in enumerate(self.layers) if s.kind != "softmax"]
        if not logits or shapes[logits[-1]][0] * shapes[logits[-1]][1] != self.n_classes:
            raise ValueError("network output size does not match the class count")

    def param_shapes(self):
        shapes = output_shapes(self.layers, self.n_inputs)
        out = []
        ch, length = 1, self.n_inputs
        for spec, (och, olen) in zip(self.layers, shapes):
            if spec.kind == "conv":
                out.append({"W": (spec.filters, ch, spec.width), "b": (spec.filters,)})
            elif spec.kind == "locally-connected":
                out.append({"W": (olen, spec.filters, ch, spec.width), "b": (spec.filters, olen)})
            elif spec.kind == "dense":
                out.append({"W": (spec.filters, ch * length), "b": (spec.filters,)})
            else:
                out.append(None)
            ch, length = och, olen
        return out

    def arrays(self):
        """Flat list of parameter arrays in canonical (layer, W, b) order."""
        return [p[name] for p in self.params if p is not None for name in ("W", "b")]

    def with_arrays(self, arrays):
        it = iter(arrays)
        params = []
        for p in self.params:
            if p is None:
                params.append(None)
            else:
                params.append({"W": np.array(next(it), dtype=np.float64),
                               "b": np.array(next(it), dtype=np.float64)})
        return replace(self, params=params)

    @property
    def n_params(self):
        return int(sum(a.size for a in self.arrays()))

    def is_relu_only(self):
        """True when every nonlinearity before the output is a ReLU.

        A terminal softmax head is allowed; logits are taken before it.
        """
        body = self.layers[:-1] if self.layers and self.layers[-1].kind == "softmax" else self.layers
        return all(s.kind not in ("tanh", "softmax") for s in body)

    def describe(self):
        shapes = output_shapes(self.layers, self.n_inputs)
        lines = [f"input: 1 x {self.n_inputs} (scale {self.input_scale:g})"]
        for i, (s, (ch, length)) in enumerate(zip(self.layers, shapes)):
            extra = ""
            if s.kind in ("conv", "locally-connected"):
                extra = f" width={s.width} stride={s.stride}"
            lines.append(f"{i:2d} {s.kind:<18} -> {ch} x {length}{extra}")
        lines.append(f"receptive field (conv stack): {receptive_field(self.layers)} bins")
        lines.append(f"ReLU-only: {self.is_relu_only()}; parameters: {self.n_params}")
        return "\n".join(lines)


def init_params(layers, n_inputs, rng):
    """Uniform fan-in initialization ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``, zero biases."""
    params = []
    ch, length = 1, n_inputs
    for spec, (och, olen) in zip(layers, output_shapes(layers, n_inputs)):
        if spec.kind == "conv":
            fan_in = ch * spec.width
            shape = (spec.filters, ch, spec.width)
            b = np.zeros(spec.filters)
        elif spec.kind == "locally-connected":
            fan_in = ch * spec.width
            shape = (olen, spec.filters, ch, spec.width)
            b = np.zeros((spec.filters, olen))
        elif spec.kind == "dense":
            fan_in = ch * length
            shape = (spec.filters, fan_in)
            b = np.zeros(spec.filters)
        else:
            params.append(None)
            ch, length = och, olen
            continue
        bound = math.sqrt(6.0 / fan_in)
        params.append({"W": rng.uniform(-bound, bound, size=shape), "b": b})
        ch, length = och, olen
    return params


def build_isotopenet_lite(n_inputs, n_classes=2, bin_width=0.6, seed=0,
                          envelope_da=5.0, conv_filters=(8, 4), lc_filters=4,
                          lc_width=8, lc_stride=8):
    """Scaled-down IsotopeNet: two convs covering an isotopic envelope, a strided
    locally-connected layer and a dense read-out. ReLU nonlinearities only."""
    if n_inputs < 256:
        raise ValueError("IsotopeNet-lite needs at least 256 input bins")
    if bin_width <= 0:
        raise ValueError("bin width must be positive")
    rf_target = math.ceil(round(envelope_da / bin_width, 9))
    width = max(3, math.ceil((rf_target + 1) / 2))
    if width % 2 == 0:
        width += 1
    if 2 * width - 1 > n_inputs:
        raise ValueError(f"input of {n_inputs} bins cannot hold a {rf_target}-bin receptive field")
    layers = [
        LayerSpec("conv", width=width, filters=conv_filters[0]),
        LayerSpec("relu"),
        LayerSpec("conv", width=width, filters=conv_filters[1]),
        LayerSpec("relu"),
        LayerSpec("locally-connected", width=lc_width, filters=lc_filters, stride=lc_stride,
                  padding="valid"),
        LayerSpec("relu"),
        LayerSpec("dense", filters=n_classes),
    ]
    rng = np.random.default_rng(seed)
    return ModelParams(layers, init_params(layers, n_inputs, rng), n_inputs, n_classes,
                       input_scale=float(n_inputs), seed=seed, bin_width=bin_width)


def logits_graph(model, x, params=None):
    """Logits of a batch ``x`` (shape ``(B, n)``) as a tape Value.

    ``params`` is a flat list of Values in :meth:`ModelParams.arrays` order;
    constants are used when omitted.
    """
    if params is None:
        params = [ad.constant(a) for a in model.arrays()]
    if x.ndim != 2 or x.shape[1] != model.n_inputs:
        raise ValueError(f"expected input of shape (batch, {model.n_inputs}), got {x.shape}")
    B = x.shape[0]
    h = ad.reshape(x, (B, 1, model.n_inputs))
    if model.input_scale != 1.0:
        h = ad.mul(h, model.input_scale)
    outputs = []
    pi = 0
    for spec in model.layers:
        if spec.kind == "conv":
            W, b = params[pi], params[pi + 1]
            pi += 2
            pad = (spec.width - 1) // 2 if spec.padding == "same" else 0
            h = ad.add(ad.conv1d(h, W, pad), ad.reshape(b, (1, spec.filters, 1)))
        elif spec.kind == "locally-connected":
            W, b = params[pi], params[pi + 1]
            pi += 2
            h = ad.add(ad.locally_connected(h, W, spec.stride),
                       ad.reshape(b, (1,) + tuple(b.shape)))
        elif spec.kind == "dense":
            W, b = params[pi], params[pi + 1]
            pi += 2
            flat = ad.reshape(h, (B, -1)) if h.ndim != 2 else h
            h = ad.add(ad.matmul(flat, ad.transpose(W)), ad.reshape(b, (1, spec.filters)))
        elif spec.kind == "relu":
            h = ad.relu(h)
        elif spec.kind == "tanh":
            h = ad.tanh(h)
        elif spec.kind == "residual-add":
            h = ad.add(h, outputs[spec.source])
        elif spec.kind == "softmax":
            if spec is not model.layers[-1]:
                h = ad.softmax(ad.reshape(h, (B, -1)))
        outputs.append(h)
    return ad.reshape(h, (B, model.n_classes))


def _as_batch(model, x):
    if isinstance(x, Spectrum):
        x = x.intensities
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.ndim != 2 or arr.shape[1] != model.n_inputs:
        raise ValueError(f"spectrum length {arr.shape[-1]} does not match model input "
                         f"length {model.n_inputs}")
    return arr, single


def predict_logits(model, x, chunk=256):
    """Logit vector for one spectrum, or a ``(B, C)`` array for a batch."""
    arr, single = _as_batch(model, x)
    consts = [ad.constant(a) for a in model.arrays()]
    out = [logits_graph(model, ad.constant(arr[i:i + chunk]), consts).data
           for i in range(0, arr.shape[0], chunk)]
    z = np.concatenate(out, axis=0) if out else np.zeros((0, model.n_classes))
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite logits")
    return z[0] if single else z


def classify(model, x):
    """Index of the largest logit; ties go to the lowest index."""
    z = predict_logits(model, x)
    return np.argmax(z, axis=-1)


def predict_proba(model, x):
    return softmax(predict_logits(model, x))


# ---------------------------------------------------------------- checkpoints


def _encode_array(a):
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _decode_array(d):
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def checkpoint_dict(model, metadata=None):
    return {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "architecture": {
            "layers": [asdict(s) for s in model.layers],
            "n_inputs": model.n_inputs,
            "n_classes": model.n_classes,
            "input_scale": model.input_scale,
            "bin_width": model.bin_width,
        },
        "seed": model.seed,
        "params": [None if p is None else {k: _encode_array(p[k]) for k in ("W", "b")}
                   for p in model.params],
        "metadata": metadata or {},
    }


def save_checkpoint(path, model, metadata=None):
    """Write a JSON checkpoint; float values round-trip bit-exactly."""
    text = json.dumps(checkpoint_dict(model, metadata), sort_keys=True, separators=(",", ":"))
    Path(path).write_text(text)


def model_from_dict(d):
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a drrspec checkpoint")
    arch = d["architecture"]
    layers = [LayerSpec(**s) for s in arch["layers"]]
    params = [None if p is None else {k: _decode_array(p[k]) for k in ("W", "b")}
              for p in d["params"]]
    return ModelParams(layers, params, arch["n_inputs"], arch["n_classes"],
                       input_scale=arch["input_scale"], seed=d.get("seed"),
                       bin_width=arch.get("bin_width"))


def load_checkpoint(path):
    """Return ``(model, metadata)``."""
    d = json.loads(Path(path).read_text())
    return model_from_dict(d), d.get("metadata", {})
