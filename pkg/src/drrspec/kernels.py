"""Backend selection for the bilinear layer kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``DRRSPEC_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import _kernels_py

_NAMES = (
    "conv1d_forward",
    "conv1d_input_grad",
    "conv1d_kernel_grad",
    "lc_forward",
    "lc_input_grad",
    "lc_weight_grad",
)


def _load_compiled():
    if os.environ.get("DRRSPEC_PURE_PYTHON", "") not in ("", "0"):
        return None
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


_compiled = _load_compiled()
_backend = _compiled if _compiled is not None else _kernels_py
BACKEND = "cython" if _compiled is not None else "numpy"


def compiled_available():
    return _compiled is not None


def use_backend(name):
    """Switch the active backend (``"cython"`` or ``"numpy"``) process-wide."""
    global _backend, BACKEND
    if name == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        _backend = _compiled
    elif name == "numpy":
        _backend = _kernels_py
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name


def get_backend_module(name):
    if name == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built")
        return _compiled
    return _kernels_py


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv1d_forward(x, K, pad):
    return _backend.conv1d_forward(_c(x), _c(K), int(pad))


def conv1d_input_grad(g, K, pad, n):
    return _backend.conv1d_input_grad(_c(g), _c(K), int(pad), int(n))


def conv1d_kernel_grad(x, g, w, pad):
    return _backend.conv1d_kernel_grad(_c(x), _c(g), int(w), int(pad))


def lc_forward(x, W, stride):
    return _backend.lc_forward(_c(x), _c(W), int(stride))


def lc_input_grad(g, W, stride, n):
    return _backend.lc_input_grad(_c(g), _c(W), int(stride), int(n))


def lc_weight_grad(x, g, w, stride):
    return _backend.lc_weight_grad(_c(x), _c(g), int(w), int(stride))
