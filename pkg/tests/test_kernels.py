import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from drrspec import kernels

compiled = pytest.mark.skipif(not kernels.compiled_available(),
                              reason="compiled kernels not built")
py = kernels.get_backend_module("numpy")


def _pair():
    return kernels.get_backend_module("cython"), py


@compiled
@given(B=st.integers(1, 3), Ci=st.integers(1, 4), Co=st.integers(1, 4), n=st.integers(3, 40),
       half=st.integers(0, 4), seed=st.integers(0, 2**31 - 1))
def test_conv_backends_agree(B, Ci, Co, n, half, seed):
    c, p = _pair()
    rng = np.random.default_rng(seed)
    w, pad = 2 * half + 1, half
    x = rng.normal(size=(B, Ci, n))
    K = rng.normal(size=(Co, Ci, w))
    y = c.conv1d_forward(x, K, pad)
    np.testing.assert_allclose(y, p.conv1d_forward(x, K, pad), rtol=1e-12, atol=1e-12)
    g = rng.normal(size=y.shape)
    np.testing.assert_allclose(c.conv1d_input_grad(g, K, pad, n),
                               p.conv1d_input_grad(g, K, pad, n), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(c.conv1d_kernel_grad(x, g, w, pad),
                               p.conv1d_kernel_grad(x, g, w, pad), rtol=1e-12, atol=1e-12)


@compiled
@given(B=st.integers(1, 3), Ci=st.integers(1, 4), Co=st.integers(1, 4), w=st.integers(1, 9),
       stride=st.integers(1, 9), L=st.integers(1, 6), extra=st.integers(0, 8),
       seed=st.integers(0, 2**31 - 1))
def test_locally_connected_backends_agree(B, Ci, Co, w, stride, L, extra, seed):
    c, p = _pair()
    rng = np.random.default_rng(seed)
    n = (L - 1) * stride + w + extra
    x = rng.normal(size=(B, Ci, n))
    W = rng.normal(size=(L, Co, Ci, w))
    y = c.lc_forward(x, W, stride)
    np.testing.assert_allclose(y, p.lc_forward(x, W, stride), rtol=1e-12, atol=1e-12)
    g = rng.normal(size=y.shape)
    np.testing.assert_allclose(c.lc_input_grad(g, W, stride, n), p.lc_input_grad(g, W, stride, n),
                               rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(c.lc_weight_grad(x, g, w, stride),
                               p.lc_weight_grad(x, g, w, stride), rtol=1e-12, atol=1e-12)


def test_conv_matches_numpy_convolve(rng):
    x = rng.normal(size=(1, 1, 30))
    K = rng.normal(size=(1, 1, 5))
    y = kernels.conv1d_forward(x, K, 2)
    # cross-correlation is convolution with the flipped kernel
    np.testing.assert_allclose(y[0, 0], np.convolve(x[0, 0], K[0, 0, ::-1], mode="same"),
                               rtol=1e-12, atol=1e-12)


def test_use_backend_switches_and_restores():
    before = kernels.BACKEND
    try:
        kernels.use_backend("numpy")
        assert kernels.BACKEND == "numpy"
        with pytest.raises(ValueError):
            kernels.use_backend("fortran")
    finally:
        if before == "cython":
            kernels.use_backend("cython")
    assert kernels.BACKEND == before


def test_environment_forces_fallback():
    env = dict(os.environ, DRRSPEC_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import drrspec; print(drrspec.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


@compiled
def test_model_gradients_identical_across_backends(rng):
    from drrspec.training import TrainConfig, objective_and_grad
    from helpers import tiny_model

    model = tiny_model(64, seed=3)
    X = np.abs(rng.normal(size=(4, 64))) / 64
    y = np.array([0, 1, 0, 1])
    cfg = TrainConfig(lambda1=1e-3, lambda2=1e-3)
    results = {}
    try:
        for name in ("numpy", "cython"):
            kernels.use_backend(name)
            results[name] = objective_and_grad(model, X, y, cfg)
    finally:
        kernels.use_backend("cython")
    assert np.isclose(results["numpy"][0], results["cython"][0], rtol=1e-12)
    for a, b in zip(results["numpy"][2], results["cython"][2]):
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-14)
