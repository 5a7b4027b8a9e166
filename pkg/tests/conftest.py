import numpy as np
import pytest

from nesure.netcore import ConvLayer, Denoiser


def tiny_denoiser(shape=(1, 6, 6), features=4, depth=3, seed=0, jitter=0.1):
    """Small residual net with non-zero FiLM and bias parameters so every path is exercised."""
    model = Denoiser.build(shape, features, depth, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for v in model.params.values():
        v += jitter * rng.standard_normal(v.shape)
    return model


def golden_model():
    layers = [ConvLayer(1, 3, 3, "relu", True), ConvLayer(3, 3, 3, "relu", True), ConvLayer(3, 1, 3, "identity", False)]
    model = Denoiser(layers, (1, 8, 8), residual=True)
    rng = np.random.default_rng(2024)
    for k in sorted(model.params):
        model.params[k][...] = 0.3 * rng.standard_normal(model.params[k].shape)
    y = np.random.default_rng(7).random((1, 8, 8))
    return model, y


def fd_param_grad(model, loss_fn, h=1e-5):
    theta = model.get_vector()
    out = np.zeros_like(theta)
    for i in range(theta.size):
        t = theta.copy()
        t[i] += h
        model.set_vector(t)
        a = loss_fn()
        t[i] -= 2 * h
        model.set_vector(t)
        b = loss_fn()
        out[i] = (a - b) / (2 * h)
    model.set_vector(theta)
    return out


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
