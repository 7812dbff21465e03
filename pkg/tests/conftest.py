"""Shared fixtures and oracles for the test suite."""

import numpy as np
import pytest

from reachcert import nets


def random_net(rng, dims=None, max_hidden=3, max_width=6):
    """Small random ReLU net for property tests."""
    if dims is None:
        n_hidden = int(rng.integers(1, max_hidden + 1))
        dims = [int(rng.integers(1, max_width + 1))]
        dims += [int(rng.integers(1, max_width + 1)) for _ in range(n_hidden)]
        dims += [int(rng.integers(1, max_width + 1))]
    layers = []
    for k in range(len(dims) - 1):
        A = rng.normal(size=(dims[k + 1], dims[k]))
        b = rng.normal(size=dims[k + 1])
        act = nets.IDENTITY if k == len(dims) - 2 else nets.RELU
        layers.append(nets.Layer(A, b, act))
    return nets.Network(tuple(layers))


def finite_difference_param_grads(net, x, upstream, h=1e-4):
    """Central-difference oracle for d(upstream . net(x))/d(params)."""

    def objective(candidate):
        return float(np.dot(np.asarray(upstream), nets.forward(candidate, x)))

    dA, db = [], []
    for k, layer in enumerate(net.layers):
        gA = np.zeros_like(layer.A)
        for idx in np.ndindex(layer.A.shape):
            Ap = layer.A.copy()
            Ap[idx] += h
            Am = layer.A.copy()
            Am[idx] -= h
            up = _with_layer(net, k, nets.Layer(Ap, layer.b, layer.act))
            dn = _with_layer(net, k, nets.Layer(Am, layer.b, layer.act))
            gA[idx] = (objective(up) - objective(dn)) / (2 * h)
        gb = np.zeros_like(layer.b)
        for i in range(layer.b.shape[0]):
            bp = layer.b.copy()
            bp[i] += h
            bm = layer.b.copy()
            bm[i] -= h
            up = _with_layer(net, k, nets.Layer(layer.A, bp, layer.act))
            dn = _with_layer(net, k, nets.Layer(layer.A, bm, layer.act))
            gb[i] = (objective(up) - objective(dn)) / (2 * h)
        dA.append(gA)
        db.append(gb)
    return dA, db


def _with_layer(net, k, layer):
    layers = list(net.layers)
    layers[k] = layer
    return nets.Network(tuple(layers))


def preactivations(net, x):
    """All pre-activation values along the forward pass (for kink avoidance)."""
    h = np.asarray(x, dtype=np.float64)
    out = []
    for layer in net.layers:
        z = layer.A @ h + layer.b
        out.append(z)
        h = np.maximum(z, 0.0) if layer.act == nets.RELU else z
    return out


def away_from_kinks(net, x, margin=1e-3):
    return all(np.abs(z).min() > margin for z in preactivations(net, x) if z.size)


@pytest.fixture
def example_net():
    """Two-layer ReLU net used throughout the weighted-norm tests:
    A1 = [[4,-1],[-1,1]] (ReLU), A2 = [[1,2]] (identity), zero biases."""
    return nets.make_network(
        [np.array([[4.0, -1.0], [-1.0, 1.0]]), np.array([[1.0, 2.0]])],
        [np.zeros(2), np.zeros(1)],
        [nets.RELU, nets.IDENTITY],
    )
