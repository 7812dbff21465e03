"""Dense feed-forward networks with hand-rolled reverse-mode gradients and Adam.

Networks are immutable value objects: a list of affine layers with a ReLU or
identity activation each. All arithmetic is 64-bit. No ML framework is used.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

RELU = "relu"
IDENTITY = "id"
_ACTS = (RELU, IDENTITY)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class Layer:
    """One affine layer y = act(A x + b); A has shape (fan_out, fan_in)."""

    A: np.ndarray
    b: np.ndarray
    act: str

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if A.ndim != 2:
            raise ValueError(f"layer matrix must be 2-D, got shape {A.shape}")
        if b.shape != (A.shape[0],):
            raise ValueError(f"bias shape {b.shape} does not match matrix rows {A.shape[0]}")
        if self.act not in _ACTS:
            raise ValueError(f"unknown activation {self.act!r}")
        if not (np.isfinite(A).all() and np.isfinite(b).all()):
            raise ValueError("layer parameters must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)


@dataclass(frozen=True)
class Network:
    """Feed-forward network; the final layer must have the identity activation."""

    layers: tuple[Layer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("network needs at least one layer")
        for prev, cur in zip(layers, layers[1:]):
            if cur.A.shape[1] != prev.A.shape[0]:
                raise ValueError(
                    f"layer shapes do not chain: {prev.A.shape} -> {cur.A.shape}"
                )
        if layers[-1].act != IDENTITY:
            raise ValueError("final layer activation must be the identity")
        object.__setattr__(self, "layers", layers)

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.layers[0].A.shape[1],) + tuple(l.A.shape[0] for l in self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].A.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].A.shape[0]

    def parameter_count(self) -> int:
        return sum(l.A.size + l.b.size for l in self.layers)


@dataclass
class Gradients:
    """Per-layer parameter gradients mirroring Network shapes, plus the input
    gradient dx (needed to chain losses through dynamics into the policy)."""

    dA: list[np.ndarray]
    db: list[np.ndarray]
    dx: np.ndarray

    def scaled(self, c: float) -> "Gradients":
        return Gradients([c * g for g in self.dA], [c * g for g in self.db], c * self.dx)

    def add_(self, other: "Gradients") -> "Gradients":
        for mine, theirs in zip(self.dA, other.dA):
            mine += theirs
        for mine, theirs in zip(self.db, other.db):
            mine += theirs
        return self


def zero_gradients(net: Network) -> Gradients:
    return Gradients(
        [np.zeros_like(l.A) for l in net.layers],
        [np.zeros_like(l.b) for l in net.layers],
        np.zeros(net.in_dim),
    )


def make_network(mats, biases, acts) -> Network:
    return Network(tuple(Layer(A, b, a) for A, b, a in zip(mats, biases, acts)))


def mlp(dims, rng: np.random.Generator, out_bias: float = 0.0) -> Network:
    """Fresh ReLU MLP with the given layer widths, identity output layer.

    Weights are uniform in +-sqrt(6/(fan_in+fan_out)), deterministic for a
    given generator state. out_bias is added to the final bias so a certificate
    can start slightly positive.
    """
    dims = list(dims)
    if len(dims) < 2:
        raise ValueError("need input and output dims")
    layers = []
    for k in range(len(dims) - 1):
        fan_in, fan_out = dims[k], dims[k + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        A = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = np.zeros(fan_out)
        act = IDENTITY if k == len(dims) - 2 else RELU
        layers.append(Layer(A, b, act))
    if out_bias != 0.0:
        last = layers[-1]
        layers[-1] = Layer(last.A, last.b + out_bias, last.act)
    return Network(tuple(layers))


def _as_batch(x: np.ndarray, dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise ValueError(f"input dim {x.shape[0]} != network input {dim}")
        return x[None, :], True
    if x.ndim == 2:
        if x.shape[1] != dim:
            raise ValueError(f"input dim {x.shape[1]} != network input {dim}")
        return x, False
    raise ValueError(f"input must be 1-D or 2-D, got shape {x.shape}")


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    """Evaluate the network; accepts a single point (m0,) or a batch (B, m0)."""
    h, single = _as_batch(x, net.in_dim)
    for layer in net.layers:
        h = h @ layer.A.T + layer.b
        if layer.act == RELU:
            h = np.maximum(h, 0.0)
    return h[0] if single else h


def forward_trace(net: Network, x: np.ndarray) -> list[np.ndarray]:
    """Post-activation values per layer (index 0 is the input batch)."""
    h, _ = _as_batch(x, net.in_dim)
    trace = [h]
    for layer in net.layers:
        h = h @ layer.A.T + layer.b
        if layer.act == RELU:
            h = np.maximum(h, 0.0)
        trace.append(h)
    return trace


def backward(net: Network, x: np.ndarray, upstream: np.ndarray) -> Gradients:
    """Reverse accumulation of d(sum_batch upstream . net(x))/d(params).

    The ReLU subgradient at exactly 0 is 0. Batched inputs sum their
    contributions into the parameter gradients; dx keeps per-row gradients.
    """
    xb, single = _as_batch(x, net.in_dim)
    trace = forward_trace(net, xb)
    delta = np.asarray(upstream, dtype=np.float64)
    if single and delta.ndim == 1:
        delta = delta[None, :]
    if delta.shape != trace[-1].shape:
        raise ValueError(f"upstream shape {delta.shape} != output shape {trace[-1].shape}")
    dA: list[np.ndarray] = [None] * len(net.layers)  # type: ignore[list-item]
    db: list[np.ndarray] = [None] * len(net.layers)  # type: ignore[list-item]
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        if layer.act == RELU:
            delta = delta * (trace[k + 1] > 0.0)
        dA[k] = delta.T @ trace[k]
        db[k] = delta.sum(axis=0)
        delta = delta @ layer.A
    dx = delta[0] if single else delta
    return Gradients(dA, db, dx)


@dataclass
class AdamState:
    """Adam moment accumulators for one network; single-writer."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    mA: list[np.ndarray] = field(default_factory=list)
    vA: list[np.ndarray] = field(default_factory=list)
    mb: list[np.ndarray] = field(default_factory=list)
    vb: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_network(cls, net: Network, lr: float, **kw) -> "AdamState":
        st = cls(lr=lr, **kw)
        st.mA = [np.zeros_like(l.A) for l in net.layers]
        st.vA = [np.zeros_like(l.A) for l in net.layers]
        st.mb = [np.zeros_like(l.b) for l in net.layers]
        st.vb = [np.zeros_like(l.b) for l in net.layers]
        return st


def adam_step(net: Network, grads: Gradients, state: AdamState) -> Network:
    """One bias-corrected Adam update; advances state, returns the new network."""
    if len(grads.dA) != len(net.layers):
        raise ValueError("gradient/layer count mismatch")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    new_layers = []
    for k, layer in enumerate(net.layers):
        state.mA[k] = b1 * state.mA[k] + (1 - b1) * grads.dA[k]
        state.vA[k] = b2 * state.vA[k] + (1 - b2) * grads.dA[k] ** 2
        state.mb[k] = b1 * state.mb[k] + (1 - b1) * grads.db[k]
        state.vb[k] = b2 * state.vb[k] + (1 - b2) * grads.db[k] ** 2
        A = layer.A - state.lr * (state.mA[k] / c1) / (np.sqrt(state.vA[k] / c2) + state.eps)
        b = layer.b - state.lr * (state.mb[k] / c1) / (np.sqrt(state.vb[k] / c2) + state.eps)
        new_layers.append(Layer(A, b, layer.act))
    return Network(tuple(new_layers))


def _hex_matrix(M: np.ndarray):
    return [[float(v).hex() for v in row] for row in M]


def _unhex_matrix(rows) -> np.ndarray:
    return np.array([[float.fromhex(v) for v in row] for row in rows], dtype=np.float64)


def to_json(net: Network) -> str:
    """Versioned JSON document; float64 entries as hex strings, bit-exact."""
    doc = {
        "version": FORMAT_VERSION,
        "dims": list(net.dims),
        "layers": [
            {"A": _hex_matrix(l.A), "b": [float(v).hex() for v in l.b], "act": l.act}
            for l in net.layers
        ],
    }
    return json.dumps(doc)


def from_json(text: str) -> Network:
    doc = json.loads(text)
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported network format version {doc.get('version')!r}")
    layers = []
    for spec in doc["layers"]:
        A = _unhex_matrix(spec["A"])
        b = np.array([float.fromhex(v) for v in spec["b"]], dtype=np.float64)
        layers.append(Layer(A, b, spec["act"]))
    net = Network(tuple(layers))
    if list(net.dims) != list(doc["dims"]):
        raise ValueError("declared dims do not match layer shapes")
    return net


def save(net: Network, path) -> None:
    with open(path, "w") as fh:
        fh.write(to_json(net))


def load(path) -> Network:
    with open(path) as fh:
        return from_json(fh.read())
