"""Dense feed-forward heads with hand-written backprop, L2 penalty and Adam.

Weights are stored ``(out, in)``; batched inputs are ``(n, in)`` rows.
Hidden layers use a rectifier, the scalar output layer is linear.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_HIDDEN = (64, 32, 16, 8)
ACTIVATIONS = ("relu", "identity")
FORMAT_VERSION = "jima-mlp/1"


class StaleCacheError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError(f"inconsistent layer shapes {self.weights.shape}, {self.bias.shape}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class Mlp:
    layers: list[DenseLayer]
    version: int = 0

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer widths do not chain: {a.out_dim} -> {b.in_dim}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[np.ndarray]:
        """Flat list ``[W0, b0, W1, b1, ...]`` of the live parameter arrays."""
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.bias]
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def mark_updated(self) -> None:
        self.version += 1


@dataclass
class ForwardCache:
    net_id: int
    version: int
    # inputs to each layer followed by the final output
    activations: list[np.ndarray]
    # pre-activation of each layer
    preacts: list[np.ndarray]
    batched: bool


@dataclass
class MlpGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def init_mlp(
    input_dim: int,
    hidden: Sequence[int] = DEFAULT_HIDDEN,
    rng: np.random.Generator | None = None,
) -> Mlp:
    """Glorot-uniform weights, zero biases, rectifier hidden layers, linear output."""
    rng = rng if rng is not None else np.random.default_rng()
    widths = [input_dim, *hidden, 1]
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        act = "identity" if i == len(widths) - 2 else "relu"
        layers.append(
            DenseLayer(rng.uniform(-limit, limit, size=(fan_out, fan_in)), np.zeros(fan_out), act)
        )
    return Mlp(layers)


def default_param_count(input_dim: int, hidden: Sequence[int] = DEFAULT_HIDDEN) -> int:
    widths = [input_dim, *hidden, 1]
    return sum(a * b + b for a, b in zip(widths, widths[1:]))


def mlp_forward(
    net: Mlp, x: np.ndarray, check_finite: bool = True
) -> tuple[np.ndarray | float, ForwardCache]:
    """Run the head on one input vector (returns a float) or on ``(n, d)`` rows."""
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    a = x if batched else x[None, :]
    if a.shape[1] != net.input_dim:
        raise ValueError(f"input has {a.shape[1]} features, head expects {net.input_dim}")
    if check_finite and not np.all(np.isfinite(a)):
        raise NonFiniteError("non-finite head input")
    acts, pre = [a], []
    for layer in net.layers:
        z = a @ layer.weights.T + layer.bias
        a = np.maximum(z, 0.0) if layer.activation == "relu" else z
        pre.append(z)
        acts.append(a)
    out = a[:, 0]
    cache = ForwardCache(id(net), net.version, acts, pre, batched)
    return (out if batched else float(out[0])), cache


def mlp_backward(net: Mlp, cache: ForwardCache, upstream_grad) -> MlpGrads:
    """Gradients of ``sum(upstream_grad * output)`` w.r.t. all parameters and the input."""
    if cache.net_id != id(net) or cache.version != net.version:
        raise StaleCacheError("forward cache does not belong to the current network state")
    g = np.asarray(upstream_grad, dtype=np.float64).reshape(-1, 1)
    n = cache.activations[0].shape[0]
    if g.shape[0] != n:
        raise ValueError(f"upstream grad has {g.shape[0]} rows, cache has {n}")
    gw: list[np.ndarray] = [None] * len(net.layers)  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * len(net.layers)  # type: ignore[list-item]
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if layer.activation == "relu":
            g = g * (cache.preacts[i] > 0)
        gw[i] = g.T @ cache.activations[i]
        gb[i] = g.sum(axis=0)
        g = g @ layer.weights
    gin = g if cache.batched else g[0]
    return MlpGrads(gw, gb, gin)


def l2_penalty(net: Mlp, lam: float) -> tuple[float, list[np.ndarray]]:
    """``lam * sum(theta**2)`` over all weights and biases, with its gradient."""
    if lam < 0:
        raise ValueError(f"penalty weight must be non-negative, got {lam}")
    params = net.parameters()
    pen = lam * sum(float(np.sum(p * p)) for p in params)
    return pen, [2.0 * lam * p for p in params]


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0


def adam_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState
) -> tuple[Sequence[np.ndarray], AdamState]:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient in Adam step")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


def mlp_to_dict(net: Mlp) -> dict:
    return {
        "format": FORMAT_VERSION,
        "layers": [
            {
                "shape": list(layer.weights.shape),
                "activation": layer.activation,
                "weights": layer.weights.ravel(order="C").tolist(),
                "bias": layer.bias.tolist(),
            }
            for layer in net.layers
        ],
    }


def mlp_from_dict(d: dict) -> Mlp:
    if d.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported head format {d.get('format')!r}")
    layers = [
        DenseLayer(
            np.asarray(ld["weights"], dtype=np.float64).reshape(ld["shape"]),
            np.asarray(ld["bias"], dtype=np.float64),
            ld["activation"],
        )
        for ld in d["layers"]
    ]
    return Mlp(layers)


def mlp_dumps(net: Mlp) -> str:
    return json.dumps(mlp_to_dict(net))


def mlp_loads(s: str) -> Mlp:
    return mlp_from_dict(json.loads(s))
