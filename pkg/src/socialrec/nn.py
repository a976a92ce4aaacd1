"""Minimal dense-network numerics.

Hand-rolled feedforward layers with explicit backward passes, an Adam
optimizer, the losses used by the training stages, and a central
finite-difference helper that the test suite uses as an independent
gradient oracle.  Hidden layers default to leaky ReLU; sigmoid appears only
where an output is a probability.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

LEAKY_SLOPE = 0.01
PROB_EPS = 1e-7

_VALID_ACTIVATIONS = ("leaky_relu", "sigmoid", "identity")


def leaky_relu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def leaky_relu_deriv(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, 1.0, LEAKY_SLOPE)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign to stay overflow-free on large |x|.
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_deriv(x: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return s * (1.0 - s)


def _activation(name: str) -> tuple[Callable, Callable]:
    if name == "leaky_relu":
        return leaky_relu, leaky_relu_deriv
    if name == "sigmoid":
        return sigmoid, sigmoid_deriv
    if name == "identity":
        return (lambda x: x), (lambda x: np.ones_like(x))
    raise ValueError(f"unknown activation '{name}'")


def softmax(z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax along the last axis; shift-invariant by construction."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(z, dtype=float) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def bce_loss(p: float, y: int) -> tuple[float, float]:
    """Binary cross-entropy of probability `p` against label `y`.

    Returns (loss, d_loss/d_p).  `p` is clamped to [eps, 1-eps] first, so the
    loss is always finite.
    """
    p = min(max(float(p), PROB_EPS), 1.0 - PROB_EPS)
    if y == 1:
        return -np.log(p), -1.0 / p
    return -np.log(1.0 - p), 1.0 / (1.0 - p)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) for two distributions over the same support.

    `q` entries are clamped to >= eps before the log, 0*log(0/q) counts as 0,
    and the result is floored at 0 to absorb rounding on near-identical
    inputs.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    for name, dist in (("p", p), ("q", q)):
        if np.any(dist < 0):
            raise ValueError(f"{name} has negative entries")
        if abs(dist.sum() - 1.0) > 1e-6:
            raise ValueError(f"{name} does not sum to 1 (sum={dist.sum()!r})")
    mask = p > 0
    terms = p[mask] * np.log(p[mask] / np.maximum(q[mask], PROB_EPS))
    return max(0.0, float(terms.sum()))


class DenseNet:
    """A stack of fully-connected layers with explicit forward/backward.

    Layer i holds weight (in, out), bias (out,) and an activation name.
    forward() accepts a single vector or a (batch, in) matrix and returns the
    output plus a cache consumed by backward().
    """

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray],
                 activations: list[str]):
        if not (len(weights) == len(biases) == len(activations)):
            raise ValueError("layer list lengths differ")
        for i, act in enumerate(activations):
            if act not in _VALID_ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation '{act}'")
        for i in range(1, len(weights)):
            if weights[i - 1].shape[1] != weights[i].shape[0]:
                raise ValueError(
                    f"layer {i - 1} output dim {weights[i - 1].shape[1]} does not "
                    f"chain into layer {i} input dim {weights[i].shape[0]}")
        self.weights = weights
        self.biases = biases
        self.activations = activations

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        h = x.reshape(1, -1) if single else x
        if h.shape[1] != self.input_dim:
            raise ValueError(f"input dim {h.shape[1]} != expected {self.input_dim}")
        cache = [("input", single)]
        for w, b, act in zip(self.weights, self.biases, self.activations):
            pre = h @ w + b
            cache.append((h, pre))
            h = _activation(act)[0](pre)
        return (h[0] if single else h), cache

    def backward(self, cache: list, d_out: np.ndarray
                 ) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
        """Backpropagate `d_out`; returns ([(dW, db) per layer], d_input)."""
        if not cache or cache[0][0] != "input" or len(cache) != len(self.weights) + 1:
            raise ValueError("cache does not match this network")
        single = cache[0][1]
        d = np.asarray(d_out, dtype=float)
        d = d.reshape(1, -1) if single else d
        if d.shape[1] != self.output_dim:
            raise ValueError(f"d_out dim {d.shape[1]} != output dim {self.output_dim}")
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            h_in, pre = cache[i + 1]
            if h_in.shape[1] != self.weights[i].shape[0]:
                raise ValueError("cache does not match this network")
            d_pre = d * _activation(self.activations[i])[1](pre)
            grads[i] = (h_in.T @ d_pre, d_pre.sum(axis=0))
            d = d_pre @ self.weights[i].T
        return grads, (d[0] if single else d)

    def params(self, prefix: str) -> dict[str, np.ndarray]:
        """Named references to every parameter tensor (shared, not copied)."""
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.{i}.weight"] = w
            out[f"{prefix}.{i}.bias"] = b
        return out

    def clone(self) -> "DenseNet":
        return DenseNet([w.copy() for w in self.weights],
                        [b.copy() for b in self.biases],
                        list(self.activations))

    def spec_string(self) -> str:
        dims = [self.input_dim] + [w.shape[1] for w in self.weights]
        return ",".join(f"{d}:{a}" for d, a in zip(dims[1:], self.activations)) + f"@{dims[0]}"


def dense_net(dims: Sequence[int], rng: np.random.Generator,
              hidden_activation: str = "leaky_relu",
              output_activation: str = "identity") -> DenseNet:
    """Build a net with the given layer widths; Glorot-uniform weights, zero biases."""
    if len(dims) < 2:
        raise ValueError("need at least input and output dims")
    weights, biases, acts = [], [], []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
        acts.append(output_activation if i == len(dims) - 2 else hidden_activation)
    return DenseNet(weights, biases, acts)


def net_from_spec(spec: str) -> DenseNet:
    """Inverse of DenseNet.spec_string(), with zero parameters (filled from a checkpoint)."""
    body, in_dim = spec.rsplit("@", 1)
    dims = [int(in_dim)]
    acts = []
    for part in body.split(","):
        d, a = part.split(":")
        dims.append(int(d))
        acts.append(a)
    weights = [np.zeros((dims[i], dims[i + 1])) for i in range(len(acts))]
    biases = [np.zeros(dims[i + 1]) for i in range(len(acts))]
    return DenseNet(weights, biases, acts)


class Adam:
    """Adam over a dict of named parameter tensors, updated in place.

    Defaults: lr 0.001, beta1 0.9, beta2 0.999, eps 1e-8.  A zero gradient
    with zero moments leaves parameters bit-identical.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {k: np.zeros_like(v) for k, v in params.items()}
        self._v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if name not in self.params:
                raise ValueError(f"unknown parameter '{name}'")
            if np.shape(g) != self.params[name].shape:
                raise ValueError(f"gradient shape {np.shape(g)} != parameter shape "
                                 f"{self.params[name].shape} for '{name}'")
        self.step_count += 1
        t = self.step_count
        for name, g in grads.items():
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            self.params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray,
                       step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f at x; the gradient oracle."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max_i |a_i - b_i| / max(1e-8, |a_i|, |b_i|) over all entries."""
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    denom = np.maximum(1e-8, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
