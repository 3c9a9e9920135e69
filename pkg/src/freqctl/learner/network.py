"""Dueling Q-network in plain numpy with hand-written backpropagation.

Architecture: a ReLU trunk (``hidden_sizes``), then two linear heads on the
last hidden layer, a scalar state value ``V`` and per-action advantages
``A``. Output ``Q = V + A - mean(A)``. With no hidden layers the heads read
the input directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from freqctl.core import ContractViolation


@dataclass
class QNetwork:
    input_dim: int
    hidden_sizes: tuple[int, ...]
    n_actions: int
    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, input_dim: int, hidden_sizes, n_actions: int, seed: int = 0) -> "QNetwork":
        """Uniform init in +-1/sqrt(fan_in) for weights and biases."""
        hidden_sizes = tuple(int(h) for h in hidden_sizes)
        if input_dim < 1 or n_actions < 1 or any(h < 1 for h in hidden_sizes):
            raise ContractViolation("all layer sizes must be >= 1")
        rng = np.random.default_rng([seed, 0x1417])
        params: dict[str, np.ndarray] = {}
        for name, shape in layer_shapes(input_dim, hidden_sizes, n_actions):
            bound = 1.0 / np.sqrt(shape[0] if name.startswith("W") else _fan_in(name, input_dim, hidden_sizes))
            params[name] = rng.uniform(-bound, bound, size=shape)
        return cls(input_dim, hidden_sizes, n_actions, params)

    def copy(self) -> "QNetwork":
        return QNetwork(self.input_dim, self.hidden_sizes, self.n_actions,
                        {k: v.copy() for k, v in self.params.items()})

    @property
    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return layer_shapes(self.input_dim, self.hidden_sizes, self.n_actions)

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n, _ in self.shapes])

    def with_flat(self, vec: np.ndarray) -> "QNetwork":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ContractViolation(f"expected {self.n_params} parameters, got {vec.shape}")
        params, pos = {}, 0
        for name, shape in self.shapes:
            size = int(np.prod(shape))
            params[name] = vec[pos:pos + size].reshape(shape).copy()
            pos += size
        return QNetwork(self.input_dim, self.hidden_sizes, self.n_actions, params)

    def equals(self, other: "QNetwork") -> bool:
        """Bit-identical architecture and parameters."""
        return (self.shapes == other.shapes
                and all(np.array_equal(self.params[n], other.params[n]) for n, _ in self.shapes))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)[0]


def _fan_in(bias_name: str, input_dim: int, hidden_sizes: tuple[int, ...]) -> int:
    last = hidden_sizes[-1] if hidden_sizes else input_dim
    if bias_name in ("bV", "bA"):
        return last
    i = int(bias_name[1:])
    return hidden_sizes[i - 1] if i > 0 else input_dim


def layer_shapes(input_dim: int, hidden_sizes, n_actions: int) -> list[tuple[str, tuple[int, ...]]]:
    shapes = []
    prev = input_dim
    for i, h in enumerate(hidden_sizes):
        shapes += [(f"W{i}", (prev, h)), (f"b{i}", (h,))]
        prev = h
    shapes += [("WV", (prev, 1)), ("bV", (1,)), ("WA", (prev, n_actions)), ("bA", (n_actions,))]
    return shapes


def forward(net: QNetwork, x: np.ndarray) -> tuple[np.ndarray, dict]:
    """Q-values for a batch (or a single vector) of inputs, plus a cache for ``backward``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ContractViolation(f"expected inputs of width {net.input_dim}, got shape {x.shape}")
    acts = [x]
    h = x
    for i in range(len(net.hidden_sizes)):
        h = np.maximum(h @ net.params[f"W{i}"] + net.params[f"b{i}"], 0.0)
        acts.append(h)
    v = h @ net.params["WV"] + net.params["bV"]
    a = h @ net.params["WA"] + net.params["bA"]
    q = v + a - a.mean(axis=1, keepdims=True)
    cache = {"acts": acts, "v": v, "a": a}
    return (q[0] if single else q), cache


def value_and_advantage(net: QNetwork, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    _, cache = forward(net, np.atleast_2d(x))
    return cache["v"][:, 0], cache["a"]


def backward(net: QNetwork, cache: dict, dq: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter given ``dL/dQ`` of shape (n, K)."""
    acts = cache["acts"]
    h = acts[-1]
    dv = dq.sum(axis=1, keepdims=True)
    da = dq - dq.mean(axis=1, keepdims=True)
    grads = {
        "WV": h.T @ dv,
        "bV": dv.sum(axis=0),
        "WA": h.T @ da,
        "bA": da.sum(axis=0),
    }
    dh = dv @ net.params["WV"].T + da @ net.params["WA"].T
    for i in reversed(range(len(net.hidden_sizes))):
        dz = dh * (acts[i + 1] > 0.0)
        grads[f"W{i}"] = acts[i].T @ dz
        grads[f"b{i}"] = dz.sum(axis=0)
        if i:
            dh = dz @ net.params[f"W{i}"].T
    return grads


def squared_error_and_grad(net: QNetwork, x: np.ndarray, actions: np.ndarray,
                           targets: np.ndarray) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Mean squared error between Q(x, action) and targets, its gradients, and the TD errors."""
    q, cache = forward(net, np.atleast_2d(x))
    n = q.shape[0]
    rows = np.arange(n)
    td = q[rows, actions] - targets
    loss = float(np.mean(td * td))
    dq = np.zeros_like(q)
    dq[rows, actions] = 2.0 * td / n
    return loss, backward(net, cache, dq), td


def gradient_check(net: QNetwork, state_features: np.ndarray, action_index: int,
                   target_value: float, eps: float = 1e-5) -> float:
    """Max relative error between backprop and central finite differences of the squared error."""
    if not 1e-7 <= eps <= 1e-3:
        raise ContractViolation("eps must be in [1e-7, 1e-3]")
    x = np.atleast_2d(np.asarray(state_features, dtype=np.float64))
    a = np.array([action_index])
    t = np.array([float(target_value)])
    _, grads, _ = squared_error_and_grad(net, x, a, t)
    analytic = np.concatenate([grads[n].ravel() for n, _ in net.shapes])

    # The working copy's parameters are views into ``theta``.
    theta = net.flat()
    views, pos = {}, 0
    for name, shape in net.shapes:
        size = int(np.prod(shape))
        views[name] = theta[pos:pos + size].reshape(shape)
        pos += size
    work = QNetwork(net.input_dim, net.hidden_sizes, net.n_actions, views)

    def loss() -> float:
        q = forward(work, x)[0][0, action_index]
        return (q - t[0]) ** 2

    numeric = np.empty_like(theta)
    for j in range(theta.size):
        orig = theta[j]
        theta[j] = orig + eps
        up = loss()
        theta[j] = orig - eps
        down = loss()
        theta[j] = orig
        numeric[j] = (up - down) / (2.0 * eps)
    rel = np.abs(analytic - numeric) / np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    return float(rel.max())
