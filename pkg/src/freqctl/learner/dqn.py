"""Off-policy double-DQN training from logged episodes, and checkpoint I/O."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from freqctl.core import ContractViolation, EpisodeRecord, validate_log
from freqctl.learner.network import QNetwork, forward, squared_error_and_grad

CHECKPOINT_FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when a training step produces a non-finite loss."""


@dataclass(frozen=True)
class Hyperparams:
    gamma: float = 0.5
    alpha: float = 0.01
    batch_size: int = 64
    replay_capacity: int = 500_000
    target_sync_interval: int = 500
    hidden_sizes: tuple[int, ...] = (64, 32)
    training_steps: int = 20_000
    seed: int = 0
    optimizer: str = "sgd"

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if not 0.0 <= self.gamma < 1.0:
            raise ContractViolation("gamma must be in [0, 1)")
        if self.alpha <= 0:
            raise ContractViolation("alpha must be > 0")
        if min(self.batch_size, self.replay_capacity, self.target_sync_interval) < 1:
            raise ContractViolation("batch_size, replay_capacity and target_sync_interval must be >= 1")
        if any(h < 1 for h in self.hidden_sizes):
            raise ContractViolation("hidden sizes must be >= 1")
        if self.training_steps < 0:
            raise ContractViolation("training_steps must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractViolation(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractViolation(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminal: np.ndarray

    def __len__(self) -> int:
        return self.actions.shape[0]

    @classmethod
    def from_records(cls, records: Sequence[EpisodeRecord]) -> "Batch":
        return cls(
            states=np.array([r.state_features for r in records], dtype=np.float64),
            actions=np.array([r.action_index for r in records], dtype=np.int64),
            rewards=np.array([r.reward for r in records], dtype=np.float64),
            next_states=np.array([r.next_state_features for r in records], dtype=np.float64),
            terminal=np.array([r.terminal for r in records], dtype=bool),
        )


class ReplayBuffer:
    """Bounded FIFO of transitions stored column-wise; uniform sampling."""

    def __init__(self, capacity: int, state_dim: int):
        if capacity < 1:
            raise ContractViolation("replay capacity must be >= 1")
        self.capacity = capacity
        self._s = np.zeros((capacity, state_dim))
        self._a = np.zeros(capacity, dtype=np.int64)
        self._r = np.zeros(capacity)
        self._s2 = np.zeros((capacity, state_dim))
        self._t = np.zeros(capacity, dtype=bool)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, batch: Batch) -> None:
        n = len(batch)
        if n > self.capacity:
            batch = Batch(batch.states[-self.capacity:], batch.actions[-self.capacity:],
                          batch.rewards[-self.capacity:], batch.next_states[-self.capacity:],
                          batch.terminal[-self.capacity:])
            n = self.capacity
        idx = (self._next + np.arange(n)) % self.capacity
        self._s[idx] = batch.states
        self._a[idx] = batch.actions
        self._r[idx] = batch.rewards
        self._s2[idx] = batch.next_states
        self._t[idx] = batch.terminal
        self._next = int((self._next + n) % self.capacity)
        self._size = min(self.capacity, self._size + n)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self._size == 0:
            raise ContractViolation("cannot sample from an empty replay buffer")
        idx = rng.integers(self._size, size=batch_size)
        return Batch(self._s[idx], self._a[idx], self._r[idx], self._s2[idx], self._t[idx])


def double_q_target(online: QNetwork, target: QNetwork, rec: EpisodeRecord, gamma: float) -> float:
    """``r`` for terminal records, else ``r + gamma * Q_target(s', argmax_a Q_online(s', a))``."""
    if rec.terminal:
        return float(rec.reward)
    s2 = np.asarray(rec.next_state_features, dtype=np.float64)
    best = int(np.argmax(online(s2)))
    return float(rec.reward + gamma * target(s2)[best])


def double_q_targets(online: QNetwork, target: QNetwork, batch: Batch, gamma: float) -> np.ndarray:
    q_next_online = forward(online, batch.next_states)[0]
    q_next_target = forward(target, batch.next_states)[0]
    best = np.argmax(q_next_online, axis=1)
    boot = q_next_target[np.arange(len(batch)), best]
    return batch.rewards + np.where(batch.terminal, 0.0, gamma * boot)


class Optimizer:
    """Plain SGD, or Adam when ``kind == "adam"``."""

    def __init__(self, kind: str, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.kind, self.lr = kind, lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, net: QNetwork, grads: dict[str, np.ndarray]) -> QNetwork:
        self.t += 1
        new = {}
        for name, p in net.params.items():
            g = grads[name]
            if self.kind == "sgd":
                new[name] = p - self.lr * g
                continue
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            new[name] = p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return QNetwork(net.input_dim, net.hidden_sizes, net.n_actions, new)


def _train_step(net: QNetwork, target: QNetwork, batch: Batch, gamma: float,
                opt: Optimizer) -> tuple[QNetwork, float]:
    y = double_q_targets(net, target, batch, gamma)
    loss, grads, _ = squared_error_and_grad(net, batch.states, batch.actions, y)
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss} at optimizer step {opt.t}")
    return opt.step(net, grads), loss


def train_batch(net: QNetwork, target: QNetwork, batch: Sequence[EpisodeRecord] | Batch,
                hp: Hyperparams, optimizer: Optimizer | None = None) -> tuple[QNetwork, float]:
    """One gradient step on the mean squared double-Q TD error; returns the pre-step loss."""
    if not isinstance(batch, Batch):
        if not batch:
            raise ContractViolation("train_batch needs a non-empty batch")
        batch = Batch.from_records(batch)
    if len(batch) == 0:
        raise ContractViolation("train_batch needs a non-empty batch")
    opt = optimizer or Optimizer(hp.optimizer, hp.alpha)
    return _train_step(net, target, batch, hp.gamma, opt)


@dataclass
class TrainingResult:
    network: QNetwork
    losses: list[float] = field(default_factory=list)


def train_from_log(records: Sequence[EpisodeRecord], hp: Hyperparams, n_actions: int = 6,
                   on_step: Callable[[int, QNetwork, QNetwork], None] | None = None) -> TrainingResult:
    """Fill a replay buffer from the log and run ``hp.training_steps`` double-DQN steps.

    The target network is a frozen copy of the online network, refreshed every
    ``hp.target_sync_interval`` steps.
    """
    if not records:
        raise ContractViolation("training log is empty")
    check = validate_log(records)
    if not check.ok:
        raise ContractViolation(f"invalid training log: {'; '.join(check.violations[:5])}")
    data = Batch.from_records(records)
    if data.actions.max() >= n_actions:
        raise ContractViolation(f"log has action index {data.actions.max()} but only {n_actions} actions")
    buffer = ReplayBuffer(hp.replay_capacity, data.states.shape[1])
    buffer.push(data)

    net = QNetwork.init(data.states.shape[1], hp.hidden_sizes, n_actions, seed=hp.seed)
    target = net.copy()
    opt = Optimizer(hp.optimizer, hp.alpha)
    rng = np.random.default_rng([hp.seed, 0x5A])
    losses = []
    for step in range(hp.training_steps):
        batch = buffer.sample(hp.batch_size, rng)
        net, loss = _train_step(net, target, batch, hp.gamma, opt)
        losses.append(loss)
        if (step + 1) % hp.target_sync_interval == 0:
            target = net.copy()
        if on_step is not None:
            on_step(step, net, target)
    return TrainingResult(net, losses)


def save_checkpoint(path: str | Path, net: QNetwork, hp: Hyperparams | None = None) -> None:
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "architecture": {
            "input_dim": net.input_dim,
            "hidden_sizes": list(net.hidden_sizes),
            "n_actions": net.n_actions,
            "activation": "relu",
            "head": "dueling",
            "layers": [{"name": n, "shape": list(s)} for n, s in net.shapes],
        },
        "weights": {n: net.params[n].ravel().tolist() for n, _ in net.shapes},
        "hyperparams": hp.to_dict() if hp is not None else None,
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[QNetwork, Hyperparams | None]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ContractViolation(f"{path}: unsupported checkpoint format_version")
        arch = doc["architecture"]
        net = QNetwork(int(arch["input_dim"]), tuple(arch["hidden_sizes"]), int(arch["n_actions"]), {})
        for layer in arch["layers"]:
            name, shape = layer["name"], tuple(layer["shape"])
            values = np.asarray(doc["weights"][name], dtype=np.float64)
            if values.size != int(np.prod(shape)):
                raise ContractViolation(f"{path}: layer {name} has {values.size} values for shape {shape}")
            net.params[name] = values.reshape(shape)
        if [(n, tuple(s)) for n, s in net.shapes] != [(l["name"], tuple(l["shape"])) for l in arch["layers"]]:
            raise ContractViolation(f"{path}: layer list does not match the architecture")
        hp = Hyperparams.from_dict(doc["hyperparams"]) if doc.get("hyperparams") else None
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        if isinstance(exc, ContractViolation):
            raise
        raise ContractViolation(f"{path}: invalid checkpoint ({exc})") from exc
    return net, hp
