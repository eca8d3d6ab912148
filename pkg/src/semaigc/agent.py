"""ROOT workload-split agent: dueling double DQN with experience replay and decaying epsilon-greedy."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields
from typing import Protocol

import numpy as np

from .nn import MLP, make_optimizer

N_ACTIONS = 10
STATE_FIELDS = ("w_edge", "w_local", "snr_db", "nu_edge", "nu_local", "bandwidth_hz", "latency_req_s")
WEIGHTS_VERSION = 1


class AgentError(ValueError):
    pass


class InsufficientDataError(AgentError):
    pass


@dataclass(frozen=True)
class AgentState:
    w_edge: float
    w_local: float
    snr_db: float
    nu_edge: float
    nu_local: float
    bandwidth_hz: float
    latency_req_s: float

    def raw(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in STATE_FIELDS], dtype=float)


@dataclass(frozen=True)
class StateNormalizer:
    """Min/max scaling of each state field into [0, 1]; constant fields map to 0."""

    low: tuple
    high: tuple

    def __call__(self, x: AgentState | np.ndarray) -> np.ndarray:
        raw = x.raw() if isinstance(x, AgentState) else np.asarray(x, dtype=float)
        lo, hi = np.asarray(self.low), np.asarray(self.high)
        span = np.where(hi > lo, hi - lo, 1.0)
        return np.clip((raw - lo) / span, 0.0, 1.0)


def action_steps(T_hat: int = 20, n_actions: int = N_ACTIONS) -> np.ndarray:
    """Transmitter-side steps for each action index: round(k * T_hat / (n - 1))."""
    return np.array([int(round(k * T_hat / (n_actions - 1))) for k in range(n_actions)])


@dataclass(frozen=True)
class AgentAction:
    index: int
    transmitter_steps: int

    @classmethod
    def from_index(cls, index: int, T_hat: int = 20, n_actions: int = N_ACTIONS) -> "AgentAction":
        if not 0 <= index < n_actions:
            raise AgentError(f"action index {index} outside [0, {n_actions - 1}]")
        return cls(int(index), int(action_steps(T_hat, n_actions)[index]))

    def receiver_steps(self, T_hat: int = 20) -> int:
        return T_hat - self.transmitter_steps


@dataclass(frozen=True, eq=False)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool = False

    def __post_init__(self):
        if not 0.0 <= self.reward <= 1.0:
            raise AgentError(f"reward {self.reward} outside [0, 1]")


def reward(latency_s: float, req) -> float:
    """1 below the lower bound, linear between the bounds, 0 at or beyond the upper bound."""
    low, high = req
    if not low < high:
        raise AgentError("latency requirement must satisfy low < high")
    if latency_s <= low:
        return 1.0
    if latency_s < high:
        return (high - latency_s) / (high - low)
    return 0.0


# -- Q-network ----------------------------------------------------------------------

class QNetwork:
    """Shared ReLU trunk feeding a scalar value head and an advantage head.

    Q(x, a) = V(x) + A(x, a) - mean_a' A(x, a'). Holds an online and a target copy.
    """

    def __init__(self, n_inputs=7, n_actions=N_ACTIONS, hidden=(256, 256), rng=None):
        rng = np.random.default_rng(rng)
        self.n_inputs, self.n_actions, self.hidden = n_inputs, n_actions, tuple(hidden)
        self.trunk = MLP([n_inputs, *hidden], activation="relu", activate_output=True, rng=rng)
        self.value = MLP([hidden[-1], 1], rng=rng, init="xavier")
        self.advantage = MLP([hidden[-1], n_actions], rng=rng, init="xavier")
        self.target_params = self.copy_params()

    @property
    def params(self):
        return self.trunk.params + self.value.params + self.advantage.params

    def copy_params(self):
        return [p.copy() for p in self.params]

    def load_params(self, params):
        for dst, src in zip(self.params, params, strict=True):
            dst[...] = src

    def forward(self, x, params=None):
        """Q-values for a batch; ``params`` evaluates a different weight set (e.g. the target)."""
        if params is not None:
            saved = self.copy_params()
            self.load_params(params)
            try:
                return self.forward(x)
            finally:
                self.load_params(saved)
        x = np.atleast_2d(x)
        h, c_trunk = self.trunk.forward(x)
        v, c_v = self.value.forward(h)
        adv, c_a = self.advantage.forward(h)
        q = v + adv - adv.mean(axis=1, keepdims=True)
        return q, (c_trunk, c_v, c_a, v, adv)

    def heads(self, x):
        _, (_, _, _, v, adv) = self.forward(x)
        return v, adv

    def backward(self, cache, dq):
        c_trunk, c_v, c_a, _, _ = cache
        dv = dq.sum(axis=1, keepdims=True)
        dadv = dq - dq.mean(axis=1, keepdims=True)
        g_v, dh_v = self.value.backward(c_v, dv)
        g_a, dh_a = self.advantage.backward(c_a, dadv)
        g_t, _ = self.trunk.backward(c_trunk, dh_v + dh_a)
        return g_t + g_v + g_a

    def q(self, x):
        return self.forward(x)[0]

    def q_target(self, x):
        return self.forward(x, self.target_params)[0]

    def save(self, path):
        doc = {"version": WEIGHTS_VERSION, "n_inputs": self.n_inputs, "n_actions": self.n_actions,
               "hidden": list(self.hidden), "online": [p.tolist() for p in self.params],
               "target": [p.tolist() for p in self.target_params]}
        with open(path, "w") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("version") != WEIGHTS_VERSION:
            raise AgentError(f"unsupported weights version {doc.get('version')}")
        net = cls(doc["n_inputs"], doc["n_actions"], doc["hidden"], rng=0)
        net.load_params([np.asarray(p) for p in doc["online"]])
        net.target_params = [np.asarray(p, dtype=float) for p in doc["target"]]
        return net


def q_values(net: QNetwork, x) -> np.ndarray:
    return net.q(x)[0]


def sync_target(net: QNetwork) -> None:
    net.target_params = net.copy_params()


def select_action(net: QNetwork, x, epsilon: float, rng=None) -> int:
    """Epsilon-greedy; greedy ties go to the lowest index (``argmax`` order)."""
    if not 0.0 <= epsilon <= 1.0:
        raise AgentError("epsilon must be in [0, 1]")
    rng = np.random.default_rng(rng)
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(net.n_actions))
    return int(np.argmax(q_values(net, x)))


class ReplayBuffer:
    def __init__(self, capacity=10_000):
        self.capacity = capacity
        self._items: list[Transition] = []
        self._next = 0

    def __len__(self):
        return len(self._items)

    def push(self, t: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(t)
        else:
            self._items[self._next] = t
        self._next = (self._next + 1) % self.capacity

    def sample(self, batch_size: int, rng=None) -> list[Transition]:
        if batch_size > len(self._items):
            raise InsufficientDataError(f"buffer holds {len(self._items)} < {batch_size} transitions")
        rng = np.random.default_rng(rng)
        idx = rng.choice(len(self._items), size=batch_size, replace=False)
        return [self._items[i] for i in idx]


def double_dqn_targets(net: QNetwork, rewards, next_states, dones, gamma):
    """r + gamma * Q_target(x', argmax_a Q_online(x', a)); no bootstrap on terminal transitions."""
    a_star = np.argmax(net.q(next_states), axis=1)
    q_next = net.q_target(next_states)[np.arange(len(a_star)), a_star]
    return rewards + gamma * (1.0 - dones) * q_next


def td_loss_and_grads(net: QNetwork, states, actions, targets):
    q, cache = net.forward(states)
    m = len(actions)
    err = q[np.arange(m), actions] - targets
    dq = np.zeros_like(q)
    dq[np.arange(m), actions] = 2.0 * err / m
    return float(np.mean(err ** 2)), net.backward(cache, dq)


def train_step(net: QNetwork, batch: list[Transition], gamma=0.99, eta=1e-3, optimizer=None) -> float:
    """One gradient step on the mean squared TD error; returns the pre-update loss."""
    states = np.array([t.state for t in batch], dtype=float)
    next_states = np.array([t.next_state for t in batch], dtype=float)
    if states.ndim != 2 or states.shape[1] != net.n_inputs or next_states.shape != states.shape:
        raise AgentError(f"batch states must have shape (m, {net.n_inputs})")
    actions = np.array([t.action for t in batch], dtype=int)
    rewards = np.array([t.reward for t in batch], dtype=float)
    dones = np.array([t.done for t in batch], dtype=float)
    targets = double_dqn_targets(net, rewards, next_states, dones, gamma)
    loss, grads = td_loss_and_grads(net, states, actions, targets)
    (optimizer or make_optimizer("sgd", eta)).step(net.params, grads)
    return loss


# -- training loop ------------------------------------------------------------------

class Environment(Protocol):
    def reset(self, rng) -> np.ndarray:
        """Sample a new request; returns the normalized state vector."""

    def step(self, action: int, rng) -> float:
        """Serve the current request with ``action``; returns the reward."""


@dataclass
class AgentConfig:
    gamma: float = 0.99
    lr: float = 1e-3
    optimizer: str = "sgd"
    batch_size: int = 64
    buffer_capacity: int = 10_000
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay: float = 0.995
    sync_every: int = 10
    updates_per_episode: int = 1
    hidden: tuple = (256, 256)
    terminal_episodes: bool = True

    @classmethod
    def from_dict(cls, doc):
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise AgentError(f"unknown agent config keys {sorted(unknown)}")
        doc = dict(doc)
        if "hidden" in doc:
            doc["hidden"] = tuple(doc["hidden"])
        return cls(**doc)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class TrainingResult:
    net: QNetwork
    rewards: np.ndarray
    actions: np.ndarray
    epsilons: np.ndarray
    losses: list


def run_training(env: Environment, episodes: int, config: AgentConfig | None = None, rng=None,
                 n_inputs=7, n_actions=N_ACTIONS) -> TrainingResult:
    """Each episode serves one request: act, observe reward, store, replay-train."""
    cfg = config or AgentConfig()
    rng = np.random.default_rng(rng)
    net = QNetwork(n_inputs, n_actions, cfg.hidden, rng)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    eps = cfg.eps_start
    rewards, actions, epsilons, losses = [], [], [], []
    n_updates = 0
    x = env.reset(rng)
    for _ in range(episodes):
        a = select_action(net, x, eps, rng)
        r = env.step(a, rng)
        x_next = env.reset(rng)
        buffer.push(Transition(np.asarray(x, float), a, float(r), np.asarray(x_next, float),
                               cfg.terminal_episodes))
        rewards.append(r)
        actions.append(a)
        epsilons.append(eps)
        if len(buffer) >= cfg.batch_size:
            for _ in range(cfg.updates_per_episode):
                losses.append(train_step(net, buffer.sample(cfg.batch_size, rng), cfg.gamma, cfg.lr, opt))
                n_updates += 1
                if n_updates % cfg.sync_every == 0:
                    sync_target(net)
        eps = max(cfg.eps_end, eps * cfg.eps_decay)
        x = x_next
    return TrainingResult(net, np.asarray(rewards), np.asarray(actions), np.asarray(epsilons), losses)


def greedy_policy(net: QNetwork, states) -> np.ndarray:
    return np.argmax(net.q(np.atleast_2d(states)), axis=1)


def export_reward_trace(path, rewards, window=50):
    rewards = np.asarray(rewards, dtype=float)
    ma = moving_average(rewards, window)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "reward", f"moving_avg_{window}"])
        for i, (r, m) in enumerate(zip(rewards, ma)):
            w.writerow([i + 1, repr(float(r)), repr(float(m))])


def export_policy_table(path, states, raw_states, net: QNetwork, T_hat=20):
    steps = action_steps(T_hat, net.n_actions)
    greedy = greedy_policy(net, states)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(STATE_FIELDS) + ["action", "transmitter_steps"])
        for raw, a in zip(np.atleast_2d(raw_states), greedy):
            w.writerow([repr(float(v)) for v in raw] + [int(a), int(steps[a])])


def moving_average(x, window):
    """Trailing mean over up to ``window`` past values (shorter at the start)."""
    x = np.asarray(x, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)
