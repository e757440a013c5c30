"""Deep Q-learning from scratch in numpy.

The Q-network is a plain ReLU MLP in float64 with hand-written backprop, trained
with Adam against a periodically synced target network from a uniform replay
buffer. The environment replays the offline delay table: the reward of a weight
depends only on the current quantized arrival rate, and the next state is drawn
uniformly from the state grid.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import core
from .core import ActionSpace, DelayTable, QuantizerConfig, RewardSpec
from .policy import TrainedPolicy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DqnConfig:
    gamma: float = 0.99
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 128
    replay_capacity: int = 10_000
    episodes: int = 1500
    max_steps: int = 100
    eps_start: float = 1.0
    eps_end: float = 0.01
    eps_decay_fraction: float = 0.8
    target_update_every_episodes: int = 10
    hidden_size: int = 256
    n_hidden: int = 4
    reward_scale: float | None = None  # None: 1 / (max weight - min weight)
    grad_clip: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if self.eps_end > self.eps_start:
            raise ValueError("eps_end must not exceed eps_start")
        if self.batch < 1 or self.replay_capacity < self.batch:
            raise ValueError("replay capacity must hold at least one batch")
        if self.target_update_every_episodes < 1:
            raise ValueError("target update period must be at least one episode")

    def layer_sizes(self, n_inputs: int, n_actions: int) -> tuple[int, ...]:
        return (n_inputs, *([self.hidden_size] * self.n_hidden), n_actions)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class QNetwork:
    """Fully connected ReLU network with a linear output layer.

    All parameters live in one flat float64 vector; ``weights`` and ``biases``
    are views into it, and so are the gradients returned by :meth:`backward`.
    """

    def __init__(self, layer_sizes, rng: np.random.Generator | None = None):
        self.layer_sizes = tuple(int(n) for n in layer_sizes)
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least an input and an output layer")
        rng = rng if rng is not None else np.random.default_rng(0)
        self._alloc()
        for w in self.weights:
            bound = np.sqrt(6.0 / w.shape[0])
            w[...] = rng.uniform(-bound, bound, size=w.shape)

    def _alloc(self):
        shapes = []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        self._shapes = shapes
        self.flat = np.zeros(sum(int(np.prod(sh)) for sh in shapes))
        self.grad_flat = np.zeros_like(self.flat)
        views, grads, pos = [], [], 0
        for sh in shapes:
            n = int(np.prod(sh))
            views.append(self.flat[pos:pos + n].reshape(sh))
            grads.append(self.grad_flat[pos:pos + n].reshape(sh))
            pos += n
        self.weights, self.biases = views[0::2], views[1::2]
        self._grads = grads

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def n_params(self) -> int:
        return self.flat.size

    def set_params(self, params) -> None:
        for view, p in zip(self.params, params):
            view[...] = p

    def copy(self) -> "QNetwork":
        other = QNetwork.__new__(QNetwork)
        other.layer_sizes = self.layer_sizes
        other._alloc()
        other.flat[:] = self.flat
        return other

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.layer_sizes[0]:
            raise ValueError(f"expected input of width {self.layer_sizes[0]}, got shape {x.shape}")
        return x

    def forward(self, x) -> np.ndarray:
        h = self._check(x)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                np.maximum(h, 0.0, out=h)
        return h

    def forward_cached(self, x):
        h = self._check(x)
        acts = [h]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                np.maximum(h, 0.0, out=h)
            acts.append(h)
        return h, acts

    def backward(self, acts, grad_out: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients for an upstream gradient on the output.

        The returned arrays are views into ``grad_flat`` and are overwritten by
        the next call.
        """
        grads = self._grads
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            np.matmul(acts[i].T, g, out=grads[2 * i])
            np.sum(g, axis=0, out=grads[2 * i + 1])
            if i:
                g = (g @ self.weights[i].T) * (acts[i] > 0)
        return list(grads)


def forward(net: QNetwork, x) -> np.ndarray:
    q = net.forward(x)
    return q[0] if np.ndim(x) == 1 else q


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray


def td_targets(target_net: QNetwork, batch: Batch, gamma: float) -> np.ndarray:
    # the environment has few distinct states, so evaluate each only once
    uniq, inv = np.unique(batch.next_states, axis=0, return_inverse=True)
    q_next = target_net.forward(uniq).max(axis=1)[inv.ravel()]
    return batch.rewards + gamma * (1.0 - batch.dones) * q_next


def td_loss_and_grads(net: QNetwork, target_net: QNetwork, batch: Batch, cfg: DqnConfig):
    """Mean squared TD error and its gradient w.r.t. the online network.

    Targets are treated as constants. Duplicate input rows are forwarded once and
    their output gradients summed, which is exactly the per-sample sum.
    """
    n = len(batch.actions)
    if n == 0:
        raise ValueError("empty batch")
    y = td_targets(target_net, batch, cfg.gamma)
    uniq, inv = np.unique(batch.states, axis=0, return_inverse=True)
    inv = inv.ravel()
    q, acts = net.forward_cached(uniq)
    q_sa = q[inv, batch.actions]
    err = q_sa - y
    loss = float(np.mean(err ** 2))
    grad_out = np.zeros_like(q)
    np.add.at(grad_out, (inv, batch.actions), 2.0 * err / n)
    return loss, net.backward(acts, grad_out)


class Adam:
    """Adam over a list of parameter arrays, updated in place."""

    def __init__(self, params, cfg: DqnConfig = DqnConfig()):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self._scratch = [np.empty_like(p) for p in params]
        self.t = 0

    def step(self, params, grads) -> None:
        self.t += 1
        adam_step(params, grads, (self.m, self.v), self.cfg, self.t, self._scratch)


# Moments of parameters with zero gradient (dead ReLUs) decay geometrically and
# reach subnormal range after a few thousand steps, where float math is ~7x slower.
# Flushing them is far below one ulp of any parameter update.
_FLUSH_EVERY = 256
_FLUSH_BELOW = 1e-200


def adam_step(params, grads, moments, cfg: DqnConfig, t: int, scratch=None):
    """In-place Adam update with bias correction; returns ``params``."""
    if t < 1:
        raise ValueError("Adam step count starts at 1")
    m, v = moments
    b1, b2 = cfg.beta1, cfg.beta2
    sqrt_c2 = np.sqrt(1.0 - b2 ** t)
    # lr * m_hat / (sqrt(v_hat) + eps) == scale * m / (sqrt(v) + eps * sqrt_c2)
    scale = cfg.lr * sqrt_c2 / (1.0 - b1 ** t)
    eps = cfg.adam_eps * sqrt_c2
    if scratch is None:
        scratch = [np.empty_like(p) for p in params]
    for p, g, mi, vi, tmp in zip(params, grads, m, v, scratch):
        mi *= b1
        np.multiply(g, 1.0 - b1, out=tmp)
        mi += tmp
        vi *= b2
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        vi += tmp
        np.sqrt(vi, out=tmp)
        tmp += eps
        np.divide(mi, tmp, out=tmp)
        tmp *= scale
        p -= tmp
        if t % _FLUSH_EVERY == 0:
            mi[np.abs(mi) < _FLUSH_BELOW] = 0.0
            vi[vi < _FLUSH_BELOW] = 0.0
    return params


def act_epsilon_greedy(q, eps: float, rng: np.random.Generator, n_actions: int | None = None) -> int:
    """Uniform random action with probability ``eps``; otherwise argmax, ties to the lowest index.

    ``q`` may also be a zero-argument callable (then ``n_actions`` is required),
    evaluated only when acting greedily.
    """
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    if eps > 0 and rng.random() < eps:
        return int(rng.integers(n_actions if callable(q) else len(q)))
    return int(np.argmax(q() if callable(q) else q))


def epsilon_at(episode: int, cfg: DqnConfig) -> float:
    """Linear anneal over the first ``eps_decay_fraction`` of episodes, then hold."""
    horizon = max(1, int(round(cfg.eps_decay_fraction * (cfg.episodes - 1))))
    frac = min(1.0, episode / horizon)
    return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frac


class ReplayNotReady(RuntimeError):
    pass


class ReplayBuffer:
    """Fixed-capacity ring buffer; the oldest transition is overwritten first."""

    def __init__(self, capacity: int, state_dim: int):
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.next_states = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity)
        self._next = 0
        self._size = 0

    def __len__(self):
        return self._size

    def push(self, state, action: int, reward: float, next_state, done: bool = False) -> None:
        i = self._next
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.dones[i] = float(done)
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def ordered(self) -> Batch:
        """Contents from oldest to newest."""
        if self._size < self.capacity:
            idx = np.arange(self._size)
        else:
            idx = (np.arange(self.capacity) + self._next) % self.capacity
        return self._take(idx)

    def sample(self, batch: int, rng: np.random.Generator) -> Batch:
        if self._size < batch:
            raise ReplayNotReady(f"{self._size} transitions stored, {batch} needed")
        return self._take(rng.choice(self._size, size=batch, replace=False))

    def _take(self, idx) -> Batch:
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx],
                     self.next_states[idx], self.dones[idx])


class DatasetEnv:
    """Replays an offline delay table as a Q-learning environment."""

    def __init__(
        self,
        table: DelayTable,
        quant: QuantizerConfig = QuantizerConfig(),
        space: ActionSpace = ActionSpace(),
        spec: RewardSpec = RewardSpec(),
        rng: np.random.Generator | None = None,
    ):
        table.check_complete(quant, space)
        self.table = table
        self.quant = quant
        self.space = space
        self.spec = spec
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.states = quant.grid()
        self.features = np.vstack([core.encode_state(s, quant) for s in self.states])
        self.feasible = [core.feasible_set(s, table, spec, space) for s in self.states]
        self.rewards = np.array([
            [core.reward(w, f, spec, space) for w in space.weights_pct] for f in self.feasible
        ])
        self._i = 0

    @property
    def n_actions(self) -> int:
        return len(self.space)

    @property
    def state_dim(self) -> int:
        return self.features.shape[1]

    def sample_state(self) -> int:
        return int(self.rng.integers(len(self.states)))

    def reset(self) -> np.ndarray:
        self._i = self.sample_state()
        return self.features[self._i]

    def step(self, action: int) -> tuple[np.ndarray, float]:
        r = float(self.rewards[self._i, action])
        self._i = self.sample_state()
        return self.features[self._i], r


@dataclass
class TrainingResult:
    network: QNetwork
    reward_trace: list[float]
    losses: list[float] = field(default_factory=list)
    target_syncs: list[int] = field(default_factory=list)


def train_offline(env: DatasetEnv, cfg: DqnConfig = DqnConfig(), progress=None) -> TrainingResult:
    """Train a DQN on the dataset environment.

    Returns the online network and the mean (unscaled) reward of every episode.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    init_rng, env_rng, act_rng, replay_rng = (np.random.default_rng(s) for s in seeds)
    env.rng = env_rng
    net = QNetwork(cfg.layer_sizes(env.state_dim, env.n_actions), init_rng)
    target = net.copy()
    opt = Adam([net.flat], cfg)
    buf = ReplayBuffer(cfg.replay_capacity, env.state_dim)
    ws = env.space.weights_pct
    scale = cfg.reward_scale if cfg.reward_scale is not None else 1.0 / max(ws[-1] - ws[0], 1)

    trace, losses, syncs = [], [], []
    for ep in range(cfg.episodes):
        eps = epsilon_at(ep, cfg)
        x = env.reset()
        total = 0.0
        ep_loss = 0.0
        n_updates = 0
        for _ in range(cfg.max_steps):
            a = act_epsilon_greedy(lambda: net.forward(x)[0], eps, act_rng, env.n_actions)
            x2, r = env.step(a)
            total += r
            # episodes end only by truncation, which is not a terminal state
            buf.push(x, a, r * scale, x2, False)
            x = x2
            if len(buf) >= cfg.batch:
                loss, grads = td_loss_and_grads(net, target, buf.sample(cfg.batch, replay_rng), cfg)
                if cfg.grad_clip is not None:
                    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
                    if norm > cfg.grad_clip:
                        net.grad_flat *= cfg.grad_clip / norm
                opt.step([net.flat], [net.grad_flat])
                ep_loss += loss
                n_updates += 1
        trace.append(total / cfg.max_steps)
        losses.append(ep_loss / n_updates if n_updates else float("nan"))
        if (ep + 1) % cfg.target_update_every_episodes == 0:
            target = net.copy()
            syncs.append(ep + 1)
        if progress is not None:
            progress(ep, trace[-1], eps)
    if not all(np.all(np.isfinite(p)) for p in net.params):
        raise FloatingPointError("non-finite network parameters after training")
    return TrainingResult(net, trace, losses, syncs)


def extract_policy(
    net: QNetwork,
    quant: QuantizerConfig = QuantizerConfig(),
    space: ActionSpace = ActionSpace(),
    metadata: dict | None = None,
) -> TrainedPolicy:
    """Greedy weight for every grid state."""
    states = quant.grid()
    q = net.forward(np.vstack([core.encode_state(s, quant) for s in states]))
    table = {s: core.weight_of_action(int(np.argmax(row)), space) for s, row in zip(states, q)}
    return TrainedPolicy(table, quant, metadata or {})
