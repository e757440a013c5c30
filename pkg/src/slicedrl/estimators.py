"""scikit-learn style front end.

``ArrivalRateQuantizer`` is a stateless transformer; ``DQNSliceAllocator`` and
``OracleSliceAllocator`` learn a rate -> Slice-1 weight mapping from delay
samples ``X = [[rate_mbps, weight_pct], ...]``, ``y = mean_delay_ms`` (or from a
ready :class:`DelayTable` passed as ``X``).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import ActionSpace, DelayTable, QuantizerConfig, RewardSpec, encode_state, oracle_policy, quantize_rates
from .dqn import DatasetEnv, DqnConfig, extract_policy, train_offline
from .policy import TrainedPolicy
from .validation import check_rates, delay_table_from_samples


class ArrivalRateQuantizer(TransformerMixin, BaseEstimator):
    """Snap arrival rates to the state grid; optionally scale them to [0, 1]."""

    def __init__(self, step_s=10.0, min_L=10.0, max_H=140.0, encode=False):
        self.step_s = step_s
        self.min_L = min_L
        self.max_H = max_H
        self.encode = encode

    def fit(self, X=None, y=None):
        self.quantizer_ = QuantizerConfig(self.step_s, self.min_L, self.max_H)
        if X is not None:
            check_rates(X)
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        check_is_fitted(self, "quantizer_")
        q = quantize_rates(check_rates(X), self.quantizer_)
        if self.encode:
            span = self.max_H - self.min_L
            q = (q - self.min_L) / span if span else np.zeros_like(q)
        return q.reshape(-1, 1)


class _AllocatorBase(BaseEstimator):
    def _setup(self):
        self.quantizer_ = QuantizerConfig(self.step_s, self.min_L, self.max_H)
        self.action_space_ = ActionSpace(tuple(self.weights))
        self.reward_spec_ = RewardSpec(self.delay_threshold_ms)

    def _table(self, X, y) -> DelayTable:
        table = X if isinstance(X, DelayTable) else delay_table_from_samples(X, y, self.quantizer_)
        table.check_complete(self.quantizer_, self.action_space_)
        self.n_features_in_ = 1
        return table

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "policy_")
        return np.array([self.policy_(r) for r in check_rates(X)], dtype=int)


class OracleSliceAllocator(_AllocatorBase):
    """Exhaustive minimum-weight policy read straight off the delay table."""

    def __init__(self, step_s=10.0, min_L=10.0, max_H=140.0,
                 weights=tuple(range(10, 91, 5)), delay_threshold_ms=10.0):
        self.step_s = step_s
        self.min_L = min_L
        self.max_H = max_H
        self.weights = weights
        self.delay_threshold_ms = delay_threshold_ms

    def fit(self, X, y=None):
        self._setup()
        self.delay_table_ = self._table(X, y)
        table = oracle_policy(self.delay_table_, self.quantizer_, self.action_space_, self.reward_spec_)
        self.policy_ = TrainedPolicy(table, self.quantizer_, {"kind": "oracle"})
        return self


class DQNSliceAllocator(_AllocatorBase):
    """Deep Q-network trained offline on the delay table.

    After ``fit``: ``q_network_``, ``policy_``, ``reward_trace_`` (mean reward per
    episode) and ``delay_table_``.
    """

    def __init__(self, step_s=10.0, min_L=10.0, max_H=140.0,
                 weights=tuple(range(10, 91, 5)), delay_threshold_ms=10.0,
                 gamma=0.99, learning_rate=1e-3, batch_size=128, replay_capacity=10_000,
                 episodes=1500, max_steps=100, target_update_every=10,
                 hidden_size=256, n_hidden=4, random_state=0, verbose=0):
        self.step_s = step_s
        self.min_L = min_L
        self.max_H = max_H
        self.weights = weights
        self.delay_threshold_ms = delay_threshold_ms
        self.gamma = gamma
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.replay_capacity = replay_capacity
        self.episodes = episodes
        self.max_steps = max_steps
        self.target_update_every = target_update_every
        self.hidden_size = hidden_size
        self.n_hidden = n_hidden
        self.random_state = random_state
        self.verbose = verbose

    def dqn_config(self) -> DqnConfig:
        return DqnConfig(
            gamma=self.gamma, lr=self.learning_rate, batch=self.batch_size,
            replay_capacity=self.replay_capacity, episodes=self.episodes, max_steps=self.max_steps,
            target_update_every_episodes=self.target_update_every, hidden_size=self.hidden_size,
            n_hidden=self.n_hidden, seed=int(self.random_state or 0),
        )

    def fit(self, X, y=None):
        self._setup()
        self.delay_table_ = self._table(X, y)
        cfg = self.dqn_config()
        env = DatasetEnv(self.delay_table_, self.quantizer_, self.action_space_, self.reward_spec_)
        progress = None
        if self.verbose:
            def progress(ep, r, eps):
                if (ep + 1) % 100 == 0:
                    print(f"episode {ep + 1}: mean reward {r:.2f}, eps {eps:.3f}")
        result = train_offline(env, cfg, progress)
        self.q_network_ = result.network
        self.reward_trace_ = np.asarray(result.reward_trace)
        self.target_syncs_ = result.target_syncs
        self.policy_ = extract_policy(result.network, self.quantizer_, self.action_space_, {
            "kind": "dqn", "seed": cfg.seed, "dqn_config": cfg.digest(),
            "layers": list(cfg.layer_sizes(1, len(self.action_space_))),
        })
        return self

    def decision_function(self, X) -> np.ndarray:
        """Q-values of every action for the quantized rates."""
        check_is_fitted(self, "q_network_")
        states = quantize_rates(check_rates(X), self.quantizer_)
        feats = np.vstack([encode_state(float(s), self.quantizer_) for s in states])
        return self.q_network_.forward(feats)
