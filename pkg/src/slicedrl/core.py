"""State quantization, action space, feasible set and reward for slice allocation.

All functions here are pure; the dataclasses are frozen so they can be shared
freely between the simulator, the trainer and the xApps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np


class ConfigurationError(ValueError):
    """Raised for invalid quantizer, action-space or reward settings."""


class IncompleteDatasetError(LookupError):
    """Raised when a delay table lacks a (state, weight) cell."""

    def __init__(self, state_mbps: float, weight_pct: int):
        self.state_mbps = state_mbps
        self.weight_pct = weight_pct
        super().__init__(
            f"delay table has no entry for state={state_mbps:g} Mbps, weight={weight_pct}%"
        )


@dataclass(frozen=True)
class QuantizerConfig:
    step_s: float = 10.0
    min_L: float = 10.0
    max_H: float = 140.0

    def __post_init__(self):
        if not self.step_s > 0:
            raise ConfigurationError(f"quantization step must be positive, got {self.step_s}")
        if self.min_L > self.max_H:
            raise ConfigurationError(f"min_L={self.min_L} exceeds max_H={self.max_H}")
        span = (self.max_H - self.min_L) / self.step_s
        if not math.isclose(span, round(span), abs_tol=1e-9):
            raise ConfigurationError("max_H - min_L must be an integer multiple of step_s")

    @property
    def n_states(self) -> int:
        return int(round((self.max_H - self.min_L) / self.step_s)) + 1

    def grid(self) -> list[float]:
        """State grid {L, L+s, ..., H}."""
        return [self._snap(self.min_L + i * self.step_s) for i in range(self.n_states)]

    @staticmethod
    def _snap(x: float) -> float:
        # keeps grid values exact for decimal steps such as 2.5
        return float(round(x, 9))


@dataclass(frozen=True)
class SliceState:
    raw_rate_mbps: float
    quantized_rate_mbps: float


@dataclass(frozen=True)
class ActionSpace:
    weights_pct: tuple[int, ...] = tuple(range(10, 91, 5))

    def __post_init__(self):
        w = tuple(int(x) for x in self.weights_pct)
        if not w:
            raise ConfigurationError("action space is empty")
        if any(b <= a for a, b in zip(w, w[1:])):
            raise ConfigurationError("action weights must be strictly increasing")
        if w[0] <= 0 or w[-1] >= 100:
            raise ConfigurationError("action weights must lie in the open interval (0, 100)")
        object.__setattr__(self, "weights_pct", w)

    def __len__(self) -> int:
        return len(self.weights_pct)

    def __contains__(self, weight) -> bool:
        return weight in self.weights_pct

    def index_of(self, weight: int) -> int:
        return self.weights_pct.index(weight)

    @property
    def max_weight(self) -> int:
        return self.weights_pct[-1]


@dataclass(frozen=True)
class RewardSpec:
    delay_threshold_ms: float = 10.0
    infeasible_fallback: str = "max_weight"

    def __post_init__(self):
        if not self.delay_threshold_ms > 0:
            raise ConfigurationError("delay threshold must be positive")
        if self.infeasible_fallback != "max_weight":
            raise ConfigurationError(f"unknown fallback rule {self.infeasible_fallback!r}")


@dataclass
class DelayTable:
    """Mean SDU delay (ms) of the latency slice per (quantized rate, weight) cell.

    Optional side columns (loss %, served Mbps) ride along for reporting.
    """

    delays: dict[tuple[float, int], float] = field(default_factory=dict)
    loss_pct: dict[tuple[float, int], float] = field(default_factory=dict)
    served_mbps: dict[tuple[float, int], float] = field(default_factory=dict)

    def __len__(self):
        return len(self.delays)

    def __getitem__(self, key: tuple[float, int]) -> float:
        state, weight = key
        try:
            return self.delays[(float(state), int(weight))]
        except KeyError:
            raise IncompleteDatasetError(state, weight) from None

    def __setitem__(self, key: tuple[float, int], delay_ms: float):
        state, weight = key
        self.delays[(float(state), int(weight))] = float(delay_ms)

    def states(self) -> list[float]:
        return sorted({s for s, _ in self.delays})

    def check_complete(self, quant: QuantizerConfig, space: ActionSpace) -> None:
        for s in quant.grid():
            for w in space.weights_pct:
                if (s, w) not in self.delays:
                    raise IncompleteDatasetError(s, w)

    @classmethod
    def from_mapping(cls, m: Mapping[tuple[float, int], float]) -> "DelayTable":
        t = cls()
        for k, v in m.items():
            t[k] = v
        return t


def quantize_arrival_rate(raw: float, cfg: QuantizerConfig) -> SliceState:
    """Snap a measured arrival rate to the nearest grid point, then clip to [L, H].

    Ties round up (``floor(x + 0.5)``).
    """
    if raw < 0 or not math.isfinite(raw):
        raise ValueError(f"arrival rate must be a finite non-negative number, got {raw}")
    scaled = (raw - cfg.min_L) / cfg.step_s
    q = math.floor(scaled + 0.5) * cfg.step_s + cfg.min_L
    if q >= cfg.max_H:
        q = cfg.max_H
    elif q <= cfg.min_L:
        q = cfg.min_L
    return SliceState(raw_rate_mbps=float(raw), quantized_rate_mbps=QuantizerConfig._snap(q))


def quantize_rates(raw: Iterable[float] | np.ndarray, cfg: QuantizerConfig) -> np.ndarray:
    """Vectorised :func:`quantize_arrival_rate`."""
    x = np.asarray(raw, dtype=float)
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise ValueError("arrival rates must be finite and non-negative")
    q = np.floor((x - cfg.min_L) / cfg.step_s + 0.5) * cfg.step_s + cfg.min_L
    return np.round(np.clip(q, cfg.min_L, cfg.max_H), 9)


def weight_of_action(index: int, space: ActionSpace) -> int:
    if not 0 <= index < len(space):
        raise IndexError(f"action index {index} outside [0, {len(space)})")
    return space.weights_pct[index]


def feasible_set(
    state: SliceState | float,
    table: DelayTable,
    spec: RewardSpec,
    space: ActionSpace = ActionSpace(),
) -> frozenset[int]:
    """Weights whose measured mean SDU delay is strictly below the threshold."""
    s = state.quantized_rate_mbps if isinstance(state, SliceState) else float(state)
    return frozenset(w for w in space.weights_pct if table[s, w] < spec.delay_threshold_ms)


def target_weight(feasible: Iterable[int], space: ActionSpace = ActionSpace()) -> int:
    """Smallest feasible weight, or the largest action weight when nothing is feasible."""
    feasible = list(feasible)
    return min(feasible) if feasible else space.max_weight


def reward(
    action_weight: int,
    feasible: Iterable[int],
    spec: RewardSpec = RewardSpec(),
    space: ActionSpace = ActionSpace(),
) -> float:
    if action_weight not in space:
        raise ValueError(f"weight {action_weight} is not in the action space")
    return -float(abs(action_weight - target_weight(feasible, space)))


def encode_state(state: SliceState | float, cfg: QuantizerConfig) -> np.ndarray:
    s = state.quantized_rate_mbps if isinstance(state, SliceState) else float(state)
    span = cfg.max_H - cfg.min_L
    if span == 0:
        return np.zeros(1)
    return np.array([(s - cfg.min_L) / span])


def oracle_policy(
    table: DelayTable,
    quant: QuantizerConfig = QuantizerConfig(),
    space: ActionSpace = ActionSpace(),
    spec: RewardSpec = RewardSpec(),
) -> dict[float, int]:
    """Exhaustive best weight per state, straight from the delay table.

    Independent of :func:`reward`: it scans the raw delays for the smallest weight
    meeting the threshold and falls back to the largest weight.
    """
    policy = {}
    for s in quant.grid():
        best = space.max_weight
        for w in space.weights_pct:
            if table[s, w] < spec.delay_threshold_ms:
                best = w
                break
        policy[s] = best
    return policy
