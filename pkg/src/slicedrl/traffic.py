"""iperf-like constant-bitrate downlink traffic and sweep plans.

Packets of a profile are laid on a fixed lattice in time: packet ``i`` nominally
arrives at ``(i + phase) / pps`` slots, where ``pps`` is the mean packet count
per slot and ``phase`` is drawn from the seed. Optional jitter displaces each
packet by up to ``jitter_pct`` percent of the inter-packet gap, so the long-run
rate stays exact and generation is stateless in (seed, slot).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ActionSpace, QuantizerConfig

_JITTER_BLOCK = 4096


@dataclass(frozen=True)
class TrafficProfile:
    mean_rate_mbps: float
    packet_bytes: int = 1500
    jitter_pct: float = 0.0

    def __post_init__(self):
        if self.mean_rate_mbps < 0:
            raise ValueError("mean rate must be non-negative")
        if self.packet_bytes <= 0:
            raise ValueError("packet size must be positive")
        if not 0 <= self.jitter_pct <= 50:
            raise ValueError("jitter percentage must lie in [0, 50]")

    def packets_per_slot(self, slot_ms: float) -> float:
        return self.mean_rate_mbps * 1e6 * slot_ms * 1e-3 / (8 * self.packet_bytes)


def _phase(seed: int) -> float:
    return float(np.random.default_rng([seed, 0x5EED]).random())


def _jitter(seed: int, first: int, last: int, pct: float) -> np.ndarray:
    """Per-packet displacement, in units of the inter-packet gap, for packets first..last."""
    out = np.empty(last - first + 1)
    pos = 0
    for block in range(first // _JITTER_BLOCK, last // _JITTER_BLOCK + 1):
        u = np.random.default_rng([seed, block]).uniform(-1.0, 1.0, _JITTER_BLOCK)
        lo = max(first, block * _JITTER_BLOCK) - block * _JITTER_BLOCK
        hi = min(last, (block + 1) * _JITTER_BLOCK - 1) - block * _JITTER_BLOCK
        out[pos:pos + hi - lo + 1] = u[lo:hi + 1]
        pos += hi - lo + 1
    return out * (pct / 100.0)


def slot_arrivals(
    profile: TrafficProfile, start_slot: int, n_slots: int, slot_ms: float, seed: int
) -> np.ndarray:
    """Bytes arriving in each of the slots ``start_slot .. start_slot + n_slots - 1``."""
    pps = profile.packets_per_slot(slot_ms)
    if pps == 0 or n_slots <= 0:
        return np.zeros(max(n_slots, 0), dtype=np.int64)
    phase = _phase(seed)
    # packets whose nominal time lies within half a gap of the window
    first = max(0, math.floor(start_slot * pps - phase) - 1)
    last = math.ceil((start_slot + n_slots) * pps - phase) + 1
    idx = np.arange(first, last + 1)
    offset = idx + phase
    if profile.jitter_pct:
        offset = offset + _jitter(seed, first, last, profile.jitter_pct)
    slots = np.floor(offset / pps).astype(np.int64) - start_slot
    slots = slots[(slots >= 0) & (slots < n_slots) & (offset >= 0)]
    counts = np.bincount(slots, minlength=n_slots)
    return counts.astype(np.int64) * profile.packet_bytes


def arrivals_for_slot(profile: TrafficProfile, slot_index: int, rng_seed: int, slot_ms: float = 0.5) -> int:
    return int(slot_arrivals(profile, slot_index, 1, slot_ms, rng_seed)[0])


@dataclass(frozen=True)
class SweepCell:
    slice1_rate_mbps: float
    slice2_rate_mbps: float
    weight_pct: int | None


@dataclass(frozen=True)
class SweepPlan:
    cells: tuple[SweepCell, ...]
    window_s: float
    kpm_period_ms: float

    def __len__(self):
        return len(self.cells)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["slice1_rate_mbps", "slice2_rate_mbps", "weight_pct", "window_s", "kpm_period_ms"])
            for c in self.cells:
                w.writerow([c.slice1_rate_mbps, c.slice2_rate_mbps,
                            "" if c.weight_pct is None else c.weight_pct,
                            self.window_s, self.kpm_period_ms])

    @classmethod
    def from_csv(cls, path: str | Path) -> "SweepPlan":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: empty plan")
        cells = tuple(
            SweepCell(float(r["slice1_rate_mbps"]), float(r["slice2_rate_mbps"]),
                      int(r["weight_pct"]) if r["weight_pct"] else None)
            for r in rows
        )
        return cls(cells, float(rows[0]["window_s"]), float(rows[0]["kpm_period_ms"]))


def build_dataset_sweep(
    quant: QuantizerConfig = QuantizerConfig(),
    space: ActionSpace = ActionSpace(),
    slice2_rate: float = 117.0,
    window_s: float = 30.0,
    kpm_period_ms: float = 100.0,
) -> SweepPlan:
    """Every grid state paired with every action weight, Slice-2 held constant."""
    cells = tuple(
        SweepCell(s, slice2_rate, w) for s in quant.grid() for w in space.weights_pct
    )
    return SweepPlan(cells, window_s, kpm_period_ms)


def build_eval_plan(
    rates=tuple(range(20, 141, 10)),
    slice2_rate: float = 117.0,
    duration_s: float = 300.0,
    kpm_period_ms: float = 100.0,
) -> SweepPlan:
    """The 13 evaluation scenarios; the scheduler decides the weights."""
    cells = tuple(SweepCell(float(r), slice2_rate, None) for r in rates)
    return SweepPlan(cells, duration_s, kpm_period_ms)
