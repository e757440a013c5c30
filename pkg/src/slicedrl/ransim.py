"""Slot-level simulator of a two-slice gNB downlink scheduler.

Each slice owns a drop-tail SDU queue. Every slot the PRBs are split either by
a fixed weight (the RC xApp's action) or by a proportional-fair rule, and each
queue is drained FIFO up to the capacity of its PRBs. SDUs may be served
partially across slots; an SDU's delay is counted from the start of its arrival
slot to the end of the slot that carries its last byte.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Sequence, Union

from .core import ActionSpace
from .kpm import KpmRecord, SliceKpm
from .traffic import TrafficProfile, slot_arrivals

WEIGHTED = "weighted"
PROPORTIONAL_FAIR = "pf"
DEFAULT_WEIGHT = 50


class SchedulerModeError(RuntimeError):
    pass


@dataclass(frozen=True)
class GnbConfig:
    n_prb: int = 106
    scs_khz: float = 30.0
    spectral_efficiency: float = 7.4
    data_re_per_prb_slot: int = 156
    buffer_bytes_per_slice: int = 2_000_000
    sdu_bytes: int = 1500
    pf_alpha: float = 0.01

    def __post_init__(self):
        if self.n_prb <= 0:
            raise ValueError("n_prb must be positive")
        if not 0 < self.pf_alpha <= 1:
            raise ValueError("pf_alpha must lie in (0, 1]")

    @property
    def slot_ms(self) -> float:
        return 1.0 / (self.scs_khz / 15.0)

    @property
    def slots_per_second(self) -> float:
        return 1000.0 / self.slot_ms

    @property
    def cell_capacity_mbps(self) -> float:
        return slice_capacity_bits(self.n_prb, self) * self.slots_per_second / 1e6


def slice_capacity_bits(prbs: int, cfg: GnbConfig = GnbConfig()) -> int:
    if not 0 <= prbs <= cfg.n_prb:
        raise ValueError(f"prbs={prbs} outside [0, {cfg.n_prb}]")
    return math.floor(prbs * cfg.data_re_per_prb_slot * cfg.spectral_efficiency)


def initial_weight(space: ActionSpace) -> int:
    """Starting weight of a closed loop: the action nearest the equal split."""
    return min(space.weights_pct, key=lambda w: (abs(w - DEFAULT_WEIGHT), w))


def allocate_weighted(weight_pct: float, n_prb: int) -> tuple[int, int]:
    p1 = math.floor(weight_pct * n_prb / 100)
    return p1, n_prb - p1


class SliceQueue:
    """FIFO of SDUs stored as runs of equal-sized SDUs sharing an arrival slot."""

    __slots__ = ("limit", "sdu_bytes", "chunks", "head_sent", "occupied", "arrived",
                 "served", "dropped", "delay_sum", "delay_count", "max_trackers")

    def __init__(self, limit_bytes: int, sdu_bytes: int):
        self.limit = limit_bytes
        self.sdu_bytes = sdu_bytes
        self.chunks: deque[list] = deque()  # [arrival_slot, n_sdus, sdu_size]
        self.head_sent = 0
        self.occupied = 0
        self.arrived = 0
        self.served = 0
        self.dropped = 0
        self.delay_sum = 0
        self.delay_count = 0
        # running maxima of SDU delay (slots), one per window meter
        self.max_trackers: list[int] = []

    def __len__(self):
        return sum(c[1] for c in self.chunks)

    def add_tracker(self) -> int:
        self.max_trackers.append(0)
        return len(self.max_trackers) - 1

    def take_max(self, tracker: int) -> int:
        m = self.max_trackers[tracker]
        self.max_trackers[tracker] = 0
        return m

    def enqueue(self, nbytes: int, slot: int) -> int:
        """Admit ``nbytes`` as SDUs; returns the bytes dropped at the tail."""
        if nbytes <= 0:
            return 0
        self.arrived += nbytes
        size = self.sdu_bytes
        n_full, tail = divmod(nbytes, size)
        room = self.limit - self.occupied
        n_ok = min(n_full, room // size)
        if n_ok:
            self.chunks.append([slot, n_ok, size])
            self.occupied += n_ok * size
            room -= n_ok * size
        dropped = (n_full - n_ok) * size
        if tail:
            if tail <= room:
                self.chunks.append([slot, 1, tail])
                self.occupied += tail
            else:
                dropped += tail
        self.dropped += dropped
        return dropped

    def serve(self, budget: int, slot: int) -> int:
        """Send up to ``budget`` bytes FIFO. Delays are recorded in slots."""
        sent = 0
        chunks = self.chunks
        while budget > 0 and chunks:
            head = chunks[0]
            arrival, n, size = head
            rem = size - self.head_sent
            if budget < rem:
                self.head_sent += budget
                sent += budget
                budget = 0
                break
            # complete the head SDU plus as many whole SDUs of this run as fit
            k = min(n, 1 + (budget - rem) // size)
            used = rem + (k - 1) * size
            budget -= used
            sent += used
            self.head_sent = 0
            d = slot - arrival + 1
            self.delay_sum += k * d
            self.delay_count += k
            trackers = self.max_trackers
            for i in range(len(trackers)):
                if d > trackers[i]:
                    trackers[i] = d
            if k == n:
                chunks.popleft()
            else:
                head[1] = n - k
        self.occupied -= sent
        self.served += sent
        return sent


@dataclass(frozen=True)
class SlotReport:
    prbs: tuple[int, int]
    arrived_bytes: tuple[int, int]
    dropped_bytes: tuple[int, int]
    served_bytes: tuple[int, int]
    completed_sdus: tuple[int, int]


class GnbSim:
    """Two-slice gNB state machine. Drive it from one thread at a time."""

    def __init__(
        self,
        cfg: GnbConfig = GnbConfig(),
        mode: str = WEIGHTED,
        weight_pct: int = DEFAULT_WEIGHT,
        space: ActionSpace = ActionSpace(),
    ):
        if mode not in (WEIGHTED, PROPORTIONAL_FAIR):
            raise ValueError(f"unknown scheduler mode {mode!r}")
        if mode == WEIGHTED and weight_pct not in space:
            raise ValueError(f"weight {weight_pct} is not in the action space")
        self.cfg = cfg
        self.space = space
        self.mode = mode
        self.weight_pct = weight_pct if mode == WEIGHTED else None
        self.slot_index = 0
        self.slices = (
            SliceQueue(cfg.buffer_bytes_per_slice, cfg.sdu_bytes),
            SliceQueue(cfg.buffer_bytes_per_slice, cfg.sdu_bytes),
        )
        # bits per slot; seeded positive so the first ratio is defined
        self.pf_avg_throughput = [1.0, 1.0]
        self.prb_usage = [0, 0]
        self._cap = [slice_capacity_bits(p, cfg) // 8 for p in range(cfg.n_prb + 1)]
        self._split = allocate_weighted(weight_pct, cfg.n_prb) if mode == WEIGHTED else None

    def apply_control(self, weight_pct: int) -> None:
        """Switch the Slice-1 weight; effective from the next slot."""
        if self.mode != WEIGHTED:
            raise SchedulerModeError("weights cannot be applied in proportional-fair mode")
        if weight_pct not in self.space:
            raise ValueError(f"weight {weight_pct} is not in the action space")
        self.weight_pct = int(weight_pct)
        self._split = allocate_weighted(weight_pct, self.cfg.n_prb)

    def allocate(self) -> tuple[int, int]:
        if self.mode == WEIGHTED:
            return self._split
        return self.allocate_pf()

    def allocate_pf(self) -> tuple[int, int]:
        """Winner-takes-slot proportional fair over the two slice aggregates.

        A slice's achievable rate this slot is what it could actually send: its
        backlog, capped by the full-cell capacity. Empty slices are skipped.
        """
        q1, q2 = self.slices
        b1, b2 = q1.occupied, q2.occupied
        n = self.cfg.n_prb
        if not b1 and not b2:
            return 0, 0
        if not b2:
            return n, 0
        if not b1:
            return 0, n
        cell = self._cap[n]
        avg = self.pf_avg_throughput
        if min(b1, cell) / avg[0] >= min(b2, cell) / avg[1]:
            return n, 0
        return 0, n

    def _advance(self, a1: int, a2: int) -> tuple[int, int, int, int]:
        slot = self.slot_index
        q1, q2 = self.slices
        if a1:
            q1.enqueue(a1, slot)
        if a2:
            q2.enqueue(a2, slot)
        if self.mode == WEIGHTED:
            p1, p2 = self._split
        else:
            p1, p2 = self.allocate_pf()
        cap = self._cap
        s1 = q1.serve(cap[p1], slot) if p1 and q1.occupied else 0
        s2 = q2.serve(cap[p2], slot) if p2 and q2.occupied else 0
        if self.mode == PROPORTIONAL_FAIR:
            alpha = self.cfg.pf_alpha
            avg = self.pf_avg_throughput
            avg[0] += alpha * (8 * s1 - avg[0])
            avg[1] += alpha * (8 * s2 - avg[1])
            if avg[0] < 1e-9:
                avg[0] = 1e-9
            if avg[1] < 1e-9:
                avg[1] = 1e-9
        self.prb_usage[0] += p1
        self.prb_usage[1] += p2
        self.slot_index = slot + 1
        return p1, p2, s1, s2

    def step_slot(self, arrivals: Sequence[int]) -> SlotReport:
        a1, a2 = (int(x) for x in arrivals)
        if a1 < 0 or a2 < 0:
            raise ValueError("arrivals must be non-negative")
        q1, q2 = self.slices
        before = [(q.dropped, q.delay_count) for q in self.slices]
        p1, p2, s1, s2 = self._advance(a1, a2)
        return SlotReport(
            prbs=(p1, p2),
            arrived_bytes=(a1, a2),
            dropped_bytes=(q1.dropped - before[0][0], q2.dropped - before[1][0]),
            served_bytes=(s1, s2),
            completed_sdus=(q1.delay_count - before[0][1], q2.delay_count - before[1][1]),
        )


Scheduler = Union[str, int, Callable[[float], int]]


class _WindowMeter:
    """Turns cumulative queue counters into per-window KPM rows."""

    def __init__(self, sim: GnbSim):
        self.sim = sim
        self.mark = [self._counters(q) for q in sim.slices]
        self.trackers = [q.add_tracker() for q in sim.slices]

    @staticmethod
    def _counters(q: SliceQueue):
        return q.arrived, q.served, q.dropped, q.delay_sum, q.delay_count

    def close(self, start_ms: float, len_ms: float, weight: int | None) -> KpmRecord:
        slot_ms = self.sim.cfg.slot_ms
        out = []
        for i, q in enumerate(self.sim.slices):
            now = self._counters(q)
            arr, srv, drp, dsum, dcnt = (b - a for a, b in zip(self.mark[i], now))
            out.append(SliceKpm(
                arrival_mbps=arr * 8 / (len_ms * 1e3),
                served_mbps=srv * 8 / (len_ms * 1e3),
                dropped_bytes=drp,
                mean_sdu_delay_ms=dsum * slot_ms / dcnt if dcnt else 0.0,
                max_sdu_delay_ms=q.take_max(self.trackers[i]) * slot_ms,
                arrived_bytes=arr,
                served_bytes=srv,
                queued_bytes=q.occupied,
                sdu_count=dcnt,
            ))
            self.mark[i] = now
        return KpmRecord(start_ms, len_ms, (out[0], out[1]), weight)


def run_experiment(
    cfg: GnbConfig,
    sched: Scheduler,
    traffic: tuple[TrafficProfile, TrafficProfile],
    duration_s: float,
    kpm_period_ms: float = 100.0,
    seed: int = 0,
    space: ActionSpace = ActionSpace(),
    on_record: Callable[[KpmRecord], None] | None = None,
) -> list[KpmRecord]:
    """Run one scenario and return one KPM record per reporting period.

    ``sched`` is ``"pf"``, a fixed weight, or a callable mapping the Slice-1
    arrival rate measured over the previous period to the next weight (closed
    loop; the first period runs at :func:`initial_weight`).
    """
    slots_per_period = kpm_period_ms / cfg.slot_ms
    n_periods = int(round(duration_s * 1000 / kpm_period_ms))
    if n_periods < 1 or abs(slots_per_period - round(slots_per_period)) > 1e-9:
        raise ValueError("duration must cover at least one period of whole slots")
    spp = int(round(slots_per_period))
    policy = None
    if sched == PROPORTIONAL_FAIR:
        sim = GnbSim(cfg, PROPORTIONAL_FAIR, space=space)
    elif callable(sched):
        policy = sched
        sim = GnbSim(cfg, WEIGHTED, initial_weight(space), space)
    else:
        sim = GnbSim(cfg, WEIGHTED, int(sched), space)

    meter = _WindowMeter(sim)
    records = []
    seeds = (seed * 2 + 1, seed * 2 + 2)
    advance = sim._advance
    for j in range(n_periods):
        start = j * spp
        a1 = slot_arrivals(traffic[0], start, spp, cfg.slot_ms, seeds[0]).tolist()
        a2 = slot_arrivals(traffic[1], start, spp, cfg.slot_ms, seeds[1]).tolist()
        weight = sim.weight_pct
        for k in range(spp):
            advance(a1[k], a2[k])
        rec = meter.close(j * kpm_period_ms, kpm_period_ms, weight)
        records.append(rec)
        if on_record is not None:
            on_record(rec)
        if policy is not None:
            sim.apply_control(int(policy(rec.slices[0].arrival_mbps)))
    return records
