"""Dataset sweeps, DRL-vs-PF evaluation runs and the lockstep E2 loop."""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from .config import RunConfig
from .e2bus import E2Node, inprocess_pair
from .kpm import KpmRecord
from .policy import FixedWeight, ProportionalFair, TrainedPolicy
from .ransim import PROPORTIONAL_FAIR, WEIGHTED, GnbSim, initial_weight, run_experiment
from .traffic import SweepCell, SweepPlan, TrafficProfile, build_dataset_sweep, build_eval_plan
from .xapps import KpmStore, RCXApp, SMXApp

log = logging.getLogger(__name__)


def profiles(cfg: RunConfig, slice1_rate: float, slice2_rate: float) -> tuple[TrafficProfile, TrafficProfile]:
    t = cfg.traffic
    return (
        TrafficProfile(slice1_rate, t.packet_bytes, t.slice1_jitter_pct),
        TrafficProfile(slice2_rate, t.packet_bytes, t.slice2_jitter_pct),
    )


def _map(fn, items, workers: int):
    workers = workers or os.cpu_count() or 1
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _dataset_cell(args) -> list[KpmRecord]:
    cfg, cell, window_s, period_ms = args
    return run_experiment(cfg.gnb, cell.weight_pct, profiles(cfg, cell.slice1_rate_mbps, cell.slice2_rate_mbps),
                          window_s, period_ms, cfg.seed, cfg.actions)


def dataset_plan(cfg: RunConfig) -> SweepPlan:
    return build_dataset_sweep(cfg.quantizer, cfg.actions, cfg.traffic.slice2_rate_mbps,
                               cfg.traffic.dataset_window_s, cfg.traffic.kpm_period_ms)


def run_dataset(cfg: RunConfig, store: KpmStore, plan: SweepPlan | None = None) -> SweepPlan:
    """Run every sweep cell at its fixed weight and log the KPM windows."""
    plan = plan or dataset_plan(cfg)
    jobs = [(cfg, c, plan.window_s, plan.kpm_period_ms) for c in plan.cells]
    results = _map(_dataset_cell, jobs, cfg.workers)
    digest = cfg.digest()
    for i, (cell, records) in enumerate(zip(plan.cells, results)):
        store.extend(records, scenario=i, scheduler=WEIGHTED, state_mbps=cell.slice1_rate_mbps,
                     weight_pct=cell.weight_pct, slice2_mbps=cell.slice2_rate_mbps,
                     seed=cfg.seed, config_hash=digest)
    store.flush()
    return plan


@dataclass(frozen=True)
class SliceSummary:
    arrival_mbps: float
    departure_mbps: float
    loss_pct: float
    latency_ms: float
    max_latency_ms: float
    dropped_bytes: int
    arrived_bytes: int
    served_bytes: int
    queued_bytes: int


def summarize(records: list[KpmRecord], slice_idx: int) -> SliceSummary:
    """Whole-run averages: rates over the run, loss by bytes, delay per SDU."""
    duration_ms = math.fsum(r.window_len_ms for r in records)
    s = [r.slices[slice_idx] for r in records]
    arrived = sum(x.arrived_bytes for x in s)
    served = sum(x.served_bytes for x in s)
    dropped = sum(x.dropped_bytes for x in s)
    n_sdu = sum(x.sdu_count for x in s)
    delay = math.fsum(x.mean_sdu_delay_ms * x.sdu_count for x in s) / n_sdu if n_sdu else 0.0
    return SliceSummary(
        arrival_mbps=arrived * 8 / (duration_ms * 1e3),
        departure_mbps=served * 8 / (duration_ms * 1e3),
        loss_pct=100.0 * dropped / arrived if arrived else 0.0,
        latency_ms=delay,
        max_latency_ms=max((x.max_sdu_delay_ms for x in s), default=0.0),
        dropped_bytes=dropped,
        arrived_bytes=arrived,
        served_bytes=served,
        queued_bytes=s[-1].queued_bytes if s else 0,
    )


def _eval_run(args):
    cfg, cell, scheduler, policy = args
    sched = PROPORTIONAL_FAIR if scheduler == "pf" else policy
    recs = run_experiment(cfg.gnb, sched, profiles(cfg, cell.slice1_rate_mbps, cell.slice2_rate_mbps),
                          cfg.traffic.eval_duration_s, cfg.traffic.kpm_period_ms, cfg.seed, cfg.actions)
    return recs


@dataclass
class EvalResult:
    rows: list[dict]
    records: dict[tuple[float, str], list[KpmRecord]]


RESULT_FIELDS = ["slice1_rate_mbps", "scheduler", "slice", "arrival_mbps", "departure_mbps",
                 "loss_pct", "latency_ms", "max_latency_ms", "dropped_bytes"]


def run_eval(cfg: RunConfig, policy, plan: SweepPlan | None = None, keep_records: bool = True) -> EvalResult:
    """Each scenario under the closed-loop DRL policy and under PF."""
    plan = plan or build_eval_plan(cfg.traffic.eval_rates_mbps, cfg.traffic.slice2_rate_mbps,
                                   cfg.traffic.eval_duration_s, cfg.traffic.kpm_period_ms)
    jobs = [(cfg, c, sch, policy) for c in plan.cells for sch in ("drl", "pf")]
    runs = _map(_eval_run, jobs, cfg.workers)
    rows, records = [], {}
    for (_, cell, sch, _), recs in zip(jobs, runs):
        if keep_records:
            records[(cell.slice1_rate_mbps, sch)] = recs
        for i in (0, 1):
            s = summarize(recs, i)
            rows.append({
                "slice1_rate_mbps": cell.slice1_rate_mbps, "scheduler": sch, "slice": i + 1,
                "arrival_mbps": s.arrival_mbps, "departure_mbps": s.departure_mbps,
                "loss_pct": s.loss_pct, "latency_ms": s.latency_ms,
                "max_latency_ms": s.max_latency_ms, "dropped_bytes": s.dropped_bytes,
            })
    return EvalResult(rows, records)


@dataclass
class LoopResult:
    node: E2Node
    sm: SMXApp | None
    rc: RCXApp | None
    store: KpmStore


def run_e2_loop(
    cfg: RunConfig,
    policy,
    slice1_rate: float,
    duration_s: float,
    store: KpmStore | None = None,
    meta: dict | None = None,
) -> LoopResult:
    """gNB, SM xApp and RC xApp over the in-process bus, stepped in lockstep.

    After every reporting boundary the xApps drain their inboxes (so the RC's
    control reaches the gNB before the next window starts).
    """
    store = store if store is not None else KpmStore()
    pf = isinstance(policy, ProportionalFair)
    sim = GnbSim(cfg.gnb, PROPORTIONAL_FAIR if pf else WEIGHTED, initial_weight(cfg.actions), cfg.actions)
    node = E2Node(sim, profiles(cfg, slice1_rate, cfg.traffic.slice2_rate_mbps), cfg.seed)
    sm_node, sm_ep = inprocess_pair("sm")
    node.attach(sm_node)
    sm = SMXApp(sm_ep, store, cfg.traffic.kpm_period_ms,
                meta={"scheduler": "pf" if pf else "drl", "slice1_mbps": slice1_rate,
                      "seed": cfg.seed, "config_hash": cfg.digest(), **(meta or {})})
    rc = None
    if not pf:
        rc_node, rc_ep = inprocess_pair("rc")
        node.attach(rc_node)
        rc = RCXApp(rc_ep, policy, cfg.quantizer)
        sm.listeners.append(rc.on_kpm)
    sm.start()

    def pump():
        sm.pump()
        if rc is not None:
            rc.pump()

    node.run(duration_s, on_boundary=pump)
    pump()
    store.flush()
    return LoopResult(node, sm, rc, store)


__all__ = [
    "run_dataset", "dataset_plan", "run_eval", "run_e2_loop", "summarize", "profiles",
    "EvalResult", "SliceSummary", "RESULT_FIELDS", "SweepCell", "FixedWeight", "TrainedPolicy",
]
