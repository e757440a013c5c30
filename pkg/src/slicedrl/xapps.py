"""Slice-Monitoring and Resource-Control xApps plus the KPM store they share."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import threading
from collections import defaultdict
from pathlib import Path
from typing import Callable, Iterable

from .core import ActionSpace, DelayTable, IncompleteDatasetError, QuantizerConfig, quantize_arrival_rate
from .e2bus import Control, ControlAck, EndpointClosed, Indication, Subscribe, SubscribeAck
from .kpm import KpmRecord
from .policy import FixedWeight, PolicyError, ProportionalFair, TrainedPolicy

log = logging.getLogger(__name__)

DELAY_TABLE_HEADER = ["state_mbps", "weight_pct", "mean_delay_ms", "mean_loss_pct", "mean_served_mbps"]

__all__ = [
    "KpmStore", "StoreError", "SMXApp", "RCXApp", "rc_on_state", "sm_on_indication",
    "aggregate_delay_table", "write_delay_table", "read_delay_table",
    "TrainedPolicy", "FixedWeight", "ProportionalFair", "PolicyError",
]


class StoreError(IOError):
    pass


class KpmStore:
    """Append-only log of KPM rows, in memory or backed by a JSONL file.

    Each row is ``{"meta": {...}, "kpm": {...}}``. One writer at a time; reads
    never modify the log.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._rows: list[dict] = []
        self._lock = threading.Lock()
        self._fh = None
        if self.path is not None and self.path.exists():
            self._rows = [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]

    def append(self, record: KpmRecord, **meta) -> dict:
        row = {"meta": meta, "kpm": record.to_dict()}
        with self._lock:
            if self.path is not None:
                try:
                    if self._fh is None:
                        self._fh = open(self.path, "a")
                    self._fh.write(json.dumps(row, sort_keys=True) + "\n")
                except OSError as exc:
                    raise StoreError(f"cannot append to {self.path}: {exc}") from exc
            self._rows.append(row)
        return row

    def extend(self, records: Iterable[KpmRecord], **meta) -> None:
        for r in records:
            self.append(r, **meta)

    def flush(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.flush()

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    def __len__(self):
        return len(self._rows)

    def rows(self) -> list[dict]:
        with self._lock:
            return [json.loads(json.dumps(r)) for r in self._rows]

    def records(self, **where) -> list[tuple[dict, KpmRecord]]:
        with self._lock:
            rows = list(self._rows)
        return [
            (r["meta"], KpmRecord.from_dict(r["kpm"]))
            for r in rows
            if all(r["meta"].get(k) == v for k, v in where.items())
        ]

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def sm_on_indication(record: KpmRecord, store: KpmStore, **meta) -> dict:
    return store.append(record, **meta)


def aggregate_delay_table(
    store: KpmStore | Iterable[tuple[dict, KpmRecord]],
    quant: QuantizerConfig = QuantizerConfig(),
    space: ActionSpace = ActionSpace(),
) -> DelayTable:
    """Average the Slice-1 KPMs of each (state, weight) cell.

    The cell comes from the row metadata (``state_mbps``, ``weight_pct``) when
    present, else from the quantized measured rate and the record's active weight.
    Windows that completed no SDU carry no delay sample and are skipped.
    """
    rows = store.records() if isinstance(store, KpmStore) else list(store)
    groups = defaultdict(lambda: ([], [], []))
    for meta, rec in rows:
        s1 = rec.slices[0]
        state = meta.get("state_mbps")
        if state is None:
            state = quantize_arrival_rate(s1.arrival_mbps, quant).quantized_rate_mbps
        weight = meta.get("weight_pct", rec.active_weight_pct)
        if weight is None or s1.sdu_count == 0:
            continue
        d, l, v = groups[(float(state), int(weight))]
        d.append(s1.mean_sdu_delay_ms)
        l.append(s1.loss_pct)
        v.append(s1.served_mbps)
    table = DelayTable()
    for key, (d, l, v) in groups.items():
        # fsum keeps the mean independent of row order
        table.delays[key] = math.fsum(d) / len(d)
        table.loss_pct[key] = math.fsum(l) / len(l)
        table.served_mbps[key] = math.fsum(v) / len(v)
    table.check_complete(quant, space)
    return table


def delay_table_csv(table: DelayTable, comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DELAY_TABLE_HEADER)
    for key in sorted(table.delays):
        w.writerow([f"{key[0]:g}", key[1], repr(table.delays[key]),
                    repr(table.loss_pct.get(key, 0.0)), repr(table.served_mbps.get(key, 0.0))])
    return buf.getvalue()


def write_delay_table(table: DelayTable, path: str | Path, comment: str | None = None) -> None:
    Path(path).write_text(delay_table_csv(table, comment))


def read_delay_table(path: str | Path) -> DelayTable:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    table = DelayTable()
    for r in csv.DictReader(lines):
        key = (float(r["state_mbps"]), int(r["weight_pct"]))
        table.delays[key] = float(r["mean_delay_ms"])
        table.loss_pct[key] = float(r["mean_loss_pct"])
        table.served_mbps[key] = float(r["mean_served_mbps"])
    return table


def rc_on_state(
    measured_rate: float,
    policy,
    quant: QuantizerConfig = QuantizerConfig(),
    last_weight: int | None = None,
    always: bool = False,
) -> Control | None:
    """Control message for the measured Slice-1 arrival rate, or None for no-op."""
    if isinstance(policy, ProportionalFair):
        return None
    if isinstance(policy, TrainedPolicy):
        state = quantize_arrival_rate(measured_rate, quant).quantized_rate_mbps
        weight = policy.weight_for_state(state)
    elif isinstance(policy, FixedWeight):
        weight = policy.weight_pct
    elif callable(policy):
        weight = int(policy(measured_rate))
    else:
        raise PolicyError(f"unsupported policy handle {policy!r}")
    if not always and weight == last_weight:
        return None
    return Control(weight)


class SMXApp:
    """Subscribes to KPM indications, persists them, and hands the state on."""

    def __init__(self, endpoint, store: KpmStore, period_ms: float = 100.0, meta: dict | None = None):
        self.endpoint = endpoint
        self.store = store
        self.period_ms = period_ms
        self.meta = dict(meta or {})
        self.subscription_id: int | None = None
        self.listeners: list[Callable[[KpmRecord], None]] = []
        self.received = 0

    def start(self) -> None:
        self.endpoint.send(Subscribe(self.period_ms))

    def handle(self, msg) -> None:
        if isinstance(msg, SubscribeAck):
            self.subscription_id = msg.subscription_id
        elif isinstance(msg, Indication):
            if msg.subscription_id != self.subscription_id:
                log.warning("indication for unknown subscription %s", msg.subscription_id)
                return
            self.received += 1
            sm_on_indication(msg.record, self.store, **self.meta)
            for fn in self.listeners:
                fn(msg.record)

    def pump(self, timeout: float = 0) -> int:
        n = 0
        while True:
            msg = self.endpoint.recv(timeout=timeout if n == 0 else 0)
            if msg is None:
                return n
            self.handle(msg)
            n += 1

    def run_forever(self, stop: threading.Event) -> None:
        try:
            while not stop.is_set():
                self.pump(timeout=0.05)
        except EndpointClosed:
            log.info("SM xApp: gNB connection closed")
        finally:
            self.store.flush()


class RCXApp:
    """Turns Slice-1 arrival-rate observations into weight controls."""

    def __init__(self, endpoint, policy, quant: QuantizerConfig = QuantizerConfig(), always: bool = False):
        self.endpoint = endpoint
        self.policy = policy
        self.quant = quant
        self.always = always
        self.last_weight: int | None = None
        self.sent: list[int] = []
        self.acks: list[ControlAck] = []

    def on_state(self, measured_rate: float) -> Control | None:
        msg = rc_on_state(measured_rate, self.policy, self.quant, self.last_weight, self.always)
        if msg is not None:
            self.endpoint.send(msg)
            self.last_weight = msg.weight_pct
            self.sent.append(msg.weight_pct)
        return msg

    def on_kpm(self, record: KpmRecord) -> None:
        self.on_state(record.slices[0].arrival_mbps)

    def handle(self, msg) -> None:
        if isinstance(msg, ControlAck):
            self.acks.append(msg)
            if not msg.applied:
                log.warning("gNB rejected control at slot %d", msg.slot_index)
                self.last_weight = None

    def pump(self, timeout: float = 0) -> int:
        n = 0
        while True:
            msg = self.endpoint.recv(timeout=timeout if n == 0 else 0)
            if msg is None:
                return n
            self.handle(msg)
            n += 1

    def run_forever(self, stop: threading.Event) -> None:
        try:
            while not stop.is_set():
                self.pump(timeout=0.05)
        except EndpointClosed:
            log.info("RC xApp: gNB connection closed")
