"""A toy E2-style bus between the simulated gNB and the RIC xApps.

Wire format: a 4-byte big-endian body length followed by a UTF-8 JSON object
whose ``"type"`` field names the message. Unknown JSON fields are ignored on
decode. Two transports carry the same frames: an in-process queue pair and TCP.

The gNB side (:class:`E2Node`) runs on simulated time: indications are emitted
whenever a subscription's reporting period of slots has elapsed, and inbound
messages are handled only at slot boundaries.
"""
from __future__ import annotations

import itertools
import json
import logging
import queue
import socket
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Union

from .core import ActionSpace
from .kpm import KpmRecord, SliceKpm
from .ransim import GnbSim, SchedulerModeError, _WindowMeter
from .traffic import TrafficProfile, slot_arrivals

log = logging.getLogger(__name__)

DEFAULT_PORT = 36421
HEADER = struct.Struct("!I")
MAX_FRAME = 16 * 1024 * 1024

__all__ = [
    "Subscribe", "SubscribeAck", "Indication", "Control", "ControlAck", "KpmRecord", "SliceKpm",
    "encode_message", "decode_message", "FrameDecoder", "NeedMoreBytes", "ProtocolError",
    "ValidationError", "InProcessEndpoint", "inprocess_pair", "TcpEndpoint", "serve_endpoint",
    "connect_endpoint", "E2Node", "DEFAULT_PORT",
]


class NeedMoreBytes(Exception):
    """The buffer does not yet hold a complete frame."""


class ProtocolError(ValueError):
    pass


class ValidationError(ProtocolError):
    pass


class EndpointClosed(ConnectionError):
    pass


@dataclass(frozen=True)
class Subscribe:
    report_period_ms: float


@dataclass(frozen=True)
class SubscribeAck:
    subscription_id: int


@dataclass(frozen=True)
class Indication:
    subscription_id: int
    record: KpmRecord


@dataclass(frozen=True)
class Control:
    weight_pct: int


@dataclass(frozen=True)
class ControlAck:
    applied: bool
    slot_index: int


E2Message = Union[Subscribe, SubscribeAck, Indication, Control, ControlAck]

_SPACE = ActionSpace()


def _body(msg: E2Message) -> dict:
    if isinstance(msg, Subscribe):
        return {"type": "subscribe", "report_period_ms": msg.report_period_ms}
    if isinstance(msg, SubscribeAck):
        return {"type": "subscribe_ack", "subscription_id": msg.subscription_id}
    if isinstance(msg, Indication):
        return {"type": "indication", "subscription_id": msg.subscription_id,
                "kpm": msg.record.to_dict()}
    if isinstance(msg, Control):
        return {"type": "control", "weight_pct": msg.weight_pct}
    if isinstance(msg, ControlAck):
        return {"type": "control_ack", "applied": msg.applied, "slot_index": msg.slot_index}
    raise TypeError(f"not an E2 message: {msg!r}")


def encode_message(msg: E2Message) -> bytes:
    body = json.dumps(_body(msg), sort_keys=True, separators=(",", ":")).encode("utf-8")
    return HEADER.pack(len(body)) + body


def _parse(obj) -> E2Message:
    if not isinstance(obj, dict):
        raise ProtocolError("message body must be a JSON object")
    kind = obj.get("type")
    try:
        if kind == "subscribe":
            period = float(obj["report_period_ms"])
            if not period > 0:
                raise ValidationError("report period must be positive")
            return Subscribe(period)
        if kind == "subscribe_ack":
            return SubscribeAck(int(obj["subscription_id"]))
        if kind == "indication":
            return Indication(int(obj["subscription_id"]), KpmRecord.from_dict(obj["kpm"]))
        if kind == "control":
            w = obj["weight_pct"]
            if isinstance(w, bool) or not isinstance(w, (int, float)) or w != int(w) or int(w) not in _SPACE:
                raise ValidationError(f"weight {w!r} is not in the action space")
            return Control(int(w))
        if kind == "control_ack":
            return ControlAck(bool(obj["applied"]), int(obj["slot_index"]))
    except ProtocolError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed {kind} message: {exc}") from exc
    raise ProtocolError(f"unknown message type {kind!r}")


def decode_message(data: bytes) -> E2Message:
    """Decode the single frame at the start of ``data``."""
    msg, _ = decode_frame(data)
    return msg


def decode_frame(data: bytes) -> tuple[E2Message, int]:
    """Decode one frame; returns the message and the number of bytes consumed."""
    if len(data) < HEADER.size:
        raise NeedMoreBytes(HEADER.size - len(data))
    (n,) = HEADER.unpack_from(data)
    if n > MAX_FRAME:
        raise ProtocolError(f"frame of {n} bytes exceeds the {MAX_FRAME} byte limit")
    end = HEADER.size + n
    if len(data) < end:
        raise NeedMoreBytes(end - len(data))
    try:
        obj = json.loads(bytes(data[HEADER.size:end]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"body is not valid JSON: {exc}") from exc
    return _parse(obj), end


class FrameDecoder:
    """Reassembles messages from an arbitrarily fragmented byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[E2Message]:
        self._buf += data
        out = []
        while True:
            try:
                msg, used = decode_frame(self._buf)
            except NeedMoreBytes:
                return out
            del self._buf[:used]
            out.append(msg)

    @property
    def pending(self) -> int:
        return len(self._buf)


class InProcessEndpoint:
    """One side of an in-process channel; frames travel as bytes through thread-safe queues."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, name: str = ""):
        self._inbox = inbox
        self._outbox = outbox
        self.name = name
        self.closed = False

    def send(self, msg: E2Message) -> None:
        if self.closed:
            raise EndpointClosed(self.name)
        self._outbox.put(encode_message(msg))

    def recv(self, timeout: float | None = None) -> E2Message | None:
        """Next message, or None when nothing arrives in time. ``timeout=0`` polls."""
        try:
            frame = self._inbox.get(block=timeout != 0, timeout=timeout or None)
        except queue.Empty:
            return None
        if frame is None:
            self.closed = True
            raise EndpointClosed(self.name)
        return decode_message(frame)

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._outbox.put(None)


def inprocess_pair(name: str = "inproc") -> tuple[InProcessEndpoint, InProcessEndpoint]:
    a, b = queue.Queue(), queue.Queue()
    return InProcessEndpoint(a, b, f"{name}/node"), InProcessEndpoint(b, a, f"{name}/xapp")


class TcpEndpoint:
    """Framed messages over a connected socket.

    A background reader thread decodes inbound frames into a queue, so sending
    never waits on the peer reading.
    """

    def __init__(self, sock: socket.socket, name: str = ""):
        self.sock = sock
        self.name = name or str(sock.getpeername() if sock else "")
        self.closed = False
        self._send_lock = threading.Lock()
        self._inbox: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self):
        dec = FrameDecoder()
        try:
            while True:
                chunk = self.sock.recv(65536)
                if not chunk:
                    break
                for msg in dec.feed(chunk):
                    self._inbox.put(msg)
        except ProtocolError as exc:
            log.warning("%s: protocol error, dropping connection: %s", self.name, exc)
        except OSError:
            pass
        self._inbox.put(None)

    def send(self, msg: E2Message) -> None:
        if self.closed:
            raise EndpointClosed(self.name)
        data = encode_message(msg)
        try:
            with self._send_lock:
                self.sock.sendall(data)
        except OSError as exc:
            self.closed = True
            raise EndpointClosed(self.name) from exc

    def recv(self, timeout: float | None = None) -> E2Message | None:
        try:
            msg = self._inbox.get(block=timeout != 0, timeout=timeout or None)
        except queue.Empty:
            return None
        if msg is None:
            self.closed = True
            raise EndpointClosed(self.name)
        return msg

    def close(self) -> None:
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def serve_endpoint(host: str = "127.0.0.1", port: int = DEFAULT_PORT) -> socket.socket:
    """Listening socket for the gNB side; raises OSError when the port is taken."""
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen()
    return srv


def connect_endpoint(host: str = "127.0.0.1", port: int = DEFAULT_PORT, timeout: float = 5.0) -> TcpEndpoint:
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return TcpEndpoint(sock)


class _Subscription:
    def __init__(self, sid: int, endpoint, period_slots: int, period_ms: float, sim: GnbSim, start_slot: int):
        self.sid = sid
        self.endpoint = endpoint
        self.period_slots = period_slots
        self.period_ms = period_ms
        self.meter = _WindowMeter(sim)
        self.next_slot = start_slot + period_slots
        self.window_start_slot = start_slot
        self.weight = sim.weight_pct
        self.sent = 0


class E2Node:
    """gNB-side E2 agent wrapping a :class:`GnbSim` and its offered traffic."""

    def __init__(
        self,
        sim: GnbSim,
        traffic: tuple[TrafficProfile, TrafficProfile],
        seed: int = 0,
        poll_ms: float = 10.0,
    ):
        self.sim = sim
        self.traffic = traffic
        self.seeds = (seed * 2 + 1, seed * 2 + 2)
        self.poll_slots = max(1, int(round(poll_ms / sim.cfg.slot_ms)))
        self.endpoints: list = []
        self.subscriptions: dict[int, _Subscription] = {}
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        self.controls_applied = 0

    def attach(self, endpoint) -> None:
        with self._lock:
            self.endpoints.append(endpoint)

    def detach(self, endpoint) -> None:
        with self._lock:
            if endpoint in self.endpoints:
                self.endpoints.remove(endpoint)
            for sid in [s for s, sub in self.subscriptions.items() if sub.endpoint is endpoint]:
                del self.subscriptions[sid]
        log.info("endpoint %s detached; holding weight %s", getattr(endpoint, "name", endpoint),
                 self.sim.weight_pct)

    def poll(self) -> int:
        """Handle every message already waiting on any endpoint."""
        handled = 0
        with self._lock:
            endpoints = list(self.endpoints)
        for ep in endpoints:
            while True:
                try:
                    msg = ep.recv(timeout=0)
                except EndpointClosed:
                    self.detach(ep)
                    break
                except ProtocolError as exc:
                    log.warning("dropping malformed message: %s", exc)
                    continue
                if msg is None:
                    break
                self._handle(ep, msg)
                handled += 1
        return handled

    def _reply(self, ep, msg) -> None:
        try:
            ep.send(msg)
        except EndpointClosed:
            self.detach(ep)

    def _handle(self, ep, msg) -> None:
        if isinstance(msg, Subscribe):
            slots = msg.report_period_ms / self.sim.cfg.slot_ms
            if slots < 1 or abs(slots - round(slots)) > 1e-9:
                log.warning("rejecting report period %s ms: not a whole number of slots",
                            msg.report_period_ms)
                return
            sid = next(self._ids)
            sub = _Subscription(sid, ep, int(round(slots)), msg.report_period_ms, self.sim,
                                self.sim.slot_index)
            self.subscriptions[sid] = sub
            self._reply(ep, SubscribeAck(sid))
        elif isinstance(msg, Control):
            try:
                self.sim.apply_control(msg.weight_pct)
                applied = True
                self.controls_applied += 1
            except (SchedulerModeError, ValueError) as exc:
                log.warning("control rejected: %s", exc)
                applied = False
            self._reply(ep, ControlAck(applied, self.sim.slot_index))
        else:
            log.debug("ignoring %s from xApp side", type(msg).__name__)

    def _emit_due(self) -> None:
        slot = self.sim.slot_index
        slot_ms = self.sim.cfg.slot_ms
        for sub in list(self.subscriptions.values()):
            if slot >= sub.next_slot:
                rec = sub.meter.close(sub.window_start_slot * slot_ms, sub.period_ms, sub.weight)
                sub.window_start_slot = slot
                sub.next_slot = slot + sub.period_slots
                sub.sent += 1
                self._reply(sub.endpoint, Indication(sub.sid, rec))
            sub.weight = self.sim.weight_pct

    def _advance(self, n: int) -> None:
        start = self.sim.slot_index
        slot_ms = self.sim.cfg.slot_ms
        a1 = slot_arrivals(self.traffic[0], start, n, slot_ms, self.seeds[0]).tolist()
        a2 = slot_arrivals(self.traffic[1], start, n, slot_ms, self.seeds[1]).tolist()
        adv = self.sim._advance
        for k in range(n):
            adv(a1[k], a2[k])

    def run(
        self,
        duration_s: float,
        on_boundary: Callable[[], None] | None = None,
        should_stop: Callable[[], bool] | None = None,
    ) -> None:
        """Advance ``duration_s`` of simulated time.

        Inbound messages are handled every poll interval and at every reporting
        boundary; ``on_boundary`` runs right after indications are sent, before
        the node polls, which lets an in-process caller drive its xApps in lockstep.
        """
        end = self.sim.slot_index + int(round(duration_s * 1000 / self.sim.cfg.slot_ms))
        self.poll()
        while self.sim.slot_index < end:
            if should_stop is not None and should_stop():
                break
            nxt = min([end, self.sim.slot_index + self.poll_slots]
                      + [s.next_slot for s in self.subscriptions.values()])
            self._advance(nxt - self.sim.slot_index)
            self._emit_due()
            if on_boundary is not None:
                on_boundary()
            self.poll()
            # a fresh control takes effect for the window that starts now
            for sub in self.subscriptions.values():
                if sub.window_start_slot == self.sim.slot_index:
                    sub.weight = self.sim.weight_pct
