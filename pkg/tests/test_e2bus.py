import json
import threading

import numpy as np
import pytest

from helpers import random_message
from slicedrl.e2bus import (
    Control,
    ControlAck,
    E2Node,
    EndpointClosed,
    FrameDecoder,
    Indication,
    NeedMoreBytes,
    ProtocolError,
    Subscribe,
    SubscribeAck,
    ValidationError,
    connect_endpoint,
    decode_frame,
    decode_message,
    encode_message,
    inprocess_pair,
    serve_endpoint,
    TcpEndpoint,
)
from slicedrl.ransim import PROPORTIONAL_FAIR, GnbSim
from slicedrl.traffic import TrafficProfile


def frame(obj) -> bytes:
    body = json.dumps(obj).encode()
    return len(body).to_bytes(4, "big") + body


def test_length_prefix():
    data = encode_message(Control(50))
    body = data[4:]
    assert data[:4] == len(body).to_bytes(4, "big")
    assert b'"type":"control"' in body and b'"weight_pct":50' in body
    # a 10-byte JSON body
    assert frame("x" * 8)[:4] == b"\x00\x00\x00\x0a"


def test_roundtrip_randomized():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        m = random_message(rng)
        assert decode_message(encode_message(m)) == m


def test_decode_examples():
    assert decode_message(frame({"type": "subscribe", "report_period_ms": 100})) == Subscribe(100.0)
    assert decode_message(frame({"type": "control", "weight_pct": 70, "extra": 1})) == Control(70)
    with pytest.raises(ValidationError):
        decode_message(frame({"type": "control", "weight_pct": 37}))
    with pytest.raises(ValidationError):
        decode_message(frame({"type": "control", "weight_pct": True}))
    with pytest.raises(NeedMoreBytes):
        decode_message(b"\x00\x00\x00")
    with pytest.raises(NeedMoreBytes):
        decode_message(frame({"type": "control", "weight_pct": 50})[:-1])
    with pytest.raises(ProtocolError):
        decode_message(frame({"type": "nope"}))
    with pytest.raises(ProtocolError):
        decode_message(frame([1, 2]))
    with pytest.raises(ProtocolError):
        decode_message(b"\x00\x00\x00\x02{x")
    with pytest.raises(ProtocolError):
        decode_message(frame({"type": "subscribe"}))
    with pytest.raises(ProtocolError):
        decode_message(b"\xff\xff\xff\xff")


def test_fragmented_stream():
    rng = np.random.default_rng(1)
    msgs = [random_message(rng) for _ in range(300)]
    stream = b"".join(encode_message(m) for m in msgs)
    for trial in range(5):
        dec = FrameDecoder()
        out, pos = [], 0
        while pos < len(stream):
            n = int(rng.integers(1, 64 if trial % 2 else 3000))
            out += dec.feed(stream[pos:pos + n])
            pos += n
        assert out == msgs and dec.pending == 0
    # byte at a time
    dec = FrameDecoder()
    out = []
    for b in stream[:2000]:
        out += dec.feed(bytes([b]))
    m, used = decode_frame(stream)
    assert out[0] == m and used == len(encode_message(msgs[0]))


def _node(sim=None, s1=60.0):
    sim = sim or GnbSim()
    return E2Node(sim, (TrafficProfile(s1), TrafficProfile(117.0)), seed=0)


def _drain(ep):
    out = []
    while (m := ep.recv(timeout=0)) is not None:
        out.append(m)
    return out


def test_subscribe_cadence_and_control_ack():
    node = _node()
    gnb_side, xapp = inprocess_pair()
    node.attach(gnb_side)
    xapp.send(Subscribe(100))
    node.run(0.0)
    ack = _drain(xapp)
    assert len(ack) == 1 and isinstance(ack[0], SubscribeAck)
    node.run(1.0)
    inds = _drain(xapp)
    assert len(inds) == 10 and all(isinstance(m, Indication) for m in inds)
    assert [m.record.window_start_ms for m in inds] == [100.0 * i for i in range(10)]
    xapp.send(Control(70))
    node.run(0.1)
    msgs = _drain(xapp)
    assert isinstance(msgs[0], ControlAck) and msgs[0].applied
    assert node.sim.weight_pct == 70
    assert msgs[1].record.active_weight_pct == 70


def test_control_rejected_in_pf_mode():
    node = _node(GnbSim(mode=PROPORTIONAL_FAIR))
    gnb_side, xapp = inprocess_pair()
    node.attach(gnb_side)
    xapp.send(Control(70))
    node.run(0.01)
    assert _drain(xapp) == [ControlAck(False, 0)]


def test_two_subscriptions_independent():
    node = _node()
    a_gnb, a = inprocess_pair("a")
    b_gnb, b = inprocess_pair("b")
    node.attach(a_gnb)
    node.attach(b_gnb)
    a.send(Subscribe(100))
    b.send(Subscribe(250))
    node.run(2.0)
    ia = [m for m in _drain(a) if isinstance(m, Indication)]
    ib = [m for m in _drain(b) if isinstance(m, Indication)]
    assert len(ia) == 20 and len(ib) == 8
    assert ia[0].subscription_id != ib[0].subscription_id
    # both meters see the same traffic
    assert sum(m.record.slices[0].arrived_bytes for m in ia) == sum(m.record.slices[0].arrived_bytes for m in ib)


@pytest.mark.parametrize("period,dur", [(10.0, 0.55), (100.0, 1.23), (0.5, 0.1)])
def test_cadence_bound(period, dur):
    node = _node()
    g, x = inprocess_pair()
    node.attach(g)
    x.send(Subscribe(period))
    node.run(dur)
    n = sum(isinstance(m, Indication) for m in _drain(x))
    assert abs(n - dur * 1000 / period) <= 1


def test_bad_period_rejected():
    node = _node()
    g, x = inprocess_pair()
    node.attach(g)
    x.send(Subscribe(0.3))
    node.run(0.1)
    assert _drain(x) == []


def test_disconnect_tears_down_subscription_and_keeps_weight():
    node = _node()
    g, x = inprocess_pair()
    node.attach(g)
    x.send(Subscribe(100))
    x.send(Control(80))
    node.run(0.2)
    x.close()
    node.run(0.5)
    assert node.subscriptions == {} and node.endpoints == []
    assert node.sim.weight_pct == 80


def test_inprocess_close():
    a, b = inprocess_pair()
    a.close()
    with pytest.raises(EndpointClosed):
        b.recv(timeout=0.1)


def test_tcp_transport_roundtrip():
    srv = serve_endpoint("127.0.0.1", 0)
    port = srv.getsockname()[1]
    accepted = {}

    def accept():
        conn, _ = srv.accept()
        accepted["ep"] = TcpEndpoint(conn)

    t = threading.Thread(target=accept)
    t.start()
    client = connect_endpoint("127.0.0.1", port)
    t.join(5)
    server = accepted["ep"]
    try:
        rng = np.random.default_rng(5)
        msgs = [random_message(rng) for _ in range(200)]
        for m in msgs:
            client.send(m)
        got = [server.recv(timeout=5) for _ in msgs]
        assert got == msgs
        server.send(Control(25))
        assert client.recv(timeout=5) == Control(25)
        client.close()
        with pytest.raises(EndpointClosed):
            server.recv(timeout=5)
    finally:
        server.close()
        srv.close()


def test_port_in_use():
    srv = serve_endpoint("127.0.0.1", 0)
    try:
        with pytest.raises(OSError):
            s2 = serve_endpoint("127.0.0.1", srv.getsockname()[1])
            s2.close()
    finally:
        srv.close()


def test_node_over_tcp():
    srv = serve_endpoint("127.0.0.1", 0)
    port = srv.getsockname()[1]
    client = connect_endpoint("127.0.0.1", port)
    conn, _ = srv.accept()
    node = _node()
    node.attach(TcpEndpoint(conn))
    try:
        client.send(Subscribe(100))
        # wait for the subscribe to arrive before simulated time starts
        for _ in range(500):
            node.poll()
            if node.subscriptions:
                break
            threading.Event().wait(0.01)
        node.run(1.0)
        msgs = [client.recv(timeout=5) for _ in range(11)]
        assert isinstance(msgs[0], SubscribeAck)
        assert sum(isinstance(m, Indication) for m in msgs) == 10
    finally:
        client.close()
        srv.close()
