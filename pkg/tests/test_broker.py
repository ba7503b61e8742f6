import random
import socket
import time

import pytest

from monplane import client as ddclient
from monplane import protocol
from monplane.broker import Broker, BrokerConfig, PAYLOAD_KINDS
from monplane.protocol import FrameKind, StreamDecoder

from net_harness import TreeHarness, drain_exact


@pytest.fixture
def broker():
    b = Broker(BrokerConfig(listen=("tcp://127.0.0.1:0",), heartbeat_s=30.0))
    b.start()
    yield b
    b.stop()


def _endpoint(b):
    return str(b.bound_endpoints[0])


class RawPeer:
    """Bare socket speaking the wire protocol, for scripted broker tests."""

    def __init__(self, broker):
        ep = broker.bound_endpoints[0]
        self.sock = socket.create_connection((ep.host, ep.port))
        self.sock.settimeout(5.0)
        self.decoder = StreamDecoder()
        self.frames = []

    def emit(self, frame):
        self.sock.sendall(protocol.encode(frame))

    def expect(self, kind, timeout=5.0):
        deadline = time.monotonic() + timeout
        while True:
            for i, f in enumerate(self.frames):
                if f.kind == kind:
                    return self.frames.pop(i)
            self.sock.settimeout(max(0.01, deadline - time.monotonic()))
            data = self.sock.recv(65536)
            if not data:
                raise AssertionError("connection closed while waiting")
            self.frames.extend(self.decoder.feed(data))

    def close(self):
        self.sock.close()


def test_register_collision_and_lifecycle(broker):
    p1, p2 = RawPeer(broker), RawPeer(broker)
    p1.emit(protocol.register("mon1"))
    p1.expect(FrameKind.REG_OK)
    p2.emit(protocol.register("mon1"))
    assert p2.expect(FrameKind.REG_ERR).reason == "name taken"
    # double registration on one session
    p1.emit(protocol.register("other"))
    assert p1.expect(FrameKind.REG_ERR).reason == "already registered"
    # unregister then register again succeeds
    p1.emit(protocol.unregister())
    p1.emit(protocol.register("mon1"))
    p1.expect(FrameKind.REG_OK)
    p1.close()
    p2.close()


def test_local_send_delivery(broker):
    ep = _endpoint(broker)
    a = ddclient.connect(ep, "a")
    c = ddclient.connect(ep, "c")
    a.send("c", b"payload")
    d = c.receive(timeout=5)
    assert (d.kind, d.origin, d.data) == ("direct", "a", b"payload")
    a.close()
    c.close()


def test_no_route_at_root(broker):
    ep = _endpoint(broker)
    a = ddclient.connect(ep, "a")
    a.send("ghost", b"x")
    evt = a.poll_error(timeout=5)
    assert evt is not None and evt.kind == "no-route" and evt.dest == "ghost"
    a.close()


def test_publish_prefix_semantics(broker):
    # a subscription on "A" receives topics "A" and "ABCD"
    ep = _endpoint(broker)
    pub = ddclient.connect(ep, "pub")
    s = ddclient.connect(ep, "s")
    s.subscribe("A")
    time.sleep(0.1)
    pub.publish("A", b"1")
    pub.publish("ABCD", b"2")
    got = {drain_one(s).origin for _ in range(2)}
    assert got == {"A", "ABCD"}
    # prefix longer than topic does not match
    s.subscribe("ABCDE")
    time.sleep(0.1)
    pub.publish("AB", b"3")
    assert drain_one(s).origin == "AB"  # via the "A" prefix only, once
    assert s.receive(timeout=0.1) is None
    pub.close()
    s.close()


def drain_one(handle):
    d = handle.receive(timeout=5)
    assert d is not None
    return d


def test_overlapping_prefixes_deliver_once(broker):
    ep = _endpoint(broker)
    pub = ddclient.connect(ep, "pub")
    s = ddclient.connect(ep, "s")
    s.subscribe("per")
    s.subscribe("perf")
    time.sleep(0.1)
    pub.publish("perf.link1", b"v")
    assert drain_one(s).origin == "perf.link1"
    assert s.receive(timeout=0.2) is None, "duplicate delivery for overlapping prefixes"
    pub.close()
    s.close()


def test_publisher_not_self_delivered_unless_subscribed(broker):
    ep = _endpoint(broker)
    pub = ddclient.connect(ep, "pub")
    pub.publish("t.x", b"1")  # zero subscribers: silently dropped
    assert pub.receive(timeout=0.2) is None
    pub.subscribe("t.")
    time.sleep(0.1)
    pub.publish("t.x", b"2")
    assert drain_one(pub).data == b"2"
    pub.close()


def test_unknown_session_send_closed(broker):
    p = RawPeer(broker)
    p.emit(protocol.send("x", "y", b""))
    p.sock.settimeout(5.0)
    assert p.sock.recv(100) == b""  # broker closed the session
    p.close()


# ---------------------------------------------------------------------------
# tree behavior


def test_cross_subtree_send_and_hop_count():
    rng = random.Random(5)
    h = TreeHarness(1, rng)
    try:
        root_ep = h.endpoint(0)
        b1 = Broker(BrokerConfig(listen=("tcp://127.0.0.1:0",), parent=root_ep, heartbeat_s=30.0))
        b2 = Broker(BrokerConfig(listen=("tcp://127.0.0.1:0",), parent=root_ep, heartbeat_s=30.0))
        b1.start()
        b2.start()
        time.sleep(0.2)
        a = ddclient.connect(str(b1.bound_endpoints[0]), "a")
        c = ddclient.connect(str(b2.bound_endpoints[0]), "c")
        before1 = b1.parent_link_payload_frames()
        before2 = b2.parent_link_payload_frames()
        a.send("c", b"x")
        assert drain_one(c).origin == "a"
        # exactly one SEND up b1's link, one SEND down b2's link
        assert b1.parent_link_payload_frames() - before1 == 1
        assert b2.parent_link_payload_frames() - before2 == 1
        a.close()
        c.close()
        b1.stop()
        b2.stop()
    finally:
        h.close()


def test_collision_across_subtrees():
    rng = random.Random(6)
    h = TreeHarness(3, rng)
    try:
        h.add_client("mon1", broker_idx=1)
        with pytest.raises(ddclient.NameTaken):
            ddclient.connect(h.endpoint(2), "mon1", timeout=10.0)
    finally:
        h.close()


def test_locality_zero_parent_frames():
    rng = random.Random(7)
    h = TreeHarness(3, rng)
    try:
        a = h.add_client("a", broker_idx=1)
        b = h.add_client("b", broker_idx=1)
        h.barrier()
        base = h.brokers[1].parent_link_payload_frames()
        for i in range(50):
            a.send("b", b"%d" % i)
        drain_exact(b, 50)
        assert h.brokers[1].parent_link_payload_frames() == base
    finally:
        h.close()


def test_fifo_per_sender_pair():
    rng = random.Random(8)
    h = TreeHarness(2, rng)
    try:
        a = h.add_client("a", broker_idx=1)
        b = h.add_client("b", broker_idx=0)
        for i in range(200):
            a.send("b", b"%d" % i)
        got = [int(d.data) for d in drain_exact(b, 200)]
        assert got == list(range(200))
    finally:
        h.close()


def test_partitioned_child_keeps_local_delivery():
    rng = random.Random(9)
    h = TreeHarness(2, rng)
    try:
        a = h.add_client("a", broker_idx=1)
        b = h.add_client("b", broker_idx=1)
        c = h.add_client("c", broker_idx=0)
        h.barrier()
        child = h.brokers[1]
        child.drop_parent_link(allow_reconnect=False)
        deadline = time.monotonic() + 5
        while child.has_parent_link and time.monotonic() < deadline:
            time.sleep(0.02)
        assert not child.has_parent_link
        # names of the partitioned subtree withdrawn from the root
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline and "a" in h.brokers[0].routing_table():
            time.sleep(0.02)
        assert "a" not in h.brokers[0].routing_table()
        c.send("a", b"x")
        evt = c.poll_error(timeout=5)
        assert evt is not None and evt.dest == "a"
        # local messaging inside the partition still works
        a.send("b", b"still here")
        assert drain_one(b).data == b"still here"
    finally:
        h.close()


# ---------------------------------------------------------------------------
# heartbeats with a scripted clock


class FakeClock:
    def __init__(self):
        self.t = 1000.0

    def __call__(self):
        return self.t

    def advance(self, dt):
        self.t += dt


def test_heartbeat_expires_silent_session():
    clock = FakeClock()
    b = Broker(
        BrokerConfig(listen=("tcp://127.0.0.1:0",), heartbeat_s=2.0, miss_limit=3),
        clock=clock,
        start_heartbeat=False,
    )
    b.start()
    try:
        silent = RawPeer(b)
        silent.emit(protocol.register("mute"))
        silent.expect(FrameKind.REG_OK)
        talker = ddclient.connect(_endpoint(b), "talker")
        assert "mute" in b.routing_table()
        for step in range(3):
            clock.advance(2.0)
            expired = b.heartbeat_tick()
            time.sleep(0.1)  # let any PONGs land
            if step < 2:
                assert expired == []
        deadline = time.monotonic() + 5
        while "mute" in b.routing_table() and time.monotonic() < deadline:
            time.sleep(0.02)
        assert "mute" not in b.routing_table()
        talker.send("mute", b"x")
        evt = talker.poll_error(timeout=5)
        assert evt is not None and evt.dest == "mute"
        talker.close()
    finally:
        b.stop()


def test_heartbeat_answering_client_survives():
    clock = FakeClock()
    b = Broker(
        BrokerConfig(listen=("tcp://127.0.0.1:0",), heartbeat_s=2.0, miss_limit=3),
        clock=clock,
        start_heartbeat=False,
    )
    b.start()
    try:
        alive = ddclient.connect(_endpoint(b), "alive")
        for _ in range(100):
            clock.advance(2.0)
            expired = b.heartbeat_tick()
            assert expired == []
            time.sleep(0.01)  # real time for the PONG round trip
        assert "alive" in b.routing_table()
        alive.close()
    finally:
        b.stop()


# ---------------------------------------------------------------------------
# randomized topology property (small version; the full one is acceptance C1)


def test_randomized_topology_oracle_small():
    rng = random.Random(42)
    for round_no in range(5):
        run_random_topology_round(rng, n_ops=40)


def run_random_topology_round(rng, n_ops, n_brokers=None, n_clients=None):
    """One randomized round: phases of subscription changes followed by
    traffic, with delivered sets checked against the brute-force oracle.

    Every phase settles all outstanding traffic, applies subscription
    mutations (flushed to the local broker via a self-send marker, then
    propagated tree-wide via the barrier), and only then sends traffic, so
    the oracle's expectations are exact.
    """
    h = TreeHarness(n_brokers or rng.randint(1, 5), rng)
    try:
        n_clients = n_clients or rng.randint(2, 8)
        for i in range(n_clients):
            h.add_client(f"c{i}")
        h.barrier()
        names = sorted(h.clients)
        topics = ["perf.link1", "perf.link2", "risk.a", "alarm.x", "zz"]
        prefixes = ["perf", "perf.link", "risk.", "", "alarm"]
        expected_errors = {n: 0 for n in names}
        seq = 0
        ops_left = n_ops
        while ops_left > 0:
            # mutate subscriptions
            n_mut = min(ops_left, rng.randint(0, 3))
            mutated = set()
            for _ in range(n_mut):
                name = rng.choice(names)
                prefix = rng.choice(prefixes)
                if prefix in h.oracle.prefixes[name]:
                    h.clients[name].unsubscribe(prefix)
                    h.oracle.prefixes[name].discard(prefix)
                else:
                    h.clients[name].subscribe(prefix)
                    h.oracle.prefixes[name].add(prefix)
                mutated.add(name)
            ops_left -= n_mut
            for name in mutated:
                h.clients[name].send(name, b"_flush")
                d = drain_exact(h.clients[name], 1)[0]
                assert d.data == b"_flush"
            h.barrier()
            # traffic
            expected = {n: [] for n in names}
            n_traffic = min(ops_left, rng.randint(5, 15))
            ops_left -= n_traffic
            for _ in range(n_traffic):
                if rng.random() < 0.5:
                    sender = rng.choice(names)
                    dest = rng.choice(names + ["ghost1", "ghost2"])
                    payload = b"m%d" % seq
                    seq += 1
                    h.clients[sender].send(dest, payload)
                    if h.is_routable(dest):
                        expected[dest].append(("direct", sender, payload))
                    else:
                        expected_errors[sender] += 1
                else:
                    publisher = rng.choice(names)
                    topic = rng.choice(topics)
                    payload = b"p%d" % seq
                    seq += 1
                    h.clients[publisher].publish(topic, payload)
                    for r in h.expected_publish_recipients(publisher, topic):
                        expected[r].append(("pub", topic, payload))
            # settle and compare against the oracle
            for name in names:
                want = expected[name]
                got = drain_exact(h.clients[name], len(want))
                got_set = sorted((d.kind, d.origin, d.data) for d in got)
                assert got_set == sorted(want), f"{name}: delivered set mismatch"
                for sender in names:
                    sent_order = [p for k, s, p in want if k == "direct" and s == sender]
                    recv_order = [
                        d.data for d in got if d.kind == "direct" and d.origin == sender
                    ]
                    assert recv_order == sent_order, f"{name}: FIFO from {sender} broken"
        for name in names:
            for _ in range(expected_errors[name]):
                assert h.clients[name].poll_error(timeout=5) is not None
            assert h.clients[name].poll_error(timeout=0.05) is None
    finally:
        h.close()


def test_table_convergence_after_events():
    rng = random.Random(11)
    h = TreeHarness(3, rng)
    try:
        for i in range(6):
            h.add_client(f"c{i}")
        for i in (1, 3):
            h.remove_client(f"c{i}")
        h.add_client("c1")
        h.barrier()
        # every broker's confirmed table must match the from-scratch tables:
        # a name appears at broker B iff B is on the path from the name's
        # home broker to the root.
        expected_names = set(h.clients)
        for bi, b in enumerate(h.brokers):
            table = {n for n in b.routing_table() if not n.startswith("_sync")}
            want = set()
            for name, home in h.home.items():
                node = home
                while node is not None:
                    if node == bi:
                        want.add(name)
                        break
                    node = h.parent_of[node]
            assert table == want, f"broker {bi}: {table} != {want}"
        assert expected_names == set(h.home)
    finally:
        h.close()
