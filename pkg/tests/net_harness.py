"""Shared harness for broker tests: random trees, a scripted operation
driver, and a brute-force delivery oracle computed on the static topology.

Synchronization never uses sleeps for correctness: a barrier flushes every
broker link by sending one message up from each broker's sync client to
the root's sync client, then one message back down. Per-link FIFO makes
the barrier messages queue behind any pending table/advertisement frames.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field

from monplane import client as ddclient
from monplane.broker import Broker, BrokerConfig


@dataclass
class OracleState:
    registered: dict[str, str] = field(default_factory=dict)  # name -> name (owner)
    prefixes: dict[str, set[str]] = field(default_factory=dict)  # client name -> prefixes


class TreeHarness:
    """A tree of brokers with clients attached, plus oracle bookkeeping."""

    def __init__(self, n_brokers: int, rng: random.Random, heartbeat_s: float = 30.0):
        assert n_brokers >= 1
        self.rng = rng
        self.brokers: list[Broker] = []
        self.parent_of: list[int | None] = []
        root = Broker(
            BrokerConfig(listen=("tcp://127.0.0.1:0",), heartbeat_s=heartbeat_s)
        )
        root.start()
        self.brokers.append(root)
        self.parent_of.append(None)
        for i in range(1, n_brokers):
            parent_idx = rng.randrange(i)
            parent_ep = str(self.brokers[parent_idx].bound_endpoints[0])
            b = Broker(
                BrokerConfig(
                    listen=("tcp://127.0.0.1:0",),
                    parent=parent_ep,
                    heartbeat_s=heartbeat_s,
                )
            )
            b.start()
            self.brokers.append(b)
            self.parent_of.append(parent_idx)
        self.sync: list[ddclient.ClientHandle] = []
        for i, b in enumerate(self.brokers):
            ep = str(b.bound_endpoints[0])
            self.sync.append(ddclient.connect(ep, f"_sync{i}", timeout=10.0))
        self.clients: dict[str, ddclient.ClientHandle] = {}
        self.home: dict[str, int] = {}
        self.oracle = OracleState()

    def endpoint(self, broker_idx: int) -> str:
        return str(self.brokers[broker_idx].bound_endpoints[0])

    def add_client(self, name: str, broker_idx: int | None = None) -> ddclient.ClientHandle:
        idx = self.rng.randrange(len(self.brokers)) if broker_idx is None else broker_idx
        handle = ddclient.connect(self.endpoint(idx), name, timeout=10.0)
        self.clients[name] = handle
        self.home[name] = idx
        self.oracle.registered[name] = name
        self.oracle.prefixes[name] = set()
        return handle

    def remove_client(self, name: str) -> None:
        self.clients.pop(name).close()
        self.home.pop(name)
        self.oracle.registered.pop(name, None)
        self.oracle.prefixes.pop(name, None)

    def barrier(self, timeout: float = 10.0) -> None:
        """Flush all broker links (see module docstring)."""
        root_sync = self.sync[0]
        for i, s in enumerate(self.sync):
            s.send("_sync0", f"up{i}".encode())
        got = 0
        deadline = time.monotonic() + timeout
        while got < len(self.sync):
            d = root_sync.receive(timeout=max(0.01, deadline - time.monotonic()))
            if d is None:
                raise TimeoutError("barrier up-wave timed out")
            got += 1
        for i, s in enumerate(self.sync):
            root_sync.send(f"_sync{i}", b"down")
        for s in self.sync:
            if s.receive(timeout=max(0.01, deadline - time.monotonic())) is None:
                raise TimeoutError("barrier down-wave timed out")

    # oracle predictions ------------------------------------------------

    def expected_publish_recipients(self, publisher: str, topic: str) -> set[str]:
        out = set()
        for name, prefixes in self.oracle.prefixes.items():
            if name == publisher:
                if any(topic.startswith(p) for p in prefixes):
                    out.add(name)  # self-delivery only when self-subscribed
                continue
            if any(topic.startswith(p) for p in prefixes):
                out.add(name)
        return out

    def is_routable(self, dest: str) -> bool:
        return dest in self.oracle.registered

    def close(self) -> None:
        for h in list(self.clients.values()):
            h.close()
        for s in self.sync:
            s.close()
        for b in self.brokers:
            b.stop()


def drain_exact(
    handle: ddclient.ClientHandle, count: int, timeout: float = 10.0
) -> list[ddclient.Delivery]:
    """Receive exactly `count` deliveries, then assert none extra arrive."""
    out = []
    deadline = time.monotonic() + timeout
    while len(out) < count:
        d = handle.receive(timeout=max(0.01, deadline - time.monotonic()))
        if d is None:
            raise AssertionError(f"{handle.name}: got {len(out)}/{count} deliveries")
        out.append(d)
    extra = handle.receive(timeout=0.05)
    assert extra is None, f"{handle.name}: unexpected extra delivery {extra}"
    return out
