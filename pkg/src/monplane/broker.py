"""Name-routing message broker.

Brokers form a tree: each broker serves locally connected clients and
child brokers, and optionally attaches to one parent. Point-to-point
messages take the shortest path through the tree (traffic between two
clients of the same broker never leaves it); publications flood along
subscription advertisements so they reach exactly the subtrees holding a
matching prefix.

Registrations are confirmed end-to-end: a ROUTE_ADD travels to the root
and the root's echo travels back down the same links, so a name is only
REG_OK'd once every ancestor accepted it. A ROUTE_DEL from the parent
for a pending name is a rejection (collision somewhere above).

Locking: the routing/subscription tables are mutated under one lock whose
scope never spans I/O; frames are placed on per-session FIFO queues while
holding it, and per-session writer threads drain those queues.
"""

from __future__ import annotations

import collections
import enum
import itertools
import json
import logging
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from . import protocol
from .protocol import Frame, FrameKind, StreamDecoder
from .transport import Endpoint, open_connection, open_listener, parse_endpoint, tune_stream_socket

log = logging.getLogger(__name__)

DEFAULT_HEARTBEAT_S = 2.0
DEFAULT_MISS_LIMIT = 3

#: Frame kinds that carry application payloads (used by locality checks;
#: heartbeat and table-maintenance frames are bookkeeping, not traffic).
PAYLOAD_KINDS = frozenset(
    {FrameKind.SEND, FrameKind.DELIVER, FrameKind.PUB, FrameKind.PUBDELIVER}
)

_MAX_QUEUE_BYTES = 64 * 1024 * 1024
_PENDING_SEND_CAP = 65536
_PENDING_SEND_TTL_S = 30.0


class PeerKind(enum.Enum):
    UNKNOWN = "unknown"
    CLIENT = "client"
    CHILD = "child"
    PARENT = "parent"


class Session:
    """One transport connection plus its outbound FIFO queue."""

    _ids = itertools.count(1)

    def __init__(self, sock: socket.socket, label: str, clock: Callable[[], float]):
        self.id = next(Session._ids)
        self.sock = sock
        self.label = label
        self.kind = PeerKind.UNKNOWN
        self.name: Optional[str] = None  # registered name (clients only)
        self.last_heard = clock()
        self.last_ping_sent = 0.0
        self.closed = False
        self.rx: collections.Counter = collections.Counter()
        self.tx: collections.Counter = collections.Counter()
        self._queue: collections.deque[bytes] = collections.deque()
        self._queued_bytes = 0
        self._cv = threading.Condition()

    def enqueue(self, wire: bytes, kind: FrameKind) -> None:
        self.tx[kind] += 1
        with self._cv:
            if self.closed:
                return
            self._queue.append(wire)
            self._queued_bytes += len(wire)
            self._cv.notify()

    def writer_loop(self) -> None:
        while True:
            with self._cv:
                while not self._queue and not self.closed:
                    self._cv.wait()
                if self.closed and not self._queue:
                    return
                chunks = list(self._queue)
                self._queue.clear()
                self._queued_bytes = 0
            try:
                self.sock.sendall(b"".join(chunks))
            except OSError:
                return

    def overloaded(self) -> bool:
        return self._queued_bytes > _MAX_QUEUE_BYTES

    def shutdown(self) -> None:
        with self._cv:
            self.closed = True
            self._cv.notify_all()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass


@dataclass
class RouteEntry:
    next_hop: Session
    confirmed: bool = False


@dataclass
class BrokerConfig:
    listen: tuple[str, ...] = ()
    parent: Optional[str] = None
    heartbeat_s: float = DEFAULT_HEARTBEAT_S
    miss_limit: int = DEFAULT_MISS_LIMIT
    stats_topic: Optional[str] = None
    reconnect_parent: bool = True


class Broker:
    """Routes frames between clients, child brokers and an optional parent."""

    def __init__(
        self,
        config: BrokerConfig,
        *,
        clock: Callable[[], float] = time.monotonic,
        start_heartbeat: bool = True,
    ):
        self.config = config
        self.clock = clock
        self._lock = threading.RLock()
        self._sessions: dict[int, Session] = {}
        self._routes: dict[str, RouteEntry] = {}
        self._subs: dict[str, set[Session]] = {}
        self._advertised_up: set[str] = set()
        self._advertised_down: dict[int, set[str]] = {}
        self._parent: Optional[Session] = None
        self._parent_endpoint: Optional[Endpoint] = (
            parse_endpoint(config.parent) if config.parent else None
        )
        # One (origin, timestamp) entry per SEND forwarded to another broker,
        # so each upstream ERR_NO_ROUTE maps back to one originating session
        # (FIFO per destination). Entries for sends that succeeded elsewhere
        # can never be acked away, so they expire by TTL instead.
        self._pending_sends: dict[str, collections.deque[tuple[int, float]]] = {}
        self._pending_send_count = 0
        self._listeners: list[socket.socket] = []
        self._threads: list[threading.Thread] = []
        self._stopping = threading.Event()
        self._start_heartbeat = start_heartbeat
        self.bound_endpoints: list[Endpoint] = []

    # ------------------------------------------------------------------
    # lifecycle

    def start(self) -> None:
        for url in self.config.listen:
            ep = parse_endpoint(url)
            listener = open_listener(ep)
            if ep.scheme == "tcp" and ep.port == 0:
                ep = Endpoint("tcp", host=ep.host, port=listener.getsockname()[1])
            self.bound_endpoints.append(ep)
            self._listeners.append(listener)
            self._spawn(self._accept_loop, listener, name=f"accept-{ep}")
        if self._parent_endpoint is not None:
            self._spawn(self._parent_loop, name="parent-link")
        if self._start_heartbeat:
            self._spawn(self._heartbeat_loop, name="heartbeat")
        if self.config.stats_topic:
            self._spawn(self._stats_loop, name="stats")

    def stop(self) -> None:
        self._stopping.set()
        for listener in self._listeners:
            try:
                listener.shutdown(socket.SHUT_RDWR)  # wakes a blocked accept()
            except OSError:
                pass
            try:
                listener.close()
            except OSError:
                pass
        with self._lock:
            sessions = list(self._sessions.values())
        for sess in sessions:
            sess.shutdown()
        for t in self._threads:
            t.join(timeout=2.0)

    def __enter__(self) -> "Broker":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()

    def _spawn(self, target, *args, name: str) -> None:
        t = threading.Thread(target=target, args=args, name=f"broker-{name}", daemon=True)
        t.start()
        self._threads.append(t)

    # ------------------------------------------------------------------
    # accept / parent attach

    def _accept_loop(self, listener: socket.socket) -> None:
        while not self._stopping.is_set():
            try:
                sock, addr = listener.accept()
            except OSError:
                return
            tune_stream_socket(sock)
            label = f"peer:{addr}" if addr else "peer:local"
            self._attach_session(sock, label, PeerKind.UNKNOWN)

    def _attach_session(self, sock: socket.socket, label: str, kind: PeerKind) -> Session:
        sess = Session(sock, label, self.clock)
        sess.kind = kind
        with self._lock:
            self._sessions[sess.id] = sess
        threading.Thread(
            target=sess.writer_loop, name=f"broker-write-{sess.id}", daemon=True
        ).start()
        threading.Thread(
            target=self._reader_loop, args=(sess,), name=f"broker-read-{sess.id}", daemon=True
        ).start()
        return sess

    def _parent_loop(self) -> None:
        backoff = 0.5
        while not self._stopping.is_set():
            try:
                sock = open_connection(self._parent_endpoint, timeout=5.0)
            except OSError:
                if not self.config.reconnect_parent:
                    return
                self._stopping.wait(backoff)
                backoff = min(backoff * 2, 8.0)
                continue
            backoff = 0.5
            sess = self._attach_session(sock, "parent", PeerKind.PARENT)
            with self._lock:
                self._parent = sess
                self._readvertise_to_parent_locked()
            # wait until this parent session dies before reconnecting
            while not self._stopping.is_set() and not sess.closed:
                self._stopping.wait(0.2)
            if not self.config.reconnect_parent:
                return

    def _readvertise_to_parent_locked(self) -> None:
        parent = self._parent
        if parent is None:
            return
        for name in self._routes:
            self._emit(parent, protocol.route_add(name))
        self._advertised_up = set()
        for prefix in self._subs:
            self._refresh_parent_ad_locked(prefix)

    # ------------------------------------------------------------------
    # reading and dispatch

    def _reader_loop(self, sess: Session) -> None:
        decoder = StreamDecoder()
        sock = sess.sock
        while not sess.closed:
            try:
                data = sock.recv(65536)
            except OSError:
                break
            if not data:
                break
            sess.last_heard = self.clock()
            try:
                frames = decoder.feed(data)
            except protocol.ProtocolError as exc:
                log.warning("%s: codec error, closing session: %s", sess.label, exc)
                break
            for frame in frames:
                sess.rx[frame.kind] += 1
                try:
                    self._dispatch(sess, frame)
                except _SessionViolation as exc:
                    log.warning("%s: %s, closing session", sess.label, exc)
                    self._teardown(sess)
                    return
            if sess.overloaded():
                log.warning("%s: outbound queue overflow, closing session", sess.label)
                break
        self._teardown(sess)

    def _dispatch(self, sess: Session, frame: Frame) -> None:
        kind = frame.kind
        if kind == FrameKind.PING:
            self._emit(sess, protocol.pong())
        elif kind == FrameKind.PONG:
            pass
        elif kind == FrameKind.SEND:
            self._route_send(frame, sess)
        elif kind == FrameKind.PUB:
            if sess.kind != PeerKind.CLIENT or sess.name is None:
                raise _SessionViolation("PUB from non-registered session")
            if not frame.topic:
                raise _SessionViolation("PUB with empty topic")
            self._handle_publish(frame.topic, sess.name, frame.data, sess)
        elif kind == FrameKind.PUBDELIVER:
            if sess.kind not in (PeerKind.CHILD, PeerKind.PARENT):
                raise _SessionViolation("PUBDELIVER from non-broker session")
            self._handle_publish(frame.topic, frame.src, frame.data, sess)
        elif kind == FrameKind.REGISTER:
            self._handle_register(frame.name, sess)
        elif kind == FrameKind.UNREGISTER:
            self._handle_unregister(sess)
        elif kind == FrameKind.SUB:
            self._handle_sub(frame.prefix, sess)
        elif kind == FrameKind.UNSUB:
            self._handle_unsub(frame.prefix, sess)
        elif kind == FrameKind.ROUTE_ADD:
            self._handle_route_add(frame.name, sess)
        elif kind == FrameKind.ROUTE_DEL:
            self._handle_route_del(frame.name, sess)
        elif kind == FrameKind.ERR_NO_ROUTE:
            self._handle_no_route(frame.dest, sess)
        else:
            raise _SessionViolation(f"unexpected {kind.name} at broker")

    # ------------------------------------------------------------------
    # point-to-point

    def _route_send(self, frame: Frame, origin: Session) -> None:
        if origin.kind == PeerKind.UNKNOWN:
            raise _SessionViolation("SEND before REGISTER/ROUTE_ADD")
        with self._lock:
            entry = self._routes.get(frame.dest)
            if entry is not None:
                hop = entry.next_hop
                if hop.kind == PeerKind.CLIENT:
                    self._emit(hop, protocol.deliver(frame.src, frame.data))
                else:
                    self._record_pending_send(frame.dest, origin)
                    self._emit(hop, frame)
                return
            if self._parent is not None and origin is not self._parent:
                self._record_pending_send(frame.dest, origin)
                self._emit(self._parent, frame)
                return
            # no route provable here (root, or stale downward forward)
            self._emit(origin, protocol.err_no_route(frame.dest))

    def _record_pending_send(self, dest: str, origin: Session) -> None:
        if self._pending_send_count >= _PENDING_SEND_CAP:
            self._purge_pending_sends_locked(self.clock())
            if self._pending_send_count >= _PENDING_SEND_CAP:
                return  # bounded memory; a late error for old traffic is dropped
        self._pending_sends.setdefault(dest, collections.deque()).append(
            (origin.id, self.clock())
        )
        self._pending_send_count += 1

    def _purge_pending_sends_locked(self, now: float) -> None:
        horizon = now - _PENDING_SEND_TTL_S
        for dest in list(self._pending_sends):
            queue = self._pending_sends[dest]
            while queue and queue[0][1] < horizon:
                queue.popleft()
                self._pending_send_count -= 1
            if not queue:
                del self._pending_sends[dest]

    def _handle_no_route(self, dest: str, sess: Session) -> None:
        if sess.kind not in (PeerKind.CHILD, PeerKind.PARENT):
            raise _SessionViolation("ERR_NO_ROUTE from a client")
        with self._lock:
            queue = self._pending_sends.get(dest)
            if not queue:
                return
            sid, _ = queue.popleft()
            self._pending_send_count -= 1
            if not queue:
                del self._pending_sends[dest]
            origin = self._sessions.get(sid)
            if origin is not None and not origin.closed:
                self._emit(origin, protocol.err_no_route(dest))

    # ------------------------------------------------------------------
    # registration / route propagation

    def _handle_register(self, name: str, sess: Session) -> None:
        if sess.kind == PeerKind.UNKNOWN:
            sess.kind = PeerKind.CLIENT
        if sess.kind != PeerKind.CLIENT:
            raise _SessionViolation("REGISTER from broker link")
        with self._lock:
            if sess.name is not None:
                self._emit(sess, protocol.reg_err("already registered"))
                return
            if not name or name in self._routes:
                self._emit(sess, protocol.reg_err("name taken"))
                return
            sess.name = name
            if self._parent is None:
                self._routes[name] = RouteEntry(sess, confirmed=True)
                self._emit(sess, protocol.reg_ok())
            else:
                self._routes[name] = RouteEntry(sess, confirmed=False)
                self._emit(self._parent, protocol.route_add(name))

    def _handle_unregister(self, sess: Session) -> None:
        if sess.kind != PeerKind.CLIENT:
            raise _SessionViolation("UNREGISTER from broker link")
        with self._lock:
            name = sess.name
            sess.name = None
            if name is not None and name in self._routes:
                del self._routes[name]
                if self._parent is not None:
                    self._emit(self._parent, protocol.route_del(name))
            self._drop_subscriber_locked(sess)

    def _handle_route_add(self, name: str, sess: Session) -> None:
        if sess.kind == PeerKind.UNKNOWN:
            self._promote_to_child(sess)
        with self._lock:
            if sess is self._parent:
                # ack from above: the whole ancestor chain accepted `name`
                entry = self._routes.get(name)
                if entry is None or entry.confirmed:
                    return
                entry.confirmed = True
                if entry.next_hop.kind == PeerKind.CLIENT:
                    self._emit(entry.next_hop, protocol.reg_ok())
                else:
                    self._emit(entry.next_hop, protocol.route_add(name))
                return
            if sess.kind != PeerKind.CHILD:
                raise _SessionViolation("ROUTE_ADD from a client")
            entry = self._routes.get(name)
            if entry is not None and entry.next_hop is not sess:
                self._emit(sess, protocol.route_del(name))
                return
            if entry is not None and entry.confirmed:
                self._emit(sess, protocol.route_add(name))  # idempotent re-ack
                return
            if entry is None:
                entry = RouteEntry(sess, confirmed=False)
                self._routes[name] = entry
            if self._parent is None:
                entry.confirmed = True
                self._emit(sess, protocol.route_add(name))
            else:
                self._emit(self._parent, protocol.route_add(name))

    def _handle_route_del(self, name: str, sess: Session) -> None:
        with self._lock:
            entry = self._routes.get(name)
            if sess is self._parent:
                if entry is None:
                    return
                # pending: rejection from an ancestor; confirmed: forced
                # withdrawal after a partition merge collision
                del self._routes[name]
                hop = entry.next_hop
                if hop.kind == PeerKind.CLIENT:
                    if entry.confirmed:
                        hop_to_close = hop
                    else:
                        hop.name = None
                        self._emit(hop, protocol.reg_err("name taken"))
                        return
                else:
                    self._emit(hop, protocol.route_del(name))
                    return
            elif sess.kind == PeerKind.CHILD:
                if entry is None or entry.next_hop is not sess:
                    return
                del self._routes[name]
                if self._parent is not None:
                    self._emit(self._parent, protocol.route_del(name))
                return
            else:
                raise _SessionViolation("ROUTE_DEL from a client")
        self._teardown(hop_to_close)

    def _promote_to_child(self, sess: Session) -> None:
        with self._lock:
            if sess.kind != PeerKind.UNKNOWN:
                return
            sess.kind = PeerKind.CHILD
            self._advertised_down[sess.id] = set()
            # sync the child with every prefix the rest of the tree wants
            for prefix in self._subs:
                self._refresh_child_ad_locked(prefix, sess)

    # ------------------------------------------------------------------
    # pub/sub

    def _handle_sub(self, prefix: str, sess: Session) -> None:
        if sess.kind == PeerKind.UNKNOWN:
            self._promote_to_child(sess)
        if sess.kind == PeerKind.CLIENT and sess.name is None:
            raise _SessionViolation("SUB before registration")
        with self._lock:
            self._subs.setdefault(prefix, set()).add(sess)
            self._refresh_ads_locked(prefix)

    def _handle_unsub(self, prefix: str, sess: Session) -> None:
        with self._lock:
            subscribers = self._subs.get(prefix)
            if subscribers is None or sess not in subscribers:
                return
            subscribers.discard(sess)
            if not subscribers:
                del self._subs[prefix]
            self._refresh_ads_locked(prefix)

    def _handle_publish(self, topic: str, src: str, data: bytes, origin: Session) -> None:
        with self._lock:
            targets: set[Session] = set()
            for prefix, subscribers in self._subs.items():
                if topic.startswith(prefix):
                    targets.update(subscribers)
            # never echo back on the broker link a publication arrived on;
            # a self-subscribed local publisher does receive its own message
            if origin.kind in (PeerKind.CHILD, PeerKind.PARENT):
                targets.discard(origin)
            if targets:
                frame = protocol.pubdeliver(topic, src, data)
                wire = protocol.encode(frame)
                for target in targets:
                    target.enqueue(wire, FrameKind.PUBDELIVER)

    def _refresh_ads_locked(self, prefix: str) -> None:
        self._refresh_parent_ad_locked(prefix)
        for sess in self._sessions.values():
            if sess.kind == PeerKind.CHILD:
                self._refresh_child_ad_locked(prefix, sess)

    def _refresh_parent_ad_locked(self, prefix: str) -> None:
        parent = self._parent
        if parent is None:
            return
        subscribers = self._subs.get(prefix, set())
        want = any(s is not parent for s in subscribers)
        have = prefix in self._advertised_up
        if want and not have:
            self._advertised_up.add(prefix)
            self._emit(parent, protocol.sub(prefix))
        elif have and not want:
            self._advertised_up.discard(prefix)
            self._emit(parent, protocol.unsub(prefix))

    def _refresh_child_ad_locked(self, prefix: str, child: Session) -> None:
        advertised = self._advertised_down.setdefault(child.id, set())
        subscribers = self._subs.get(prefix, set())
        want = any(s is not child for s in subscribers)
        have = prefix in advertised
        if want and not have:
            advertised.add(prefix)
            self._emit(child, protocol.sub(prefix))
        elif have and not want:
            advertised.discard(prefix)
            self._emit(child, protocol.unsub(prefix))

    def _drop_subscriber_locked(self, sess: Session) -> None:
        for prefix in [p for p, subs in self._subs.items() if sess in subs]:
            self._subs[prefix].discard(sess)
            if not self._subs[prefix]:
                del self._subs[prefix]
            self._refresh_ads_locked(prefix)

    # ------------------------------------------------------------------
    # liveness

    def heartbeat_tick(self, now: Optional[float] = None) -> list[Session]:
        """Ping idle sessions; expire those silent past the miss budget."""
        now = self.clock() if now is None else now
        interval = self.config.heartbeat_s
        deadline = interval * self.config.miss_limit
        expired: list[Session] = []
        with self._lock:
            sessions = list(self._sessions.values())
            self._purge_pending_sends_locked(now)
        for sess in sessions:
            idle = now - sess.last_heard
            if idle >= deadline:
                expired.append(sess)
            elif idle >= interval and now - sess.last_ping_sent >= interval:
                sess.last_ping_sent = now
                self._emit(sess, protocol.ping())
        for sess in expired:
            log.info("%s: expired after %.1fs of silence", sess.label, now - sess.last_heard)
            self._teardown(sess)
        return expired

    def _heartbeat_loop(self) -> None:
        interval = self.config.heartbeat_s
        while not self._stopping.wait(interval / 2):
            self.heartbeat_tick()

    # ------------------------------------------------------------------
    # teardown

    def _teardown(self, sess: Session) -> None:
        with self._lock:
            if sess.id not in self._sessions:
                return
            del self._sessions[sess.id]
            was_parent = sess is self._parent
            if was_parent:
                self._parent = None
                self._advertised_up = set()
            # withdraw every name routed through this session
            lost = [n for n, e in self._routes.items() if e.next_hop is sess]
            for name in lost:
                del self._routes[name]
                if self._parent is not None:
                    self._emit(self._parent, protocol.route_del(name))
            if was_parent:
                # partition: this broker now acts as the root of its subtree
                for name, entry in self._routes.items():
                    if not entry.confirmed:
                        entry.confirmed = True
                        if entry.next_hop.kind == PeerKind.CLIENT:
                            self._emit(entry.next_hop, protocol.reg_ok())
                        else:
                            self._emit(entry.next_hop, protocol.route_add(name))
            self._advertised_down.pop(sess.id, None)
            self._drop_subscriber_locked(sess)
        sess.shutdown()

    # ------------------------------------------------------------------
    # frame emission and stats

    def _emit(self, sess: Session, frame: Frame) -> None:
        sess.enqueue(protocol.encode(frame), frame.kind)

    def stats(self) -> dict[str, dict[str, dict[str, int]]]:
        """Per-link frame counters: {label: {"rx": {...}, "tx": {...}}}."""
        with self._lock:
            out = {}
            for sess in self._sessions.values():
                label = sess.label
                if sess is self._parent:
                    label = "parent"
                elif sess.kind == PeerKind.CLIENT and sess.name:
                    label = f"client:{sess.name}"
                out[label] = {
                    "rx": {k.name: v for k, v in sess.rx.items()},
                    "tx": {k.name: v for k, v in sess.tx.items()},
                }
            return out

    def parent_link_payload_frames(self) -> int:
        """Payload-bearing frames that crossed the parent link, both ways."""
        with self._lock:
            if self._parent is None:
                return 0
            sess = self._parent
            return sum(sess.rx[k] + sess.tx[k] for k in PAYLOAD_KINDS)

    def _stats_loop(self) -> None:
        topic = self.config.stats_topic
        while not self._stopping.wait(1.0):
            payload = json.dumps(self.stats(), sort_keys=True).encode()
            # publish as if from a local pseudo-client named "_broker"
            with self._lock:
                targets: set[Session] = set()
                for prefix, subscribers in self._subs.items():
                    if topic.startswith(prefix):
                        targets.update(subscribers)
                if targets:
                    wire = protocol.encode(protocol.pubdeliver(topic, "_broker", payload))
                    for target in targets:
                        target.enqueue(wire, FrameKind.PUBDELIVER)

    # test/introspection helpers -----------------------------------------

    def drop_parent_link(self, allow_reconnect: bool = True) -> None:
        """Sever the parent link (partition injection for tests)."""
        with self._lock:
            parent = self._parent
            if not allow_reconnect:
                self.config.reconnect_parent = False
        if parent is not None:
            self._teardown(parent)

    def routing_table(self) -> dict[str, str]:
        with self._lock:
            return {
                name: (
                    f"client:{e.next_hop.name}"
                    if e.next_hop.kind == PeerKind.CLIENT
                    else f"link:{e.next_hop.id}"
                )
                for name, e in self._routes.items()
                if e.confirmed
            }

    def subscription_table(self) -> dict[str, int]:
        with self._lock:
            return {prefix: len(subs) for prefix, subs in self._subs.items()}

    @property
    def has_parent_link(self) -> bool:
        with self._lock:
            return self._parent is not None


class _SessionViolation(Exception):
    """Peer broke the session protocol; the connection is closed."""
