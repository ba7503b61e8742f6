"""Client-side messaging library.

The messaging surface is exactly four calls — send, receive, subscribe
(plus unsubscribe), publish — over a registered, heartbeat-maintained
connection to the closest broker. Every other module in this package
communicates only through these calls.

Payloads are opaque: the library never imposes a serialization, peers
agree on their own sub-protocols.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass
from typing import Optional

from . import protocol
from .protocol import Frame, FrameKind, StreamDecoder
from .transport import open_connection, parse_endpoint

log = logging.getLogger(__name__)

DEFAULT_REGISTER_TIMEOUT_S = 5.0
_BACKOFF_START_S = 0.5
_BACKOFF_CAP_S = 8.0


class ClientError(Exception):
    pass


class ConnectFailed(ClientError):
    pass


class NameTaken(ClientError):
    pass


class RegisterTimeout(ClientError):
    pass


class NotConnected(ClientError):
    pass


class Disconnected(ClientError):
    pass


class EmptyTopic(ClientError):
    pass


@dataclass(frozen=True)
class Delivery:
    """One inbound message: direct (kind="direct") or pub (kind="pub")."""

    kind: str
    origin: str  # sender identity for direct, full topic for pub
    data: bytes
    publisher: Optional[str] = None  # publisher identity on pub deliveries


@dataclass(frozen=True)
class ErrorEvent:
    """Asynchronous delivery failure surfaced out-of-band."""

    kind: str  # "no-route"
    dest: str


_CLOSED = object()


class ClientHandle:
    """A registered connection to a broker; safe to share across threads."""

    def __init__(
        self,
        endpoint: str,
        name: str,
        *,
        timeout: float = DEFAULT_REGISTER_TIMEOUT_S,
        reconnect: bool = False,
        heartbeat_s: float = 2.0,
        miss_limit: int = 3,
    ):
        if not name:
            raise ValueError("client name must be non-empty")
        self.name = name
        self._endpoint = parse_endpoint(endpoint)
        self._timeout = timeout
        self._reconnect = reconnect
        self._heartbeat_s = heartbeat_s
        self._miss_limit = miss_limit
        self._sock = None
        self._send_lock = threading.Lock()
        self._state = "disconnected"
        self._state_lock = threading.Lock()
        self._reg_result: queue.Queue = queue.Queue()
        self._inbox: queue.Queue = queue.Queue()
        self._events: queue.Queue = queue.Queue()
        self._subscribed: set[str] = set()
        self._last_heard = 0.0
        self._closing = threading.Event()
        self._threads: list[threading.Thread] = []
        self._connect_and_register()
        self._spawn(self._heartbeat_loop, "heartbeat")

    # ------------------------------------------------------------------
    # lifecycle

    def _connect_and_register(self) -> None:
        try:
            self._sock = open_connection(self._endpoint, timeout=self._timeout)
        except OSError as exc:
            raise ConnectFailed(f"{self._endpoint}: {exc}") from None
        self._last_heard = time.monotonic()
        self._state = "registering"
        self._spawn(self._reader_loop, "reader")
        self._raw_send(protocol.register(self.name))
        try:
            outcome = self._reg_result.get(timeout=self._timeout)
        except queue.Empty:
            self._shutdown_socket()
            raise RegisterTimeout(f"no registration reply within {self._timeout}s") from None
        if outcome != "ok":
            self._shutdown_socket()
            if "taken" in outcome or "registered" in outcome:
                raise NameTaken(outcome)
            raise ConnectFailed(outcome)
        self._state = "ready"

    def _spawn(self, target, name: str) -> None:
        t = threading.Thread(target=target, name=f"client-{self.name}-{name}", daemon=True)
        t.start()
        self._threads.append(t)

    def close(self) -> None:
        """Unregister and drop the connection."""
        self._closing.set()
        if self._state == "ready":
            try:
                self._raw_send(protocol.unregister())
            except ClientError:
                pass
        self._shutdown_socket()
        self._state = "closed"
        self._inbox.put(_CLOSED)

    def __enter__(self) -> "ClientHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    @property
    def state(self) -> str:
        return self._state

    # ------------------------------------------------------------------
    # the messaging surface

    def send(self, identity: str, data: bytes) -> None:
        """Hand a direct message for `identity` to the transport.

        Routing failures surface later as a no-route ErrorEvent, not here.
        """
        self._require_ready()
        self._raw_send(protocol.send(identity, self.name, data))

    def receive(self, timeout: Optional[float] = None) -> Optional[Delivery]:
        """Next delivery in broker order; None on timeout.

        Raises Disconnected once the connection is gone (and will not be
        re-established) and the queue has drained.
        """
        while True:
            if self._state in ("closed", "disconnected") and self._inbox.empty():
                raise Disconnected("connection lost")
            try:
                item = self._inbox.get(timeout=timeout if timeout is not None else 0.5)
            except queue.Empty:
                if timeout is not None:
                    return None
                continue
            if item is _CLOSED:
                self._inbox.put(_CLOSED)  # keep visible for other readers
                raise Disconnected("connection lost")
            return item

    def subscribe(self, prefix: str) -> None:
        """Install a topic-prefix filter ("" matches every publication)."""
        self._require_ready()
        self._subscribed.add(prefix)
        self._raw_send(protocol.sub(prefix))

    def unsubscribe(self, prefix: str) -> None:
        self._require_ready()
        self._subscribed.discard(prefix)
        self._raw_send(protocol.unsub(prefix))

    def publish(self, topic: str, data: bytes) -> None:
        if not topic:
            raise EmptyTopic("publish needs a non-empty topic")
        self._require_ready()
        self._raw_send(protocol.pub(topic, data))

    def poll_error(self, timeout: float = 0.0) -> Optional[ErrorEvent]:
        """Pop the next asynchronous error event, if any."""
        try:
            return self._events.get(timeout=timeout) if timeout else self._events.get_nowait()
        except queue.Empty:
            return None

    # ------------------------------------------------------------------
    # internals

    def _require_ready(self) -> None:
        if self._state != "ready":
            raise NotConnected(f"handle is {self._state}")

    def _raw_send(self, frame: Frame) -> None:
        wire = protocol.encode(frame)
        with self._send_lock:
            sock = self._sock
            if sock is None:
                raise NotConnected("no transport")
            try:
                sock.sendall(wire)
            except OSError as exc:
                raise NotConnected(str(exc)) from None

    def _reader_loop(self) -> None:
        sock = self._sock
        decoder = StreamDecoder()
        while not self._closing.is_set():
            try:
                data = sock.recv(65536)
            except OSError:
                break
            if not data:
                break
            self._last_heard = time.monotonic()
            try:
                frames = decoder.feed(data)
            except protocol.ProtocolError as exc:
                log.warning("client %s: codec error: %s", self.name, exc)
                break
            for frame in frames:
                self._dispatch(frame)
        if not self._closing.is_set():
            self._on_connection_lost()

    def _dispatch(self, frame: Frame) -> None:
        kind = frame.kind
        if kind == FrameKind.DELIVER:
            self._inbox.put(Delivery("direct", frame.src, frame.data))
        elif kind == FrameKind.PUBDELIVER:
            self._inbox.put(Delivery("pub", frame.topic, frame.data, publisher=frame.src))
        elif kind == FrameKind.PING:
            try:
                self._raw_send(protocol.pong())
            except ClientError:
                pass
        elif kind == FrameKind.PONG:
            pass
        elif kind == FrameKind.REG_OK:
            self._reg_result.put("ok")
        elif kind == FrameKind.REG_ERR:
            self._reg_result.put(frame.reason or "rejected")
        elif kind == FrameKind.ERR_NO_ROUTE:
            self._events.put(ErrorEvent("no-route", frame.dest))
        else:
            log.warning("client %s: unexpected %s from broker", self.name, kind.name)

    def _heartbeat_loop(self) -> None:
        interval = self._heartbeat_s
        while not self._closing.wait(interval / 2):
            if self._state != "ready":
                continue
            idle = time.monotonic() - self._last_heard
            if idle >= interval * self._miss_limit:
                self._on_connection_lost()
            elif idle >= interval:
                try:
                    self._raw_send(protocol.ping())
                except ClientError:
                    pass

    def _on_connection_lost(self) -> None:
        with self._state_lock:
            if self._state in ("closed", "disconnected", "reconnecting"):
                return
            self._state = "reconnecting" if self._reconnect else "disconnected"
        self._shutdown_socket()
        if self._reconnect:
            self._spawn(self._reconnect_loop, "reconnect")
        else:
            self._inbox.put(_CLOSED)

    def _reconnect_loop(self) -> None:
        backoff = _BACKOFF_START_S
        while not self._closing.is_set():
            time.sleep(backoff)
            backoff = min(backoff * 2, _BACKOFF_CAP_S)
            try:
                self._sock = open_connection(self._endpoint, timeout=self._timeout)
            except OSError:
                continue
            self._last_heard = time.monotonic()
            self._state = "registering"
            while not self._reg_result.empty():  # drop stale replies
                self._reg_result.get_nowait()
            self._spawn(self._reader_loop, "reader")
            try:
                self._raw_send(protocol.register(self.name))
                outcome = self._reg_result.get(timeout=self._timeout)
            except (ClientError, queue.Empty):
                self._shutdown_socket()
                continue
            if outcome != "ok":
                log.warning("client %s: re-registration rejected: %s", self.name, outcome)
                self._shutdown_socket()
                continue
            for prefix in sorted(self._subscribed):
                try:
                    self._raw_send(protocol.sub(prefix))
                except ClientError:
                    break
            else:
                self._state = "ready"
                return
        self._state = "disconnected"
        self._inbox.put(_CLOSED)

    def _shutdown_socket(self) -> None:
        sock, self._sock = self._sock, None
        if sock is not None:
            try:
                sock.close()
            except OSError:
                pass


def connect(endpoint: str, name: str, **kwargs) -> ClientHandle:
    """Connect to a broker and register `name`; returns a ready handle."""
    return ClientHandle(endpoint, name, **kwargs)
