"""Endpoint URLs and socket helpers shared by broker and client.

Two schemes are supported, mirroring the TCP-vs-IPC transport choice:
``tcp://host:port`` and ``local:///path/to/socket`` (a filesystem stream
socket).
"""

from __future__ import annotations

import os
import socket
from dataclasses import dataclass


class EndpointError(ValueError):
    """Unparseable or unsupported endpoint URL."""


@dataclass(frozen=True)
class Endpoint:
    scheme: str  # "tcp" | "local"
    host: str = ""
    port: int = 0
    path: str = ""

    def __str__(self) -> str:
        if self.scheme == "tcp":
            return f"tcp://{self.host}:{self.port}"
        return f"local://{self.path}"


def parse_endpoint(url: str) -> Endpoint:
    if url.startswith("tcp://"):
        rest = url[len("tcp://") :]
        host, sep, port = rest.rpartition(":")
        if not sep or not host:
            raise EndpointError(f"tcp endpoint needs host:port: {url!r}")
        try:
            return Endpoint("tcp", host=host, port=int(port))
        except ValueError:
            raise EndpointError(f"bad port in {url!r}") from None
    if url.startswith("local://"):
        path = url[len("local://") :]
        if not path:
            raise EndpointError(f"local endpoint needs a path: {url!r}")
        return Endpoint("local", path=path)
    raise EndpointError(f"unsupported endpoint scheme: {url!r}")


def open_listener(ep: Endpoint, backlog: int = 128) -> socket.socket:
    if ep.scheme == "tcp":
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((ep.host, ep.port))
    else:
        if os.path.exists(ep.path):
            os.unlink(ep.path)
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        sock.bind(ep.path)
    sock.listen(backlog)
    return sock


def open_connection(ep: Endpoint, timeout: float | None = None) -> socket.socket:
    if ep.scheme == "tcp":
        sock = socket.create_connection((ep.host, ep.port), timeout=timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    else:
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        sock.settimeout(timeout)
        sock.connect(ep.path)
    sock.settimeout(None)
    return sock


def tune_stream_socket(sock: socket.socket) -> None:
    """Options applied to accepted sessions (no-op for unix sockets)."""
    if sock.family == socket.AF_INET:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
