"""Broker throughput/latency benchmark.

A sender/receiver pair flood point-to-point messages through one broker.
Both ends live in this process, so receive timestamps compare directly
against the send timestamps embedded in the payload (same clock). The
sender flags the end of a run with a FIN payload; messages large enough
carry a sequence number and a send timestamp in their first 16 bytes.
"""

from __future__ import annotations

import struct
import threading
import time
from dataclasses import asdict, dataclass

from . import client as ddclient

_HEADER = struct.Struct(">Qd")  # sequence, send-timestamp
_FIN = b"\xffFIN"


@dataclass(frozen=True)
class BenchReport:
    payload_bytes: int
    duration_s: float
    sent: int
    received: int
    msgs_per_s: float
    goodput_bytes_per_s: float
    latency_p50_ms: float | None
    latency_p90_ms: float | None
    latency_p99_ms: float | None

    def to_dict(self) -> dict:
        return asdict(self)


def _percentile(sorted_values: list[float], q: float) -> float:
    idx = min(len(sorted_values) - 1, int(q * len(sorted_values)))
    return sorted_values[idx]


def bench_broker(
    endpoint: str,
    payload_bytes: int = 100,
    duration_s: float = 5.0,
    latency_sample_every: int = 100,
) -> BenchReport:
    """Flood for `duration_s`; returns receiver-side throughput stats."""
    recv_handle = ddclient.connect(endpoint, "bench-recv")
    send_handle = ddclient.connect(endpoint, "bench-send")

    stats = {"received": 0, "first_ts": None, "last_ts": None}
    latencies: list[float] = []
    done = threading.Event()

    def receiver() -> None:
        while True:
            try:
                delivery = recv_handle.receive(timeout=10.0)
            except ddclient.Disconnected:
                break
            if delivery is None:
                break
            if delivery.data == _FIN:
                break
            now = time.monotonic()
            if stats["first_ts"] is None:
                stats["first_ts"] = now
            stats["last_ts"] = now
            stats["received"] += 1
            if len(delivery.data) >= _HEADER.size:
                seq, sent_at = _HEADER.unpack_from(delivery.data)
                if seq % latency_sample_every == 0:
                    latencies.append((now - sent_at) * 1000.0)
        done.set()

    rx_thread = threading.Thread(target=receiver, name="bench-receiver")
    rx_thread.start()

    padding = b"\x00" * max(0, payload_bytes - _HEADER.size)
    deadline = time.monotonic() + duration_s
    seq = 0
    while time.monotonic() < deadline:
        if payload_bytes >= _HEADER.size:
            payload = _HEADER.pack(seq, time.monotonic()) + padding
        else:
            payload = b"\x00" * payload_bytes
        send_handle.send("bench-recv", payload)
        seq += 1
    send_handle.send("bench-recv", _FIN)
    done.wait(timeout=30.0)
    rx_thread.join(timeout=5.0)
    send_handle.close()
    recv_handle.close()

    received = stats["received"]
    if received and stats["last_ts"] > stats["first_ts"]:
        elapsed = stats["last_ts"] - stats["first_ts"]
        rate = received / elapsed
    else:
        elapsed = duration_s
        rate = received / duration_s
    latencies.sort()
    return BenchReport(
        payload_bytes=payload_bytes,
        duration_s=elapsed,
        sent=seq,
        received=received,
        msgs_per_s=rate,
        goodput_bytes_per_s=rate * payload_bytes,
        latency_p50_ms=_percentile(latencies, 0.50) if latencies else None,
        latency_p90_ms=_percentile(latencies, 0.90) if latencies else None,
        latency_p99_ms=_percentile(latencies, 0.99) if latencies else None,
    )
