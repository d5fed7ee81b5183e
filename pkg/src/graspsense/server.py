"""Streaming detector service: asyncio TCP server, blocking client, latency bench."""

from __future__ import annotations

import asyncio
import csv
import logging
import math
import socket
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .engine import InferenceEngine, finite
from .protocol import (REQUEST_SIZE, RESPONSE_SIZE, SHAPE_NOT_REQUESTED, ProtocolError,
                       Reason, WireRequest, WireResponse, error_frame, parse_request,
                       parse_response)

log = logging.getLogger(__name__)

U32_MAX = 0xFFFFFFFF


class EdgeServer:
    """One inference per request frame, answered in order on the same connection.

    ``clock`` returns nanoseconds; inject a constant clock to make responses
    bit-reproducible.
    """

    def __init__(self, engine: InferenceEngine, host: str = "127.0.0.1", port: int = 0,
                 workers: int = 0, clock=time.perf_counter_ns):
        self.engine = engine
        self.host = host
        self.port = port
        self.clock = clock
        self.pool = ThreadPoolExecutor(workers) if workers > 0 else None
        self.processing_us: list[int] = []
        self.requests = 0
        self.errors = 0
        self._server: asyncio.AbstractServer | None = None

    def handle_frame(self, raw: bytes) -> bytes:
        t0 = self.clock()
        self.requests += 1
        try:
            req = parse_request(raw)
            if not finite(req.mass, *req.torque, *req.angle) or req.mass <= 0:
                raise ProtocolError(Reason.BAD_PAYLOAD, "non-finite payload or non-positive mass")
        except ProtocolError as exc:
            self.errors += 1
            return error_frame(raw, exc.reason)
        try:
            with np.errstate(all="ignore"):
                det = self.engine.detect(req.torque, req.angle, req.mass)
        except Exception:
            log.exception("inference failed")
            self.errors += 1
            return error_frame(raw, Reason.INTERNAL)
        if not finite(det.slip_conf, det.crumple_conf, det.shape_conf):
            # finite but huge inputs overflow the float32 path
            self.errors += 1
            return error_frame(raw, Reason.BAD_PAYLOAD)
        want = req.wants_shape
        elapsed = min((self.clock() - t0) // 1000, U32_MAX)
        self.processing_us.append(elapsed)
        return WireResponse(req.timestamp_us, det.slip, det.crumple,
                            det.shape if want else SHAPE_NOT_REQUESTED,
                            det.slip_conf, det.crumple_conf,
                            det.shape_conf if want else 0.0, elapsed).pack()

    async def _client(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        loop = asyncio.get_running_loop()
        try:
            while True:
                try:
                    raw = await reader.readexactly(REQUEST_SIZE)
                except asyncio.IncompleteReadError:
                    break  # truncated frame or clean EOF: drop the connection
                if self.pool is None:
                    resp = self.handle_frame(raw)
                else:
                    resp = await loop.run_in_executor(self.pool, self.handle_frame, raw)
                writer.write(resp)
                await writer.drain()
        except (ConnectionError, OSError):
            pass
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionError, OSError):
                pass

    async def start(self) -> None:
        self._server = await asyncio.start_server(self._client, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        log.info("listening on %s:%d", self.host, self.port)

    async def serve_forever(self) -> None:
        await self.start()
        async with self._server:
            await self._server.serve_forever()

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        if self.pool is not None:
            self.pool.shutdown(wait=False)


class ServerThread:
    """Run an :class:`EdgeServer` on a background event loop (tests, benches)."""

    def __init__(self, server: EdgeServer):
        self.server = server
        self.loop = asyncio.new_event_loop()
        self.thread = threading.Thread(target=self.loop.run_forever, daemon=True)

    @property
    def address(self) -> tuple[str, int]:
        return self.server.host, self.server.port

    def __enter__(self) -> "ServerThread":
        self.thread.start()
        asyncio.run_coroutine_threadsafe(self.server.start(), self.loop).result(10)
        return self

    def __exit__(self, *exc):
        asyncio.run_coroutine_threadsafe(self.server.stop(), self.loop).result(10)
        self.loop.call_soon_threadsafe(self.loop.stop)
        self.thread.join(10)
        self.loop.close()


class EdgeClient:
    def __init__(self, host: str, port: int, timeout: float = 10.0):
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise ConnectionError(f"cannot reach detector at {host}:{port}: {exc}") from None
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send_raw(self, raw: bytes) -> None:
        self.sock.sendall(raw)

    def recv_response(self) -> bytes:
        buf = bytearray()
        while len(buf) < RESPONSE_SIZE:
            chunk = self.sock.recv(RESPONSE_SIZE - len(buf))
            if not chunk:
                raise ConnectionError("server closed the connection")
            buf += chunk
        return bytes(buf)

    def roundtrip(self, raw: bytes) -> bytes:
        self.send_raw(raw)
        return self.recv_response()

    def request(self, req: WireRequest):
        return parse_response(self.roundtrip(req.pack()))

    def close(self) -> None:
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ------------------------------------------------------------- latency

def percentile(sorted_values, p: float) -> float:
    """Nearest-rank percentile of an already sorted sequence."""
    if not sorted_values:
        raise ValueError("no samples")
    rank = max(1, math.ceil(p / 100.0 * len(sorted_values)))
    return float(sorted_values[rank - 1])


@dataclass
class LatencyReport:
    samples_us: list = field(default_factory=list)
    wall_s: float = 0.0

    def __post_init__(self):
        self._sorted = sorted(self.samples_us)

    @property
    def count(self) -> int:
        return len(self._sorted)

    @property
    def p50(self) -> float:
        return percentile(self._sorted, 50)

    @property
    def p90(self) -> float:
        return percentile(self._sorted, 90)

    @property
    def p99(self) -> float:
        return percentile(self._sorted, 99)

    @property
    def max(self) -> float:
        return float(self._sorted[-1])

    @property
    def throughput(self) -> float:
        return self.count / self.wall_s if self.wall_s > 0 else float("nan")

    def merge(self, other: "LatencyReport") -> "LatencyReport":
        return LatencyReport(self.samples_us + other.samples_us, max(self.wall_s, other.wall_s))

    def row(self, name: str) -> list:
        return [name, self.count, f"{self.p50:.1f}", f"{self.p90:.1f}", f"{self.p99:.1f}",
                f"{self.max:.1f}", f"{self.throughput:.1f}"]


LATENCY_COLUMNS = ("metric", "count", "p50_us", "p90_us", "p99_us", "max_us", "throughput_rps")


def write_latency_csv(path, reports: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LATENCY_COLUMNS)
        for name, rep in reports.items():
            w.writerow(rep.row(name))


def bench_latency(host: str, port: int, payloads, n_requests: int, warmup: int = 100,
                  flags: int = 0) -> dict[str, LatencyReport]:
    """Sequential requests over one connection; warmup requests are not recorded.

    Returns ``{"server_processing": ..., "round_trip": ...}``.
    """
    if warmup < 100:
        raise ValueError("warmup must be at least 100 requests")
    if n_requests < 1:
        raise ValueError("need at least one measured request")
    frames = [WireRequest(i, p.torque, p.angle, p.mass, flags).pack()
              for i, p in enumerate(payloads)]
    proc, rtt = [], []
    with EdgeClient(host, port) as client:
        for i in range(warmup):
            client.roundtrip(frames[i % len(frames)])
        start = time.perf_counter()
        for i in range(n_requests):
            t0 = time.perf_counter_ns()
            resp = parse_response(client.roundtrip(frames[i % len(frames)]))
            rtt.append((time.perf_counter_ns() - t0) / 1000.0)
            if not isinstance(resp, WireResponse):
                raise ProtocolError(resp.reason, "server rejected a benchmark frame")
            proc.append(float(resp.processing_us))
        wall = time.perf_counter() - start
    return {"server_processing": LatencyReport(proc, wall), "round_trip": LatencyReport(rtt, wall)}
