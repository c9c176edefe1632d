"""Two-party ordered message channel with phase-tagged byte accounting.

Frames are `tag (u8) | length (u32, little-endian) | payload`, so every
message costs its payload plus a 5-byte header.  Both an in-process queue
realization and a TCP socket realization expose the same endpoint API and
produce identical per-direction transcripts for identical protocol runs.

Network conditions (bandwidth, ping) are modeled as a virtual clock on the
shared statistics object; no real sleeping happens, which keeps protocol
runs fast while still yielding latency figures under the simulated link.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
from dataclasses import dataclass, field


class TransportError(Exception):
    pass


class ChannelClosedError(TransportError):
    pass


class PhaseMismatchError(TransportError):
    """recv() saw a frame whose phase tag differs from the expected one."""


PHASE_SETUP = "setup"
PHASE_OFFLINE = "offline"
PHASE_ONLINE = "online"
PHASE_NONLINEAR = "nonlinear"

PHASES = (PHASE_SETUP, PHASE_OFFLINE, PHASE_ONLINE, PHASE_NONLINEAR)
_PHASE_ID = {name: i for i, name in enumerate(PHASES)}

HEADER_BYTES = 5

CLIENT = "client"
SERVER = "server"


@dataclass
class NetworkModel:
    """Virtual link: per-frame ping plus serialization delay."""

    bandwidth_mbps: float | None = None
    ping_ms: float = 0.0

    def frame_seconds(self, nbytes: int) -> float:
        secs = self.ping_ms / 1e3
        if self.bandwidth_mbps:
            secs += nbytes * 8 / (self.bandwidth_mbps * 1e6)
        return secs


@dataclass
class ChannelStats:
    """Shared accounting for one channel pair; one sender + one receiver safe."""

    capture: bool = False
    network: NetworkModel | None = None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    sent: dict = field(default_factory=dict)
    rounds: int = 0
    _last_dir: str | None = None
    simulated_seconds: float = 0.0
    transcript: dict = field(default_factory=lambda: {CLIENT: bytearray(), SERVER: bytearray()})

    def record(self, sender: str, phase: str, frame: bytes):
        with self.lock:
            key = (sender, phase)
            self.sent[key] = self.sent.get(key, 0) + len(frame)
            if self._last_dir != sender:
                self.rounds += 1
                self._last_dir = sender
            if self.network is not None:
                self.simulated_seconds += self.network.frame_seconds(len(frame))
            if self.capture:
                self.transcript[sender] += frame

    def bytes_from(self, sender: str, phase: str | None = None) -> int:
        with self.lock:
            if phase is None:
                return sum(v for (s, _), v in self.sent.items() if s == sender)
            return self.sent.get((sender, phase), 0)

    def phase_total(self, phase: str) -> int:
        with self.lock:
            return sum(v for (_, p), v in self.sent.items() if p == phase)

    def total(self) -> int:
        with self.lock:
            return sum(self.sent.values())

    def report(self) -> dict:
        with self.lock:
            per_phase = {p: 0 for p in PHASES}
            for (_, p), v in self.sent.items():
                per_phase[p] += v
            return {
                "bytes_by_phase": per_phase,
                "bytes_client_to_server": sum(
                    v for (s, _), v in self.sent.items() if s == CLIENT
                ),
                "bytes_server_to_client": sum(
                    v for (s, _), v in self.sent.items() if s == SERVER
                ),
                "total_bytes": sum(self.sent.values()),
                "rounds": self.rounds,
                "simulated_seconds": self.simulated_seconds,
            }

    def transcript_bytes(self) -> bytes:
        with self.lock:
            return bytes(self.transcript[CLIENT]) + bytes(self.transcript[SERVER])


def _encode_frame(phase: str, payload: bytes) -> bytes:
    return struct.pack("<BI", _PHASE_ID[phase], len(payload)) + payload


class ChannelEnd:
    """One party's endpoint; use exactly one logical thread per end."""

    def __init__(self, role: str, stats: ChannelStats, dealer_seed: int = 0):
        self.role = role
        self.stats = stats
        self.dealer_seed = dealer_seed
        self.ot_counter = 0

    # realization-specific
    def _send_raw(self, frame: bytes):  # pragma: no cover - abstract
        raise NotImplementedError

    def _recv_raw(self) -> tuple[int, bytes]:  # pragma: no cover - abstract
        raise NotImplementedError

    def send(self, phase: str, payload: bytes):
        if phase not in _PHASE_ID:
            raise ValueError(f"unknown phase {phase!r}")
        frame = _encode_frame(phase, bytes(payload))
        self.stats.record(self.role, phase, frame)
        self._send_raw(frame)

    def recv(self, expected_phase: str) -> bytes:
        tag, payload = self._recv_raw()
        got = PHASES[tag]
        if got != expected_phase:
            raise PhaseMismatchError(
                f"{self.role} expected a {expected_phase!r} frame, got {got!r}: "
                "protocol desynchronized"
            )
        return payload

    def recv_any(self) -> tuple[str, bytes]:
        """Dispatcher entry point: accept whatever phase arrives next."""
        tag, payload = self._recv_raw()
        return PHASES[tag], payload

    def comm_report(self) -> dict:
        """Per-phase byte totals, per-direction totals, rounds, model time."""
        return self.stats.report()

    def close(self):
        pass


class _QueueEnd(ChannelEnd):
    def __init__(self, role, stats, out_q, in_q, dealer_seed, timeout):
        super().__init__(role, stats, dealer_seed)
        self._out = out_q
        self._in = in_q
        self._timeout = timeout
        self._closed = False

    def _send_raw(self, frame: bytes):
        if self._closed:
            raise ChannelClosedError(f"{self.role} endpoint is closed")
        self._out.put(frame)

    def _recv_raw(self):
        if self._closed:
            raise ChannelClosedError(f"{self.role} endpoint is closed")
        try:
            frame = self._in.get(timeout=self._timeout)
        except queue.Empty:
            raise ChannelClosedError(
                f"{self.role} timed out waiting for a frame (peer gone?)"
            ) from None
        if frame is None:
            raise ChannelClosedError("peer closed the channel")
        tag, ln = struct.unpack_from("<BI", frame, 0)
        return tag, frame[HEADER_BYTES : HEADER_BYTES + ln]

    def close(self):
        if not self._closed:
            self._closed = True
            self._out.put(None)


def inproc_pair(
    capture: bool = False,
    network: NetworkModel | None = None,
    dealer_seed: int = 0,
    timeout: float = 60.0,
) -> tuple[ChannelEnd, ChannelEnd]:
    """(client end, server end) over in-process FIFO queues."""
    stats = ChannelStats(capture=capture, network=network)
    c2s: queue.Queue = queue.Queue()
    s2c: queue.Queue = queue.Queue()
    client = _QueueEnd(CLIENT, stats, c2s, s2c, dealer_seed, timeout)
    server = _QueueEnd(SERVER, stats, s2c, c2s, dealer_seed, timeout)
    return client, server


class _SocketEnd(ChannelEnd):
    def __init__(self, role, stats, sock, dealer_seed):
        super().__init__(role, stats, dealer_seed)
        self._sock = sock

    def _send_raw(self, frame: bytes):
        try:
            self._sock.sendall(frame)
        except OSError as e:
            raise ChannelClosedError(str(e)) from e

    def _read_exact(self, nbytes: int) -> bytes:
        buf = bytearray()
        while len(buf) < nbytes:
            chunk = self._sock.recv(nbytes - len(buf))
            if not chunk:
                raise ChannelClosedError("socket closed by peer")
            buf += chunk
        return bytes(buf)

    def _recv_raw(self):
        head = self._read_exact(HEADER_BYTES)
        tag, ln = struct.unpack("<BI", head)
        return tag, self._read_exact(ln)

    def close(self):
        try:
            self._sock.close()
        except OSError:
            pass


def socket_server_end(
    host: str,
    port: int,
    capture: bool = False,
    network: NetworkModel | None = None,
    dealer_seed: int = 0,
) -> ChannelEnd:
    """Accept one peer and return the server endpoint."""
    srv = socket.create_server((host, port))
    conn, _ = srv.accept()
    srv.close()
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return _SocketEnd(SERVER, ChannelStats(capture=capture, network=network), conn, dealer_seed)


def socket_client_end(
    host: str,
    port: int,
    capture: bool = False,
    network: NetworkModel | None = None,
    dealer_seed: int = 0,
    retries: int = 50,
    retry_delay: float = 0.1,
) -> ChannelEnd:
    import time as _time

    last: Exception | None = None
    for _ in range(retries):
        try:
            sock = socket.create_connection((host, port))
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return _SocketEnd(
                CLIENT, ChannelStats(capture=capture, network=network), sock, dealer_seed
            )
        except OSError as e:
            last = e
            _time.sleep(retry_delay)
    raise ChannelClosedError(f"could not reach {host}:{port}: {last}")


def run_pair(client_fn, server_fn, client_end: ChannelEnd, server_end: ChannelEnd):
    """Run the two party loops concurrently; returns (client result, server result).

    Exceptions on the server loop propagate after the client loop finishes or
    dies, so tests see the first real failure instead of a timeout.
    """
    result: dict = {}
    error: dict = {}

    def _server():
        try:
            result["server"] = server_fn(server_end)
        except Exception as e:  # noqa: BLE001 - surfaced below
            error["server"] = e

    th = threading.Thread(target=_server, daemon=True)
    th.start()
    try:
        result["client"] = client_fn(client_end)
    except Exception:
        th.join(timeout=5.0)
        if "server" in error:
            raise error["server"]
        raise
    th.join()
    if "server" in error:
        raise error["server"]
    return result["client"], result.get("server")
