"""Two-party session: a client-side driver and a generic server loop.

The client announces each operation with the first protocol message itself
(linear jobs carry a marker blob) or with a small dispatch frame (nonlinear
ops); the server loop reads whatever arrives and serves it until a ``fin``
frame, at which point it returns its meter and traffic report.
"""

from __future__ import annotations

import json
import struct
import time

import numpy as np

from . import linprot, mpc, wire
from .he import He, HeParams, KeySet, PublicKeys
from .linprot import JobShape, LinearJob, TriplePool
from .transport import (
    PHASE_NONLINEAR,
    PHASE_OFFLINE,
    PHASE_ONLINE,
    PHASE_SETUP,
    ChannelEnd,
)

PROTOCOL_B = "b"
PROTOCOL_PRECOMPUTE = "precompute"


class SecureSession:
    """Client-side handle for one training/evaluation session."""

    def __init__(self, end: ChannelEnd, params: HeParams, backend: str,
                 protocol: str = PROTOCOL_PRECOMPUTE, seed: int = 0):
        if protocol not in (PROTOCOL_B, PROTOCOL_PRECOMPUTE):
            raise ValueError(f"unknown protocol {protocol!r}")
        self.end = end
        self.he = He(params, backend)
        self.protocol = protocol
        self.rng = np.random.default_rng(seed)
        self.mask_rng = np.random.default_rng(seed + 7)
        self.share_rng = np.random.default_rng(seed + 13)
        self.keys: KeySet | None = None
        self.pool = TriplePool()
        self.online_seconds = 0.0
        self.offline_seconds = 0.0

    def setup(self, keygen_seed: int = 1):
        self.keys = self.he.keygen(keygen_seed)
        linprot.setup_client(self.end, self.he, self.keys)

    def ensure_offline(self, shapes: list[JobShape], count: int):
        """Top the pool up to `count` bundles for every job shape."""
        if self.protocol != PROTOCOL_PRECOMPUTE:
            return
        t0 = time.perf_counter()
        for js in shapes:
            need = count - self.pool.available(js.job_id)
            if need > 0:
                linprot.precompute_offline_client(
                    self.end, self.he, self.keys, self.mask_rng, js, need, self.pool
                )
        self.offline_seconds += time.perf_counter() - t0

    def linear(self, job: LinearJob) -> np.ndarray:
        t0 = time.perf_counter()
        if self.protocol == PROTOCOL_B:
            res = linprot.linear_b_client(self.end, self.he, self.keys, self.rng, job)
        else:
            res = linprot.precompute_online_client(
                self.end, self.he, self.keys, self.rng, job, self.pool
            )
        self.online_seconds += time.perf_counter() - t0
        return res.tensor

    def nonlinear(self, op: str, values: np.ndarray, bits: int) -> np.ndarray:
        t0 = time.perf_counter()
        head = wire.encode_blobs([b"nl", op.encode(), struct.pack("<B", bits)])
        self.end.send(PHASE_NONLINEAR, head)
        out = mpc.client_nonlinear(self.end, op, values, bits, self.share_rng)
        self.online_seconds += time.perf_counter() - t0
        return out

    def finish(self) -> dict:
        self.end.send(PHASE_SETUP, wire.encode_blobs([b"fin"]))
        report = json.loads(self.end.recv(PHASE_SETUP).decode())
        report["client_meter"] = self.he.meter.snapshot()
        report["comm"] = self.end.stats.report()
        report["online_seconds"] = self.online_seconds
        report["offline_seconds"] = self.offline_seconds
        return report


def serve_session(end: ChannelEnd, params: HeParams, backend: str, seed: int = 1000):
    """Server loop: answer setup, offline batches, linear jobs, nonlinear ops."""
    evaluator = He(params, backend)
    pks: PublicKeys = linprot.setup_server(end, evaluator)
    pool = TriplePool()
    nl_rng = np.random.default_rng(seed)
    while True:
        phase, payload = end.recv_any()
        blobs, _ = wire.decode_blobs(payload)
        marker = blobs[0]
        if marker == b"fin":
            end.send(
                PHASE_SETUP,
                json.dumps({"server_meter": evaluator.meter.snapshot()}).encode(),
            )
            return evaluator
        if marker == b"off":
            linprot.precompute_offline_server(end, evaluator, pks, pool, head=blobs)
        elif marker == b"b":
            evaluator.meter.set_phase(PHASE_ONLINE)
            linprot.linear_b_server(end, evaluator, pks, blobs=blobs)
        elif marker == b"pre":
            evaluator.meter.set_phase(PHASE_ONLINE)
            linprot.precompute_online_server(end, evaluator, pks, pool, blobs=blobs)
        elif marker == b"nl":
            op = blobs[1].decode()
            (bits,) = struct.unpack("<B", blobs[2])
            mpc.server_nonlinear(end, op, bits, nl_rng)
        else:
            raise linprot.LinProtError(f"unknown dispatch marker {marker!r}")
