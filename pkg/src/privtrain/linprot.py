"""The two linear-layer protocols.

``b`` (direct): the client packs and encrypts both operands, the server
multiplies ciphertext by ciphertext and returns the products.

``precompute``: an offline phase builds masked products [r_x * r_w] from
client-chosen uniform masks, and the online phase replaces every CCMul by
two CPMul, two CCAdd and one PPMul via

    x*w = [x]*(w - r_w) + [w]*(x - r_x) + [r_x*r_w] - (x - r_x)*(w - r_w).

A *job* is one linear operation: lists of packed x- and w-polynomials plus
(product, accumulate-into-slot) sites, so a multi-channel convolution
accumulates inside the ciphertext and decrypts once per output slot.
Masks are single-use; pools never silently reuse them.
"""

from __future__ import annotations

import dataclasses
import struct
from collections import deque
from typing import Callable

import numpy as np

from . import packing, ring, wire
from .he import Ciphertext, He, KeySet, PublicKeys
from .ring import RingElem, RingParams
from .transport import PHASE_OFFLINE, PHASE_ONLINE, PHASE_SETUP, ChannelEnd


class LinProtError(Exception):
    pass


class PoolExhaustedError(LinProtError):
    """The online phase asked for a mask bundle that was never precomputed."""


class SingleUseViolationError(LinProtError):
    """A mask bundle was consumed twice."""


# --------------------------------------------------------------------------
# jobs
# --------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class JobShape:
    """Value-independent structure of a linear job (what offline needs)."""

    job_id: str
    n_x: int
    n_w: int
    n_out: int
    sites: tuple[tuple[int, int, int], ...]  # (x index, w index, out slot)

    def to_bytes(self) -> bytes:
        jid = self.job_id.encode()
        head = struct.pack("<H3I", len(jid), self.n_x, self.n_w, self.n_out)
        body = struct.pack(f"<{3 * len(self.sites)}I", *[v for s in self.sites for v in s])
        return head + jid + struct.pack("<I", len(self.sites)) + body

    @staticmethod
    def from_bytes(data: bytes) -> "JobShape":
        jlen, n_x, n_w, n_out = struct.unpack_from("<H3I", data, 0)
        off = 14
        jid = data[off : off + jlen].decode()
        off += jlen
        (ns,) = struct.unpack_from("<I", data, off)
        off += 4
        flat = struct.unpack_from(f"<{3 * ns}I", data, off)
        sites = tuple((flat[i], flat[i + 1], flat[i + 2]) for i in range(0, 3 * ns, 3))
        return JobShape(jid, n_x, n_w, n_out, sites)


@dataclasses.dataclass
class LinearJob:
    """A job shape plus the client's packed operand values."""

    shape: JobShape
    x_polys: list[RingElem]
    w_polys: list[RingElem]
    extract: Callable[[list[RingElem]], np.ndarray] | None = None

    def __post_init__(self):
        if len(self.x_polys) != self.shape.n_x or len(self.w_polys) != self.shape.n_w:
            raise LinProtError("job polys do not match the declared shape")


@dataclasses.dataclass
class LinearResult:
    """Client-side outcome of one protocol run."""

    tensor: np.ndarray
    out_polys: list[RingElem]
    meter_counts: dict
    comm_report: dict


# --------------------------------------------------------------------------
# job builders
# --------------------------------------------------------------------------


def conv_job(job_id: str, x: np.ndarray, kernels: np.ndarray, shape: packing.ConvShape,
             params: RingParams, scheme: str = packing.SCHEME_CORRELATED) -> LinearJob:
    """Multi-channel convolution; x is (cin, H, W), kernels (cout, cin, h, h).

    One packed input set serves every output channel; per-input-channel
    products accumulate in the ring, so the job decrypts cout * tiles slots.
    """
    x = np.asarray(x)
    kernels = np.asarray(kernels)
    if x.ndim == 2:
        x = x[None]
    if kernels.ndim == 2:
        kernels = kernels[None, None]
    elif kernels.ndim == 3:
        kernels = kernels[None]
    cout, cin = kernels.shape[:2]
    if x.shape[0] != cin:
        raise LinProtError("kernel input channels do not match the input tensor")
    if scheme == packing.SCHEME_CORRELATED:
        plan = packing.plan_correlated(shape, params.n)
        x_polys: list[RingElem] = []
        w_polys: list[RingElem] = []
        for c in range(cin):
            polys, _ = packing.pack_input_correlated(x[c], shape, params, plan)
            x_polys.extend(polys)
        for co in range(cout):
            for c in range(cin):
                kern, _ = packing.pack_kernel_correlated(kernels[co, c], shape, params, plan)
                w_polys.append(kern)
        ntiles = plan.num_tiles
    else:
        x_polys, w_polys = [], []
        plan = packing.plan_baseline(shape, params.n)
        for c in range(cin):
            polys, _, plan = packing.pack_baseline(x[c], kernels[0, 0], shape, params)
            x_polys.extend(polys)
        for co in range(cout):
            for c in range(cin):
                _, kern, plan = packing.pack_baseline(x[0], kernels[co, c], shape, params)
                w_polys.append(kern)
        ntiles = plan.num_tiles
    sites = tuple(
        (c * ntiles + t, co * cin + c, co * ntiles + t)
        for co in range(cout)
        for c in range(cin)
        for t in range(ntiles)
    )
    js = JobShape(job_id, len(x_polys), len(w_polys), cout * ntiles, sites)

    def extract(out_polys: list[RingElem]) -> np.ndarray:
        outs = [
            packing.extract_output(out_polys[co * ntiles : (co + 1) * ntiles], plan)
            for co in range(cout)
        ]
        return np.stack(outs)

    return LinearJob(js, x_polys, w_polys, extract)


def conv_grad_w_job(job_id: str, x: np.ndarray, gy: np.ndarray,
                    shape: packing.ConvShape, params: RingParams,
                    scheme: str = packing.SCHEME_CORRELATED) -> LinearJob:
    """Kernel-gradient convolutions: out[co, ci] = conv(x[ci], gy[co]).

    The output gradient plays the kernel role, so `shape.kernel` must equal
    the gradient's (square) side.
    """
    x = np.asarray(x)
    gy = np.asarray(gy)
    cin, cout = x.shape[0], gy.shape[0]
    if gy.shape[1] != shape.kernel or gy.shape[1] != gy.shape[2]:
        raise LinProtError("gradient kernel must be square and match the shape")
    if scheme != packing.SCHEME_CORRELATED:
        raise LinProtError("gradient convolutions run under the correlated scheme")
    plan = packing.plan_correlated(shape, params.n)
    x_polys: list[RingElem] = []
    w_polys: list[RingElem] = []
    for c in range(cin):
        polys, _ = packing.pack_input_correlated(x[c], shape, params, plan)
        x_polys.extend(polys)
    for co in range(cout):
        kern, _ = packing.pack_kernel_correlated(gy[co], shape, params, plan)
        w_polys.append(kern)
    ntiles = plan.num_tiles
    sites = tuple(
        (c * ntiles + t, co, (co * cin + c) * ntiles + t)
        for co in range(cout)
        for c in range(cin)
        for t in range(ntiles)
    )
    js = JobShape(job_id, len(x_polys), len(w_polys), cout * cin * ntiles, sites)

    def extract(out_polys: list[RingElem]) -> np.ndarray:
        mats = []
        for idx in range(cout * cin):
            mats.append(
                packing.extract_output(out_polys[idx * ntiles : (idx + 1) * ntiles], plan)
            )
        side = mats[0].shape[0]
        return np.stack(mats).reshape(cout, cin, side, side)

    return LinearJob(js, x_polys, w_polys, extract)


def fc_job(job_id: str, x: np.ndarray, w: np.ndarray, params: RingParams) -> LinearJob:
    """Matrix-vector product y = w @ x."""
    w = np.asarray(w)
    out_dim, in_dim = w.shape
    xp = packing.pack_fc_input(x, params)
    wps = packing.pack_fc_matrix(w, params)
    sites = tuple((0, j, j) for j in range(len(wps)))
    js = JobShape(job_id, 1, len(wps), len(wps), sites)

    def extract(out_polys: list[RingElem]) -> np.ndarray:
        return packing.extract_fc_output(out_polys, out_dim, in_dim)

    return LinearJob(js, [xp], wps, extract)


def outer_job(job_id: str, g: np.ndarray, x: np.ndarray, params: RingParams) -> LinearJob:
    """Outer product g x^T (the fully-connected weight gradient)."""
    g = np.asarray(g)
    x = np.asarray(x)
    in_dim = x.size
    xp = packing.pack_fc_input(x, params)
    gps = packing.pack_outer_left(g, in_dim, params)
    sites = tuple((0, j, j) for j in range(len(gps)))
    js = JobShape(job_id, 1, len(gps), len(gps), sites)

    def extract(out_polys: list[RingElem]) -> np.ndarray:
        return packing.extract_outer(out_polys, g.size, in_dim)

    return LinearJob(js, [xp], gps, extract)


def affine_job(job_id: str, x: np.ndarray, gamma: int, params: RingParams) -> LinearJob:
    """Channelwise scale gamma * x (batch-norm's protocol-visible multiply)."""
    x = np.asarray(x)
    flat = x.ravel()
    if flat.size > params.n:
        raise LinProtError("affine payload exceeds the ring degree")
    xp = packing.pack_fc_input(flat, params)
    gp = RingElem.monomial(params, int(gamma), 0)
    js = JobShape(job_id, 1, 1, 1, ((0, 0, 0),))
    shape = x.shape

    def extract(out_polys: list[RingElem]) -> np.ndarray:
        return np.asarray(out_polys[0].coeffs[: flat.size]).reshape(shape)

    return LinearJob(js, [xp], [gp], extract)


# --------------------------------------------------------------------------
# pools
# --------------------------------------------------------------------------


@dataclasses.dataclass
class MaskBundle:
    """Client side of one precomputed mask set for one job invocation."""

    job_id: str
    r_x: list[RingElem]
    r_w: list[RingElem]
    consumed: bool = False

    def consume(self):
        if self.consumed:
            raise SingleUseViolationError(f"mask bundle for {self.job_id!r} reused")
        self.consumed = True


@dataclasses.dataclass
class MaskProduct:
    """Server side: accumulated [r_x * r_w] per output slot."""

    job_id: str
    slots: list[Ciphertext]
    consumed: bool = False

    def consume(self):
        if self.consumed:
            raise SingleUseViolationError(f"mask products for {self.job_id!r} reused")
        self.consumed = True


class TriplePool:
    """Per-layer FIFO of precomputed mask material; exhaustion is an error."""

    def __init__(self):
        self._queues: dict[str, deque] = {}

    def add(self, item):
        self._queues.setdefault(item.job_id, deque()).append(item)

    def take(self, job_id: str):
        q = self._queues.get(job_id)
        if not q:
            raise PoolExhaustedError(
                f"no precomputed masks left for layer {job_id!r}: run the offline phase"
            )
        item = q.popleft()
        item.consume()
        return item

    def available(self, job_id: str) -> int:
        return len(self._queues.get(job_id, ()))

    def job_ids(self) -> list[str]:
        return sorted(self._queues)


# --------------------------------------------------------------------------
# shared helpers
# --------------------------------------------------------------------------


def _send_blobs(end: ChannelEnd, phase: str, blobs: list[bytes]):
    end.send(phase, wire.encode_blobs(blobs))


def _recv_blobs(end: ChannelEnd, phase: str) -> list[bytes]:
    blobs, _ = wire.decode_blobs(end.recv(phase))
    return blobs


def setup_client(end: ChannelEnd, evaluator: He, keys: KeySet):
    """Ship the public material to the server."""
    end.send(PHASE_SETUP, evaluator.public_keys_to_bytes(keys))


def setup_server(end: ChannelEnd, evaluator: He) -> PublicKeys:
    return evaluator.public_keys_from_bytes(end.recv(PHASE_SETUP))


def _accumulate(evaluator: He, slots: list[Ciphertext | None], idx: int, ct: Ciphertext):
    slots[idx] = ct if slots[idx] is None else evaluator.cc_add(slots[idx], ct)


# --------------------------------------------------------------------------
# protocol b: direct ciphertext-ciphertext products
# --------------------------------------------------------------------------


def linear_b_client(end: ChannelEnd, evaluator: He, keys: KeySet,
                    rng: np.random.Generator, job: LinearJob) -> LinearResult:
    js = job.shape
    blobs = [b"b", js.to_bytes()]
    blobs += [evaluator.ct_to_bytes(evaluator.encrypt(p, keys, rng)) for p in job.x_polys]
    blobs += [evaluator.ct_to_bytes(evaluator.encrypt(p, keys, rng)) for p in job.w_polys]
    _send_blobs(end, PHASE_ONLINE, blobs)
    out_blobs = _recv_blobs(end, PHASE_ONLINE)
    out = [evaluator.decrypt(evaluator.ct_from_bytes(b), keys) for b in out_blobs]
    tensor = job.extract(out) if job.extract else None
    return LinearResult(tensor, out, evaluator.meter.snapshot(), end.stats.report())


def linear_b_server(end: ChannelEnd, evaluator: He, pks: PublicKeys,
                    blobs: list[bytes] | None = None):
    if blobs is None:
        blobs = _recv_blobs(end, PHASE_ONLINE)
    if blobs[0] != b"b":
        raise LinProtError("server expected a direct-protocol job")
    js = JobShape.from_bytes(blobs[1])
    fresh = evaluator.params.fresh_noise
    cts = [evaluator.ct_from_bytes(b, noise=fresh) for b in blobs[2:]]
    xs = cts[: js.n_x]
    ws = cts[js.n_x : js.n_x + js.n_w]
    slots: list[Ciphertext | None] = [None] * js.n_out
    for xi, wi, oi in js.sites:
        _accumulate(evaluator, slots, oi, evaluator.cc_mul(xs[xi], ws[wi], pks))
    _send_blobs(end, PHASE_ONLINE, [evaluator.ct_to_bytes(c) for c in slots])


# --------------------------------------------------------------------------
# precompute protocol: offline masked products, CCMul-free online phase
# --------------------------------------------------------------------------


def precompute_offline_client(end: ChannelEnd, evaluator: He, keys: KeySet,
                              rng: np.random.Generator, job_shape: JobShape,
                              count: int, pool: TriplePool):
    """Generate `count` mask bundles for one job shape and ship [r_x], [r_w]."""
    evaluator.meter.set_phase(PHASE_OFFLINE)
    head = [b"off", job_shape.to_bytes(), struct.pack("<I", count)]
    _send_blobs(end, PHASE_OFFLINE, head)
    plain = evaluator.params.plain_ring
    for _ in range(count):
        r_x = [RingElem.random(plain, rng) for _ in range(job_shape.n_x)]
        r_w = [RingElem.random(plain, rng) for _ in range(job_shape.n_w)]
        blobs = [evaluator.ct_to_bytes(evaluator.encrypt(p, keys, rng)) for p in r_x]
        blobs += [evaluator.ct_to_bytes(evaluator.encrypt(p, keys, rng)) for p in r_w]
        _send_blobs(end, PHASE_OFFLINE, blobs)
        pool.add(MaskBundle(job_shape.job_id, r_x, r_w))
    if end.recv(PHASE_OFFLINE) != b"done":
        raise LinProtError("offline batch was not acknowledged")
    evaluator.meter.set_phase(PHASE_ONLINE)


def precompute_offline_server(end: ChannelEnd, evaluator: He, pks: PublicKeys,
                              pool: TriplePool, head: list[bytes] | None = None):
    evaluator.meter.set_phase(PHASE_OFFLINE)
    if head is None:
        head = _recv_blobs(end, PHASE_OFFLINE)
    if head[0] != b"off":
        raise LinProtError("server expected an offline batch")
    js = JobShape.from_bytes(head[1])
    (count,) = struct.unpack("<I", head[2])
    fresh = evaluator.params.fresh_noise
    for _ in range(count):
        blobs = _recv_blobs(end, PHASE_OFFLINE)
        cts = [evaluator.ct_from_bytes(b, noise=fresh) for b in blobs]
        rx = cts[: js.n_x]
        rw = cts[js.n_x :]
        slots: list[Ciphertext | None] = [None] * js.n_out
        for xi, wi, oi in js.sites:
            _accumulate(evaluator, slots, oi, evaluator.cc_mul(rx[xi], rw[wi], pks))
        pool.add(MaskProduct(js.job_id, slots))
    end.send(PHASE_OFFLINE, b"done")
    evaluator.meter.set_phase(PHASE_ONLINE)


def precompute_online_client(end: ChannelEnd, evaluator: He, keys: KeySet,
                             rng: np.random.Generator, job: LinearJob,
                             pool: TriplePool) -> LinearResult:
    js = job.shape
    bundle: MaskBundle = pool.take(js.job_id)
    blobs = [b"pre", js.to_bytes()]
    blobs += [evaluator.ct_to_bytes(evaluator.encrypt(p, keys, rng)) for p in job.x_polys]
    blobs += [evaluator.ct_to_bytes(evaluator.encrypt(p, keys, rng)) for p in job.w_polys]
    masked_x = [ring.ring_sub(p, r) for p, r in zip(job.x_polys, bundle.r_x)]
    masked_w = [ring.ring_sub(p, r) for p, r in zip(job.w_polys, bundle.r_w)]
    blobs += [ring.ring_to_bytes(p) for p in masked_x]
    blobs += [ring.ring_to_bytes(p) for p in masked_w]
    _send_blobs(end, PHASE_ONLINE, blobs)
    out_blobs = _recv_blobs(end, PHASE_ONLINE)
    half = len(out_blobs) // 2
    plain = evaluator.params.plain_ring
    out = []
    for cb, pb in zip(out_blobs[:half], out_blobs[half:]):
        c = evaluator.decrypt(evaluator.ct_from_bytes(cb), keys)
        p = ring.ring_from_bytes(pb, plain)
        out.append(ring.ring_sub(c, p))
    tensor = job.extract(out) if job.extract else None
    return LinearResult(tensor, out, evaluator.meter.snapshot(), end.stats.report())


def precompute_online_server(end: ChannelEnd, evaluator: He, pks: PublicKeys,
                             pool: TriplePool, blobs: list[bytes] | None = None):
    if blobs is None:
        blobs = _recv_blobs(end, PHASE_ONLINE)
    if blobs[0] != b"pre":
        raise LinProtError("server expected a precompute-protocol job")
    js = JobShape.from_bytes(blobs[1])
    prod: MaskProduct = pool.take(js.job_id)
    plain = evaluator.params.plain_ring
    fresh = evaluator.params.fresh_noise
    off = 2
    xs = [evaluator.ct_from_bytes(b, noise=fresh) for b in blobs[off : off + js.n_x]]
    off += js.n_x
    ws = [evaluator.ct_from_bytes(b, noise=fresh) for b in blobs[off : off + js.n_w]]
    off += js.n_w
    mx = [ring.ring_from_bytes(b, plain) for b in blobs[off : off + js.n_x]]
    off += js.n_x
    mw = [ring.ring_from_bytes(b, plain) for b in blobs[off : off + js.n_w]]
    c_slots: list[Ciphertext | None] = [None] * js.n_out
    p_slots: list[RingElem | None] = [None] * js.n_out
    for xi, wi, oi in js.sites:
        c1 = evaluator.cp_mul(xs[xi], mw[wi])
        c2 = evaluator.cp_mul(ws[wi], mx[xi])
        _accumulate(evaluator, c_slots, oi, evaluator.cc_add(c1, c2))
        pp = evaluator.pp_mul(mx[xi], mw[wi])
        p_slots[oi] = pp if p_slots[oi] is None else ring.ring_add(p_slots[oi], pp)
    for oi in range(js.n_out):
        c_slots[oi] = evaluator.cc_add(c_slots[oi], prod.slots[oi])
    out = [evaluator.ct_to_bytes(c) for c in c_slots]
    out += [ring.ring_to_bytes(p) for p in p_slots]
    _send_blobs(end, PHASE_ONLINE, out)


def bn_affine_client(end: ChannelEnd, evaluator: He, keys: KeySet,
                     rng: np.random.Generator, job_id: str, x: np.ndarray,
                     gamma: int, beta: np.ndarray,
                     pool: TriplePool | None = None) -> LinearResult:
    """Batch-norm affine: gamma*x under the protocol, beta added client-side.

    Normalization statistics are the client's plaintext business; only the
    scale multiply touches the channel.  Uses the precompute protocol when a
    pool is given, the direct protocol otherwise.
    """
    job = affine_job(job_id, x, gamma, evaluator.params.plain_ring)
    if pool is not None:
        res = precompute_online_client(end, evaluator, keys, rng, job, pool)
    else:
        res = linear_b_client(end, evaluator, keys, rng, job)
    mod = evaluator.params.plain_ring.modulus
    half = mod // 2
    scaled = np.asarray(res.tensor).astype(object)
    flat = scaled.ravel()
    for k in range(flat.size):
        v = int(flat[k]) % mod
        flat[k] = v - mod if v > half else v
    res.tensor = scaled.astype(np.int64) + np.asarray(beta, dtype=np.int64)
    return res


# --------------------------------------------------------------------------
# pool persistence: offline and online may run as separate processes
# --------------------------------------------------------------------------


def save_server_pool(pool: TriplePool, evaluator: He, path: str):
    with open(path, "wb") as f:
        items = []
        for jid in pool.job_ids():
            q = pool._queues[jid]
            for prod in q:
                body = wire.encode_blobs(
                    [jid.encode()] + [evaluator.ct_to_bytes(c) for c in prod.slots]
                )
                items.append(body)
        f.write(struct.pack("<I", len(items)))
        for body in items:
            f.write(struct.pack("<I", len(body)))
            f.write(body)


def load_server_pool(evaluator: He, path: str) -> TriplePool:
    pool = TriplePool()
    with open(path, "rb") as f:
        data = f.read()
    (count,) = struct.unpack_from("<I", data, 0)
    off = 4
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", data, off)
        off += 4
        blobs, _ = wire.decode_blobs(data[off : off + ln])
        off += ln
        jid = blobs[0].decode()
        slots = [evaluator.ct_from_bytes(b) for b in blobs[1:]]
        pool.add(MaskProduct(jid, slots))
    return pool


def save_client_pool(pool: TriplePool, path: str):
    with open(path, "wb") as f:
        items = []
        for jid in pool.job_ids():
            for bundle in pool._queues[jid]:
                blobs = [jid.encode(), struct.pack("<I", len(bundle.r_x))]
                blobs += [ring.ring_to_bytes(p) for p in bundle.r_x]
                blobs += [ring.ring_to_bytes(p) for p in bundle.r_w]
                items.append(wire.encode_blobs(blobs))
        f.write(struct.pack("<I", len(items)))
        for body in items:
            f.write(struct.pack("<I", len(body)))
            f.write(body)


def load_client_pool(plain: RingParams, path: str) -> TriplePool:
    pool = TriplePool()
    with open(path, "rb") as f:
        data = f.read()
    (count,) = struct.unpack_from("<I", data, 0)
    off = 4
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", data, off)
        off += 4
        blobs, _ = wire.decode_blobs(data[off : off + ln])
        off += ln
        jid = blobs[0].decode()
        (n_x,) = struct.unpack("<I", blobs[1])
        elems = [ring.ring_from_bytes(b, plain) for b in blobs[2:]]
        pool.add(MaskBundle(jid, elems[:n_x], elems[n_x:]))
    return pool
