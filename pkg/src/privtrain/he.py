"""Homomorphic-encryption layer: encrypt/decrypt, CPMul, CCMul with
relinearization, CCAdd, and per-operation cost meters.

Two interchangeable backends:

* ``rlwe`` -- a BFV-style scheme with single-multiplication depth.
  Ciphertexts live over a CRT product of NTT primes q; plaintexts over the
  plain ring modulus t.  Multiplication computes the integer tensor product
  of centered representatives, scales by t/q with rounding, and
  relinearizes through base-2^W digit key switching.  Noise is tracked as
  a conservative analytic bound (errors are clamped at sampling time so
  the bound is unconditional) and decryption fails deterministically once
  the estimate reaches half the scaling factor.

* ``clear`` -- a transparent stand-in that carries the payload in the
  first part and zeros elsewhere, with identical part-count rules, errors,
  and meters.  Protocol logic cannot tell the backends apart.
"""

from __future__ import annotations

import dataclasses
import struct
import threading
import time
from typing import Sequence

import numpy as np

from . import ring
from .ring import RingElem, RingParams


class HeError(Exception):
    pass


class PartCountError(HeError):
    """A 3-part ciphertext reached an operation that needs 2 parts."""


class NoiseOverflowError(HeError):
    """The noise estimate exceeded the decryption budget."""


BACKEND_CLEAR = "clear"
BACKEND_RLWE = "rlwe"

OPS = ("CCMul", "CPMul", "CCAdd", "PPMul", "Relin", "Enc", "Dec")

# how many per-site products one decryption may accumulate; the parameter
# validation guarantees this many fit the noise budget
ACCUM_BUDGET = 128


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class HeParams:
    """Ciphertext ring, plain ring, error width, and relinearization base."""

    cipher_ring: RingParams
    plain_ring: RingParams
    noise_stddev: float = 3.2
    relin_base_bits: int = 16

    def __post_init__(self):
        if self.cipher_ring.n != self.plain_ring.n:
            raise ValueError("cipher and plain rings must share the degree")
        if self.cipher_ring.modulus <= self.plain_ring.modulus * 4:
            raise ValueError("ciphertext modulus must dominate the plain modulus")

    @property
    def n(self) -> int:
        return self.cipher_ring.n

    @property
    def q(self) -> int:
        return self.cipher_ring.modulus

    @property
    def t(self) -> int:
        return self.plain_ring.modulus

    @property
    def delta(self) -> int:
        return self.q // self.t

    @property
    def error_bound(self) -> int:
        return int(6 * self.noise_stddev) + 1

    @property
    def relin_digits(self) -> int:
        w = self.relin_base_bits
        return (self.q.bit_length() + w - 1) // w

    # conservative noise algebra -------------------------------------------

    @property
    def fresh_noise(self) -> int:
        return self.error_bound * (2 * self.n + 1)

    def cp_mul_noise(self, nu: int) -> int:
        n, t = self.n, self.t
        return nu * n * (t // 2 + 1) + t * (n * t // 4 + 1)

    def cc_mul_noise(self, nu1: int, nu2: int) -> int:
        n, t = self.n, self.t
        return 2 * n * t * (nu1 + nu2) + 2 * n * n * t * t + self.relin_noise

    @property
    def relin_noise(self) -> int:
        return self.relin_digits * self.n * (1 << self.relin_base_bits) * self.error_bound

    @property
    def noise_budget(self) -> int:
        return self.delta // 2

    def check_depth_budget(self, accum: int = ACCUM_BUDGET):
        """One multiplication plus `accum` accumulated products must decrypt."""
        worst = self.cc_mul_noise(self.fresh_noise, self.fresh_noise)
        worst += 2 * self.cp_mul_noise(self.fresh_noise)
        if worst * accum >= self.noise_budget:
            raise ValueError(
                "parameters do not support one multiplication plus additions: "
                f"worst-case noise 2^{(worst * accum).bit_length()} vs budget "
                f"2^{self.noise_budget.bit_length()}"
            )


def default_plain_params(n: int = 4096, prime_bits: int = 25, primes: int = 2) -> RingParams:
    ps = ring.ntt_primes(n, prime_bits, primes)
    mod = 1
    for p in ps:
        mod *= p
    return RingParams(n, mod, primes=tuple(ps))


def default_cipher_params(n: int, plain_modulus: int, prime_bits: int = 30,
                          accum: int = 128) -> RingParams:
    """Smallest prime chain whose product passes the depth-budget check."""
    for count in range(3, 16):
        ps = ring.ntt_primes(n, prime_bits, count)
        mod = 1
        for p in ps:
            mod *= p
        cand = RingParams(n, mod, primes=tuple(ps))
        try:
            HeParams(cand, RingParams(n, plain_modulus)).check_depth_budget(accum)
            return cand
        except ValueError:
            continue
    raise ValueError("no prime chain within 16 limbs satisfies the depth budget")


def default_he_params(n: int = 4096, plain: RingParams | None = None) -> HeParams:
    plain = plain or default_plain_params(n)
    cipher = default_cipher_params(n, plain.modulus)
    params = HeParams(cipher, plain)
    params.check_depth_budget()
    return params


# --------------------------------------------------------------------------
# meters
# --------------------------------------------------------------------------


class OpMeter:
    """Per-party, per-phase operation counters and cumulative wall time."""

    def __init__(self):
        self._lock = threading.Lock()
        self.phase = "online"
        self.counts: dict[tuple[str, str], int] = {}
        self.seconds: dict[tuple[str, str], float] = {}

    def set_phase(self, phase: str):
        self.phase = phase

    def tick(self, op: str, secs: float = 0.0):
        with self._lock:
            key = (self.phase, op)
            self.counts[key] = self.counts.get(key, 0) + 1
            self.seconds[key] = self.seconds.get(key, 0.0) + secs

    def count(self, op: str, phase: str | None = None) -> int:
        with self._lock:
            if phase is None:
                return sum(v for (_, o), v in self.counts.items() if o == op)
            return self.counts.get((phase, op), 0)

    def time(self, op: str, phase: str | None = None) -> float:
        with self._lock:
            if phase is None:
                return sum(v for (_, o), v in self.seconds.items() if o == op)
            return self.seconds.get((phase, op), 0.0)

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "counts": {f"{ph}:{op}": v for (ph, op), v in sorted(self.counts.items())},
                "seconds": {f"{ph}:{op}": v for (ph, op), v in sorted(self.seconds.items())},
            }


# --------------------------------------------------------------------------
# ciphertexts and keys
# --------------------------------------------------------------------------


class Ciphertext:
    """2 parts (fresh / after CPMul) or 3 parts (after raw CCMul)."""

    __slots__ = ("parts", "noise_estimate", "backend_tag")

    def __init__(self, parts: Sequence[RingElem], noise_estimate: int, backend_tag: str):
        parts = tuple(parts)
        if len(parts) not in (2, 3):
            raise HeError(f"a ciphertext has 2 or 3 parts, not {len(parts)}")
        self.parts = parts
        self.noise_estimate = int(noise_estimate)
        self.backend_tag = backend_tag

    @property
    def nparts(self) -> int:
        return len(self.parts)


@dataclasses.dataclass(frozen=True)
class KeySet:
    """secret key stays client-side; public/relin keys go to the server."""

    secret: RingElem | None
    public: tuple[RingElem, RingElem] | None
    relin: tuple[tuple[RingElem, RingElem], ...] | None
    backend_tag: str


class PublicKeys:
    """The server-side subset of a KeySet."""

    def __init__(self, keys: KeySet):
        self.public = keys.public
        self.relin = keys.relin
        self.backend_tag = keys.backend_tag


# --------------------------------------------------------------------------
# backend implementations
# --------------------------------------------------------------------------


class He:
    """One party's HE evaluator: parameters, backend, meter."""

    def __init__(self, params: HeParams, backend: str = BACKEND_CLEAR,
                 meter: OpMeter | None = None):
        if backend not in (BACKEND_CLEAR, BACKEND_RLWE):
            raise ValueError(f"unknown backend {backend!r}")
        self.params = params
        self.backend = backend
        self.meter = meter or OpMeter()
        self._zero_plain = RingElem.zeros(params.plain_ring)

    # -- keys ---------------------------------------------------------------

    def keygen(self, seed: int) -> KeySet:
        if self.backend == BACKEND_CLEAR:
            return KeySet(secret=None, public=None, relin=None, backend_tag=self.backend)
        rng = np.random.default_rng(seed)
        qr = self.params.cipher_ring
        s = self._ternary(rng)
        a = RingElem.random(qr, rng)
        e = self._error(rng)
        b = ring.ring_neg(ring.ring_add(ring.ring_mul(a, s), e))
        relin = []
        w = self.params.relin_base_bits
        s2 = ring.ring_mul(s, s)
        for i in range(self.params.relin_digits):
            ai = RingElem.random(qr, rng)
            ei = self._error(rng)
            shift = ring.ring_scalar_mul(s2, 1 << (w * i))
            bi = ring.ring_sub(shift, ring.ring_add(ring.ring_mul(ai, s), ei))
            relin.append((bi, ai))
        return KeySet(secret=s, public=(b, a), relin=tuple(relin), backend_tag=self.backend)

    def _ternary(self, rng) -> RingElem:
        vals = rng.integers(-1, 2, size=self.params.n)
        return RingElem.from_ints(self.params.cipher_ring, vals)

    def _error(self, rng) -> RingElem:
        bound = self.params.error_bound
        vals = np.clip(
            np.rint(rng.normal(0.0, self.params.noise_stddev, size=self.params.n)),
            -bound,
            bound,
        ).astype(np.int64)
        return RingElem.from_ints(self.params.cipher_ring, vals)

    # -- encrypt / decrypt ----------------------------------------------------

    def encrypt(self, m: RingElem, keys: KeySet | PublicKeys, rng: np.random.Generator) -> Ciphertext:
        t0 = time.perf_counter()
        if not m.params.compatible(self.params.plain_ring):
            raise HeError("payload must live in the plain ring")
        if self.backend == BACKEND_CLEAR:
            ct = Ciphertext([m, self._zero_plain], 0, self.backend)
        else:
            b, a = keys.public
            u = self._ternary(rng)
            e1 = self._error(rng)
            e2 = self._error(rng)
            dm = ring.ring_scalar_mul(self._lift(m), self.params.delta)
            c0 = ring.ring_add(ring.ring_add(ring.ring_mul(b, u), e1), dm)
            c1 = ring.ring_add(ring.ring_mul(a, u), e2)
            ct = Ciphertext([c0, c1], self.params.fresh_noise, self.backend)
        self.meter.tick("Enc", time.perf_counter() - t0)
        return ct

    def _lift(self, m: RingElem) -> RingElem:
        """Centered lift of a plain-ring payload into the cipher ring."""
        return RingElem.from_ints(self.params.cipher_ring, m.to_signed())

    def decrypt(self, ct: Ciphertext, keys: KeySet) -> RingElem:
        t0 = time.perf_counter()
        self._check_tag(ct)
        if self.backend == BACKEND_CLEAR:
            out = ct.parts[0]
            self.meter.tick("Dec", time.perf_counter() - t0)
            return out
        if ct.noise_estimate >= self.params.noise_budget:
            raise NoiseOverflowError(
                f"noise estimate 2^{ct.noise_estimate.bit_length()} is at or above "
                f"the budget 2^{self.params.noise_budget.bit_length()}"
            )
        s = keys.secret
        acc = ct.parts[0]
        spow = s
        for part in ct.parts[1:]:
            acc = ring.ring_add(acc, ring.ring_mul(part, spow))
            spow = ring.ring_mul(spow, s)
        q, t = self.params.q, self.params.t
        vals = [(int(v) * t + q // 2) // q % t for v in acc.coeffs]
        out = RingElem.from_ints(self.params.plain_ring, vals)
        self.meter.tick("Dec", time.perf_counter() - t0)
        return out

    # -- homomorphic ops ------------------------------------------------------

    def cc_add(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        t0 = time.perf_counter()
        self._check_tag(a)
        self._check_tag(b)
        if a.nparts != b.nparts:
            raise PartCountError(f"part counts differ: {a.nparts} vs {b.nparts}")
        parts = [ring.ring_add(x, y) for x, y in zip(a.parts, b.parts)]
        ct = Ciphertext(parts, a.noise_estimate + b.noise_estimate, self.backend)
        self.meter.tick("CCAdd", time.perf_counter() - t0)
        return ct

    def cp_mul(self, ct: Ciphertext, pt: RingElem) -> Ciphertext:
        t0 = time.perf_counter()
        self._check_tag(ct)
        if ct.nparts != 2:
            raise PartCountError("CPMul needs a 2-part ciphertext; relinearize first")
        if not pt.params.compatible(self.params.plain_ring):
            raise HeError("CPMul plaintext must live in the plain ring")
        if self.backend == BACKEND_CLEAR:
            out = Ciphertext(
                [ring.ring_mul(ct.parts[0], pt), self._zero_plain], 0, self.backend
            )
        else:
            lifted = self._lift(pt)
            parts = [ring.ring_mul(p, lifted) for p in ct.parts]
            out = Ciphertext(parts, self.params.cp_mul_noise(ct.noise_estimate), self.backend)
        self.meter.tick("CPMul", time.perf_counter() - t0)
        return out

    def cc_mul_raw(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        """Tensor product only: 3 parts, not yet relinearized. Unmetered."""
        self._check_tag(a)
        self._check_tag(b)
        if a.nparts != 2 or b.nparts != 2:
            raise PartCountError("CCMul needs two 2-part ciphertexts")
        if self.backend == BACKEND_CLEAR:
            prod = ring.ring_mul(a.parts[0], b.parts[0])
            return Ciphertext([prod, self._zero_plain, self._zero_plain], 0, self.backend)
        n, q, t = self.params.n, self.params.q, self.params.t
        bound = n * (q // 2 + 1) ** 2
        lift = lambda e: [v for v in _centered(e)]
        c0, c1 = (lift(p) for p in a.parts)
        d0, d1 = (lift(p) for p in b.parts)
        h0 = ring.int_negacyclic_mul(c0, d0, bound, n)
        h1a = ring.int_negacyclic_mul(c0, d1, bound, n)
        h1b = ring.int_negacyclic_mul(c1, d0, bound, n)
        h2 = ring.int_negacyclic_mul(c1, d1, bound, n)
        parts = []
        for h in (h0, h1a + h1b, h2):
            scaled = [_div_round(int(v) * t, q) for v in h]
            parts.append(RingElem.from_ints(self.params.cipher_ring, scaled))
        nu = 2 * n * t * (a.noise_estimate + b.noise_estimate) + 2 * n * n * t * t
        return Ciphertext(parts, nu, self.backend)

    def relinearize(self, ct: Ciphertext, keys: KeySet | PublicKeys) -> Ciphertext:
        t0 = time.perf_counter()
        self._check_tag(ct)
        if ct.nparts != 3:
            raise PartCountError("relinearization expects a 3-part ciphertext")
        if self.backend == BACKEND_CLEAR:
            out = Ciphertext(ct.parts[:2], 0, self.backend)
        else:
            w = self.params.relin_base_bits
            base_mask = (1 << w) - 1
            c0, c1, c2 = ct.parts
            digits_src = [int(v) for v in c2.coeffs]
            acc0, acc1 = c0, c1
            for i in range(self.params.relin_digits):
                digit = [(v >> (w * i)) & base_mask for v in digits_src]
                dpoly = RingElem.from_ints(self.params.cipher_ring, digit)
                b_i, a_i = keys.relin[i]
                acc0 = ring.ring_add(acc0, ring.ring_mul(dpoly, b_i))
                acc1 = ring.ring_add(acc1, ring.ring_mul(dpoly, a_i))
            out = Ciphertext(
                [acc0, acc1], ct.noise_estimate + self.params.relin_noise, self.backend
            )
        self.meter.tick("Relin", time.perf_counter() - t0)
        return out

    def cc_mul(self, a: Ciphertext, b: Ciphertext, keys: KeySet | PublicKeys) -> Ciphertext:
        t0 = time.perf_counter()
        raw = self.cc_mul_raw(a, b)
        out = self.relinearize(raw, keys)
        self.meter.tick("CCMul", time.perf_counter() - t0)
        return out

    def pp_mul(self, a: RingElem, b: RingElem) -> RingElem:
        t0 = time.perf_counter()
        out = ring.ring_mul(a, b)
        self.meter.tick("PPMul", time.perf_counter() - t0)
        return out

    def _check_tag(self, ct: Ciphertext):
        if ct.backend_tag != self.backend:
            raise HeError(
                f"ciphertext from backend {ct.backend_tag!r} fed to {self.backend!r}"
            )

    # -- serialization ---------------------------------------------------------

    @property
    def _ct_ring(self) -> RingParams:
        return self.params.plain_ring if self.backend == BACKEND_CLEAR else self.params.cipher_ring

    def ct_to_bytes(self, ct: Ciphertext) -> bytes:
        body = b"".join(ring.ring_to_bytes(p) for p in ct.parts)
        return struct.pack("<B", ct.nparts) + body

    def ct_from_bytes(self, data: bytes, noise: int | None = None) -> Ciphertext:
        """Rebuild a ciphertext; the wire carries no noise estimate.

        `noise` is the protocol-context bound the receiver asserts (e.g. the
        fresh bound for incoming encryptions); without one, the worst bound
        the validated depth budget admits is assumed.
        """
        (nparts,) = struct.unpack_from("<B", data, 0)
        rp = self._ct_ring
        size = 5 + rp.n * 8 * rp.limb_count
        parts = []
        off = 1
        for _ in range(nparts):
            parts.append(ring.ring_from_bytes(data[off : off + size], rp))
            off += size
        if self.backend == BACKEND_CLEAR:
            nu = 0
        else:
            nu = self._pessimistic_noise() if noise is None else noise
        return Ciphertext(parts, nu, self.backend)

    def _pessimistic_noise(self) -> int:
        p = self.params
        per_site = p.cc_mul_noise(p.fresh_noise, p.fresh_noise) + 2 * p.cp_mul_noise(
            p.fresh_noise
        )
        return per_site * ACCUM_BUDGET

    def public_keys_to_bytes(self, keys: KeySet | PublicKeys) -> bytes:
        if self.backend == BACKEND_CLEAR:
            return b"\x00"
        blobs = [ring.ring_to_bytes(keys.public[0]), ring.ring_to_bytes(keys.public[1])]
        for b_i, a_i in keys.relin:
            blobs.append(ring.ring_to_bytes(b_i))
            blobs.append(ring.ring_to_bytes(a_i))
        return struct.pack("<H", len(blobs)) + b"".join(blobs)

    def public_keys_from_bytes(self, data: bytes) -> PublicKeys:
        if self.backend == BACKEND_CLEAR:
            return PublicKeys(KeySet(None, None, None, self.backend))
        (count,) = struct.unpack_from("<H", data, 0)
        rp = self.params.cipher_ring
        size = 5 + rp.n * 8 * rp.limb_count
        elems = []
        off = 2
        for _ in range(count):
            elems.append(ring.ring_from_bytes(data[off : off + size], rp))
            off += size
        public = (elems[0], elems[1])
        relin = tuple((elems[i], elems[i + 1]) for i in range(2, len(elems), 2))
        return PublicKeys(KeySet(None, public, relin, self.backend))

    def secret_key_to_bytes(self, keys: KeySet) -> bytes:
        if keys.secret is None:
            return b""
        return ring.ring_to_bytes(keys.secret)


def _centered(e: RingElem):
    m = e.params.modulus
    half = m // 2
    return [int(v) - m if int(v) > half else int(v) for v in e.coeffs]


def _div_round(a: int, b: int) -> int:
    """round(a / b) with ties away from zero, exact in integers."""
    if a >= 0:
        return (a + b // 2) // b
    return -((-a + b // 2) // b)
