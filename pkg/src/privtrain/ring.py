"""Exact arithmetic in the negacyclic polynomial ring Z_p[x]/(x^n + 1).

Every packing scheme and every HE operation in this package runs on the
elements defined here.  The modulus may be a single prime or a declared
product of NTT-friendly primes; in the latter case multiplication runs
per-prime in uint64 and recombines by CRT, which keeps the whole hot path
inside exact numpy integer arithmetic.  A schoolbook multiplier is kept
permanently as the independent oracle.
"""

from __future__ import annotations

import dataclasses
import struct
from typing import Iterable, Sequence

import numpy as np


class RingError(Exception):
    """Base error for ring arithmetic."""


class ParamsMismatchError(RingError):
    """Operands belong to different rings (or different domains)."""


class NttUnavailableError(RingError):
    """The modulus does not support a negacyclic NTT of this degree."""


# --------------------------------------------------------------------------
# primality / prime search
# --------------------------------------------------------------------------

_MR_WITNESSES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin, exact for n < 2^64 (and safe beyond)."""
    if n < 2:
        return False
    for p in _MR_WITNESSES:
        if n % p == 0:
            return n == p
    d = n - 1
    r = 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for a in _MR_WITNESSES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def ntt_primes(n: int, bits: int, count: int, skip: Iterable[int] = ()) -> list[int]:
    """`count` distinct primes p ≡ 1 (mod 2n) just below 2^bits, descending."""
    if not _is_pow2(n):
        raise ValueError("ring degree must be a power of two")
    step = 2 * n
    skip_set = set(skip)
    found: list[int] = []
    p = ((1 << bits) - 2) // step * step + 1
    while len(found) < count:
        if p < step + 1:
            raise ValueError(f"not enough {bits}-bit primes = 1 mod {step}")
        if p not in skip_set and is_prime(p):
            found.append(p)
        p -= step
    return found


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def _bit_reverse(x: int, bits: int) -> int:
    y = 0
    for _ in range(bits):
        y = (y << 1) | (x & 1)
        x >>= 1
    return y


def _find_root_of_unity(order: int, p: int) -> int:
    """Smallest-witness element of exact multiplicative order `order` mod p."""
    if (p - 1) % order != 0:
        raise NttUnavailableError(f"no order-{order} root exists mod {p}")
    cofactor = (p - 1) // order
    for g in range(2, p):
        psi = pow(g, cofactor, p)
        if pow(psi, order // 2, p) == p - 1:
            return psi
    raise NttUnavailableError(f"no generator found mod {p}")


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class RingParams:
    """Degree and coefficient modulus of the ring Z_modulus[x]/(x^n + 1).

    `primes`, when given, declares a factorization of the modulus into
    distinct NTT-friendly primes (each ≡ 1 mod 2n, below 2^31) so that
    multiplication can run per-prime in uint64.
    """

    n: int
    modulus: int
    primes: tuple[int, ...] | None = None

    def __post_init__(self):
        if not _is_pow2(self.n):
            raise ValueError(f"ring degree {self.n} is not a power of two")
        if self.modulus <= 1:
            raise ValueError("modulus must exceed 1")
        if self.primes is not None:
            object.__setattr__(self, "primes", tuple(self.primes))
            prod = 1
            for p in self.primes:
                if p % (2 * self.n) != 1:
                    raise ValueError(f"prime {p} is not 1 mod {2 * self.n}")
                if p >= 1 << 31:
                    raise ValueError(f"prime {p} too large for the uint64 kernels")
                prod *= p
            if prod != self.modulus:
                raise ValueError("declared primes do not multiply to the modulus")
            if len(set(self.primes)) != len(self.primes):
                raise ValueError("primes must be distinct")

    @property
    def ntt_enabled(self) -> bool:
        return self.modulus % (2 * self.n) == 1

    @property
    def limb_count(self) -> int:
        return max(1, (self.modulus.bit_length() + 63) // 64)

    @property
    def uses_uint64(self) -> bool:
        return self.modulus < (1 << 63)

    def compatible(self, other: "RingParams") -> bool:
        return self.n == other.n and self.modulus == other.modulus


# --------------------------------------------------------------------------
# NTT kernels (vectorized per level; exact in uint64 below 2^31, exact in
# python ints above)
# --------------------------------------------------------------------------


class _NttPlan:
    """Precomputed twiddle tables for one (n, modulus) pair.

    Twiddles live at w[i] = psi^bitrev(i, log n) for a 2n-th root psi; the
    forward pass consumes w[m..2m) per level of m blocks and the inverse
    walks the same table backwards with the (y - x) sign trick, so one
    table serves both directions.
    """

    def __init__(self, n: int, modulus: int):
        self.n = n
        self.p = modulus
        logn = n.bit_length() - 1
        psi = _find_root_of_unity(2 * n, modulus)
        self.use_u64 = modulus < (1 << 31)
        dtype = np.uint64 if self.use_u64 else object
        powers = [1] * n
        for i in range(1, n):
            powers[i] = powers[i - 1] * psi % modulus
        self.w = np.array([powers[_bit_reverse(i, logn)] for i in range(n)], dtype=dtype)
        self.n_inv = pow(n, -1, modulus)

    def forward(self, a: np.ndarray) -> np.ndarray:
        p = np.uint64(self.p) if self.use_u64 else self.p
        a = a.copy()
        half = self.n // 2
        m = 1
        while half > 0:
            view = a.reshape(m, 2 * half)
            z = self.w[m : 2 * m].reshape(m, 1)
            x = view[:, :half].copy()
            y = view[:, half:] * z % p
            view[:, :half] = (x + y) % p
            view[:, half:] = (x + p - y) % p
            half //= 2
            m *= 2
        return a

    def inverse(self, a: np.ndarray) -> np.ndarray:
        p = np.uint64(self.p) if self.use_u64 else self.p
        a = a.copy()
        half = 1
        m = self.n // 2
        while m > 0:
            view = a.reshape(m, 2 * half)
            z = self.w[m : 2 * m][::-1].reshape(m, 1)
            x = view[:, :half].copy()
            y = view[:, half:].copy()
            view[:, :half] = (x + y) % p
            view[:, half:] = (y + p - x) * z % p
            half *= 2
            m //= 2
        ninv = np.uint64(self.n_inv) if self.use_u64 else self.n_inv
        return a * ninv % p


_NTT_PLANS: dict[tuple[int, int], _NttPlan] = {}


def _plan(n: int, modulus: int) -> _NttPlan:
    key = (n, modulus)
    plan = _NTT_PLANS.get(key)
    if plan is None:
        plan = _NttPlan(n, modulus)
        _NTT_PLANS[key] = plan
    return plan


# --------------------------------------------------------------------------
# elements
# --------------------------------------------------------------------------


class RingElem:
    """Immutable element of Z_modulus[x]/(x^n + 1); coefficient of x^i at i.

    Forward NTT residues are memoized per prime (safe: the value never
    changes), which saves transforms when one operand multiplies many.
    """

    __slots__ = ("params", "coeffs", "domain", "_fwd_cache")

    def __init__(self, params: RingParams, coeffs: np.ndarray, domain: str = "coeff"):
        if len(coeffs) != params.n:
            raise RingError(f"expected {params.n} coefficients, got {len(coeffs)}")
        coeffs = coeffs.copy()
        coeffs.flags.writeable = False
        self.params = params
        self.coeffs = coeffs
        self.domain = domain
        self._fwd_cache: dict[int, np.ndarray] = {}

    # construction -----------------------------------------------------

    @staticmethod
    def zeros(params: RingParams) -> "RingElem":
        dtype = np.uint64 if params.uses_uint64 else object
        arr = np.zeros(params.n, dtype=dtype)
        if dtype is object:
            arr[:] = 0
        return RingElem(params, arr)

    @staticmethod
    def from_ints(params: RingParams, values: Sequence[int] | np.ndarray) -> "RingElem":
        """Reduce arbitrary (possibly signed) integers into [0, modulus)."""
        arr = np.asarray(values)
        if params.uses_uint64:
            if arr.dtype == np.uint64:
                return RingElem(params, arr % np.uint64(params.modulus))
            if arr.dtype in (np.int64, np.int32, np.uint32, np.int16, np.uint16, np.int8, np.uint8):
                reduced = arr.astype(np.int64) % np.int64(params.modulus)
                return RingElem(params, reduced.astype(np.uint64))
        arr = arr.astype(object) % params.modulus
        if params.uses_uint64:
            arr = arr.astype(np.uint64)
        return RingElem(params, arr)

    @staticmethod
    def monomial(params: RingParams, coeff: int, degree: int) -> "RingElem":
        """coeff * x^degree with negacyclic degree reduction (x^n = -1)."""
        k, d = divmod(degree, params.n)
        if k % 2 == 1:
            coeff = -coeff
        vals = [0] * params.n
        vals[d] = coeff
        return RingElem.from_ints(params, vals)

    @staticmethod
    def random(params: RingParams, rng: np.random.Generator) -> "RingElem":
        if params.uses_uint64:
            arr = rng.integers(0, params.modulus, size=params.n, dtype=np.uint64)
            return RingElem(params, arr)
        # large modulus: draw limb-wise
        vals = [
            int.from_bytes(rng.bytes((params.modulus.bit_length() + 15) // 8), "little")
            % params.modulus
            for _ in range(params.n)
        ]
        return RingElem.from_ints(params, vals)

    # views --------------------------------------------------------------

    def to_ints(self) -> list[int]:
        return [int(c) for c in self.coeffs]

    def to_signed(self) -> list[int]:
        """Centered representatives in (-modulus/2, modulus/2]."""
        half = self.params.modulus // 2
        return [int(c) - self.params.modulus if int(c) > half else int(c) for c in self.coeffs]

    def is_zero(self) -> bool:
        return all(int(c) == 0 for c in self.coeffs)

    # operators (delegate to the module functions) ----------------------

    def __add__(self, other):
        return ring_add(self, other)

    def __sub__(self, other):
        return ring_sub(self, other)

    def __neg__(self):
        return ring_neg(self)

    def __mul__(self, other):
        if isinstance(other, RingElem):
            return ring_mul(self, other)
        return ring_scalar_mul(self, int(other))

    __rmul__ = __mul__

    def __eq__(self, other):
        return (
            isinstance(other, RingElem)
            and self.params.compatible(other.params)
            and self.domain == other.domain
            and all(int(a) == int(b) for a, b in zip(self.coeffs, other.coeffs))
        )

    def __hash__(self):
        return hash((self.params.n, self.params.modulus, self.domain, bytes(str(self.to_ints()), "ascii")))

    def __repr__(self):
        head = ", ".join(str(int(c)) for c in self.coeffs[:4])
        return f"RingElem(n={self.params.n}, mod={self.params.modulus}, [{head}, ...], {self.domain})"


def _check_pair(a: RingElem, b: RingElem, op: str):
    if not a.params.compatible(b.params):
        raise ParamsMismatchError(f"{op}: ring parameters differ")
    if a.domain != b.domain:
        raise ParamsMismatchError(f"{op}: domains differ ({a.domain} vs {b.domain})")


# --------------------------------------------------------------------------
# arithmetic
# --------------------------------------------------------------------------


def ring_add(a: RingElem, b: RingElem) -> RingElem:
    """Coefficientwise (a + b) mod p."""
    _check_pair(a, b, "ring_add")
    if a.params.uses_uint64:
        out = (a.coeffs + b.coeffs) % np.uint64(a.params.modulus)
    else:
        out = (a.coeffs + b.coeffs) % a.params.modulus
    return RingElem(a.params, out, a.domain)


def ring_sub(a: RingElem, b: RingElem) -> RingElem:
    _check_pair(a, b, "ring_sub")
    m = a.params.modulus
    if a.params.uses_uint64:
        out = (a.coeffs + (np.uint64(m) - b.coeffs)) % np.uint64(m)
    else:
        out = (a.coeffs - b.coeffs) % m
    return RingElem(a.params, out, a.domain)


def ring_neg(a: RingElem) -> RingElem:
    m = a.params.modulus
    if a.params.uses_uint64:
        out = (np.uint64(m) - a.coeffs) % np.uint64(m)
    else:
        out = (-a.coeffs) % m
    return RingElem(a.params, out, a.domain)


def ring_scalar_mul(a: RingElem, c: int) -> RingElem:
    m = a.params.modulus
    c %= m
    if a.params.uses_uint64 and c < (1 << 31) and m < (1 << 31):
        out = a.coeffs * np.uint64(c) % np.uint64(m)
    else:
        out = a.coeffs.astype(object) * c % m
        if a.params.uses_uint64:
            out = out.astype(np.uint64)
    return RingElem(a.params, out, a.domain)


def ring_mul(a: RingElem, b: RingElem) -> RingElem:
    """Negacyclic product reduced mod (x^n + 1, modulus).

    NTT-based whenever the modulus (or each of its declared primes) is
    1 mod 2n; schoolbook with sign folding otherwise.
    """
    _check_pair(a, b, "ring_mul")
    params = a.params
    if a.domain == "eval":
        raise RingError("ring_mul expects coefficient-domain inputs; use pointwise_mul")
    if params.primes is not None:
        return _crt_ntt_mul(a, b)
    if params.ntt_enabled:
        plan = _plan(params.n, params.modulus)
        if plan.use_u64:
            fa = _fwd_residue(a, params.modulus, plan)
            fb = _fwd_residue(b, params.modulus, plan)
            out = plan.inverse(fa * fb % np.uint64(params.modulus))
        else:
            fa = plan.forward(_as_plan_dtype(a.coeffs, plan))
            fb = plan.forward(_as_plan_dtype(b.coeffs, plan))
            out = plan.inverse(fa * fb % params.modulus)
        return RingElem(params, _from_plan_dtype(out, params))
    return ring_mul_schoolbook(a, b)


def ring_mul_schoolbook(a: RingElem, b: RingElem) -> RingElem:
    """O(n^2) reference multiplier; the permanent test oracle."""
    _check_pair(a, b, "ring_mul_schoolbook")
    n = a.params.n
    av = a.coeffs.astype(object)
    bv = b.coeffs.astype(object)
    full = np.convolve(av, bv)
    folded = full[:n].copy()
    folded[: n - 1] -= full[n:]
    return RingElem.from_ints(a.params, folded)


def _as_plan_dtype(coeffs: np.ndarray, plan: _NttPlan) -> np.ndarray:
    if plan.use_u64:
        return coeffs.astype(np.uint64)
    return coeffs.astype(object)


def _from_plan_dtype(arr: np.ndarray, params: RingParams) -> np.ndarray:
    if params.uses_uint64:
        return arr.astype(np.uint64)
    return arr.astype(object)


def _fwd_residue(elem: RingElem, p: int, plan: _NttPlan) -> np.ndarray:
    cached = elem._fwd_cache.get(p)
    if cached is None:
        cached = plan.forward((elem.coeffs % p).astype(np.uint64))
        elem._fwd_cache[p] = cached
    return cached


def _crt_ntt_mul(a: RingElem, b: RingElem) -> RingElem:
    params = a.params
    primes = params.primes
    residues = []
    for p in primes:
        plan = _plan(params.n, p)
        fa = _fwd_residue(a, p, plan)
        fb = _fwd_residue(b, p, plan)
        residues.append(plan.inverse(fa * fb % np.uint64(p)))
    out = _crt_combine(residues, primes, params.modulus)
    if params.uses_uint64:
        out = out.astype(np.uint64)
    return RingElem(params, out)


def _crt_combine(residues: list[np.ndarray], primes: Sequence[int], modulus: int) -> np.ndarray:
    if len(primes) == 2 and modulus < (1 << 63):
        p1, p2 = primes
        inv = pow(p1, -1, p2)
        r1 = residues[0]
        r2 = residues[1]
        diff = (r2 + np.uint64(p2) - r1 % np.uint64(p2)) % np.uint64(p2)
        t = diff * np.uint64(inv) % np.uint64(p2)
        return r1 + np.uint64(p1) * t
    acc = np.zeros(len(residues[0]), dtype=object)
    for r, p in zip(residues, primes):
        m_i = modulus // p
        y_i = pow(m_i, -1, p)
        acc += r.astype(object) * (m_i * y_i)
    return acc % modulus


# --------------------------------------------------------------------------
# integer-coefficient negacyclic products (HE internals)
# --------------------------------------------------------------------------

_AUX_BITS = 30
_aux_cache: dict[int, list[int]] = {}


def _aux_primes(n: int, need_bits: int) -> list[int]:
    have = _aux_cache.setdefault(n, [])
    while sum(p.bit_length() - 1 for p in have) < need_bits:
        more = ntt_primes(n, _AUX_BITS, len(have) + 1, skip=have)
        have.extend(p for p in more if p not in have)
    total, picked = 0, []
    for p in have:
        picked.append(p)
        total += p.bit_length() - 1
        if total >= need_bits:
            break
    return picked


def int_negacyclic_mul(a: Sequence[int], b: Sequence[int], bound: int, n: int) -> np.ndarray:
    """Exact signed negacyclic product of integer coefficient vectors.

    `bound` must dominate the magnitude of every output coefficient; the
    product is computed by CRT over enough auxiliary NTT primes and
    recentered into (-M/2, M/2].
    """
    need = 2 * bound + 1
    primes = _aux_primes(n, need.bit_length() + 1)
    av = np.asarray(a, dtype=object)
    bv = np.asarray(b, dtype=object)
    residues = []
    for p in primes:
        plan = _plan(n, p)
        ra = (av % p).astype(np.uint64)
        rb = (bv % p).astype(np.uint64)
        residues.append(plan.inverse(plan.forward(ra) * plan.forward(rb) % np.uint64(p)))
    big_m = 1
    for p in primes:
        big_m *= p
    combined = _crt_combine(residues, primes, big_m)
    if isinstance(combined, np.ndarray) and combined.dtype != object:
        combined = combined.astype(object)
    combined = combined % big_m
    half = big_m // 2
    return np.array([int(c) - big_m if int(c) > half else int(c) for c in combined], dtype=object)


# --------------------------------------------------------------------------
# NTT surface ops
# --------------------------------------------------------------------------


def ntt_forward(a: RingElem) -> RingElem:
    """Transform to the evaluation domain (requires modulus ≡ 1 mod 2n)."""
    params = a.params
    if a.domain != "coeff":
        raise RingError("ntt_forward expects a coefficient-domain element")
    if not params.ntt_enabled:
        raise NttUnavailableError(f"modulus {params.modulus} is not 1 mod {2 * params.n}")
    plan = _plan(params.n, params.modulus)
    out = plan.forward(_as_plan_dtype(a.coeffs, plan))
    return RingElem(params, _from_plan_dtype(out, params), domain="eval")


def ntt_inverse(a: RingElem) -> RingElem:
    params = a.params
    if a.domain != "eval":
        raise RingError("ntt_inverse expects an evaluation-domain element")
    if not params.ntt_enabled:
        raise NttUnavailableError(f"modulus {params.modulus} is not 1 mod {2 * params.n}")
    plan = _plan(params.n, params.modulus)
    out = plan.inverse(_as_plan_dtype(a.coeffs, plan))
    return RingElem(params, _from_plan_dtype(out, params), domain="coeff")


def pointwise_mul(a: RingElem, b: RingElem) -> RingElem:
    """Slotwise product of two evaluation-domain elements."""
    _check_pair(a, b, "pointwise_mul")
    if a.domain != "eval":
        raise RingError("pointwise_mul expects evaluation-domain elements")
    m = a.params.modulus
    if a.params.uses_uint64 and m < (1 << 31):
        out = a.coeffs * b.coeffs % np.uint64(m)
    else:
        out = a.coeffs.astype(object) * b.coeffs.astype(object) % m
        if a.params.uses_uint64:
            out = out.astype(np.uint64)
    return RingElem(a.params, out, domain="eval")


# --------------------------------------------------------------------------
# serialization: n (u32 LE) | limb count (u8) | coefficient-major LE u64 limbs
# --------------------------------------------------------------------------


def ring_to_bytes(a: RingElem) -> bytes:
    params = a.params
    limbs = params.limb_count
    head = struct.pack("<IB", params.n, limbs)
    if limbs == 1:
        return head + a.coeffs.astype("<u8").tobytes()
    body = b"".join(int(c).to_bytes(8 * limbs, "little") for c in a.coeffs)
    return head + body


def ring_from_bytes(data: bytes, params: RingParams) -> RingElem:
    n, limbs = struct.unpack_from("<IB", data, 0)
    if n != params.n or limbs != params.limb_count:
        raise RingError("serialized header does not match the ring parameters")
    off = 5
    if limbs == 1:
        arr = np.frombuffer(data, dtype="<u8", count=n, offset=off).astype(np.uint64)
        return RingElem.from_ints(params, arr)
    width = 8 * limbs
    vals = [
        int.from_bytes(data[off + i * width : off + (i + 1) * width], "little")
        for i in range(n)
    ]
    return RingElem.from_ints(params, vals)
