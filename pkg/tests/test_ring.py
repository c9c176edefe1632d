import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import negacyclic_mul
from privtrain import ring
from privtrain.ring import RingElem, RingParams


def test_params_validation():
    with pytest.raises(ValueError):
        RingParams(3, 17)
    with pytest.raises(ValueError):
        RingParams(4, 1)
    with pytest.raises(ValueError):
        RingParams(4, 15, primes=(3, 5))  # 3 is not 1 mod 8
    p1, p2 = ring.ntt_primes(4, 20, 2)
    with pytest.raises(ValueError):
        RingParams(4, p1 * p2 + 1, primes=(p1, p2))


def test_add_identity_and_wrap():
    P = RingParams(4, 17)
    b = RingElem.from_ints(P, [5, 11, 0, 3])
    zero = RingElem.zeros(P)
    assert ring.ring_add(zero, b) == b
    a = RingElem.from_ints(P, [1, 2, 3, 4])
    c = RingElem.from_ints(P, [16, 16, 16, 16])
    assert ring.ring_add(a, c).to_ints() == [0, 1, 2, 3]


def test_add_commutes(rng):
    P = RingParams(8, 12289)
    a = RingElem.random(P, rng)
    b = RingElem.random(P, rng)
    assert ring.ring_add(a, b) == ring.ring_add(b, a)


def test_params_mismatch_raises():
    a = RingElem.zeros(RingParams(4, 17))
    b = RingElem.zeros(RingParams(4, 97))
    with pytest.raises(ring.ParamsMismatchError):
        ring.ring_add(a, b)
    with pytest.raises(ring.ParamsMismatchError):
        ring.ring_mul(a, b)


def test_negacyclic_wrap():
    P = RingParams(4, 17)
    x3 = RingElem.monomial(P, 1, 3)
    x1 = RingElem.monomial(P, 1, 1)
    assert ring.ring_mul(x3, x1).to_ints() == [16, 0, 0, 0]


def test_mul_identity(rng):
    P = RingParams(8, 12289)
    one = RingElem.monomial(P, 1, 0)
    b = RingElem.random(P, rng)
    assert ring.ring_mul(one, b) == b


def test_ntt_matches_schoolbook_random(rng):
    P = RingParams(8, 12289)
    for _ in range(20):
        a = RingElem.random(P, rng)
        b = RingElem.random(P, rng)
        fast = ring.ring_mul(a, b)
        slow = ring.ring_mul_schoolbook(a, b)
        assert fast == slow
        assert fast.to_ints() == negacyclic_mul(a.to_ints(), b.to_ints(), P.modulus)


@pytest.mark.parametrize("n", [4, 8, 16, 32])
def test_ntt_schoolbook_exhaustive_sparse(n):
    """All monomial pairs: the negacyclic rotation structure is exact."""
    p = ring.ntt_primes(n, 18, 1)[0]
    P = RingParams(n, p)
    for i in range(n):
        for j in range(n):
            a = RingElem.monomial(P, 3, i)
            b = RingElem.monomial(P, 5, j)
            assert ring.ring_mul(a, b) == ring.ring_mul_schoolbook(a, b)


def test_ntt_schoolbook_at_4096(rng):
    p1, p2 = ring.ntt_primes(4096, 25, 2)
    P = RingParams(4096, p1 * p2, primes=(p1, p2))
    a = RingElem.random(P, rng)
    b = RingElem.random(P, rng)
    assert ring.ring_mul(a, b) == ring.ring_mul_schoolbook(a, b)


def test_negacyclic_rotation_property(rng):
    P = RingParams(16, ring.ntt_primes(16, 18, 1)[0])
    a = RingElem.random(P, rng)
    coeffs = a.to_ints()
    n, p = P.n, P.modulus
    for k in range(n):
        rotated = ring.ring_mul(a, RingElem.monomial(P, 1, k)).to_ints()
        expect = [0] * n
        for i, c in enumerate(coeffs):
            j = i + k
            expect[j % n] = (c if (j // n) % 2 == 0 else -c) % p
        assert rotated == expect


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**20), st.integers(0, 2**20), st.integers(0, 2**20), st.data())
def test_ring_axioms(sa, sb, sc, data):
    P = RingParams(8, 12289)
    rng = np.random.default_rng([sa, sb, sc])
    a, b, c = (RingElem.random(P, rng) for _ in range(3))
    assert ring.ring_mul(a, b) == ring.ring_mul(b, a)
    assert ring.ring_mul(ring.ring_mul(a, b), c) == ring.ring_mul(a, ring.ring_mul(b, c))
    lhs = ring.ring_mul(a, ring.ring_add(b, c))
    rhs = ring.ring_add(ring.ring_mul(a, b), ring.ring_mul(a, c))
    assert lhs == rhs


def test_ntt_roundtrip_and_pointwise(rng):
    P = RingParams(32, ring.ntt_primes(32, 18, 1)[0])
    zero = RingElem.zeros(P)
    assert ring.ntt_forward(zero).is_zero()
    a = RingElem.random(P, rng)
    b = RingElem.random(P, rng)
    assert ring.ntt_inverse(ring.ntt_forward(a)) == a
    ptw = ring.ntt_inverse(ring.pointwise_mul(ring.ntt_forward(a), ring.ntt_forward(b)))
    assert ptw == ring.ring_mul_schoolbook(a, b)


def test_ntt_unfriendly_modulus_errors():
    P = RingParams(8, 19)  # 19 != 1 mod 16
    a = RingElem.zeros(P)
    with pytest.raises(ring.NttUnavailableError):
        ring.ntt_forward(a)
    # ring_mul falls back to schoolbook and stays correct
    rng = np.random.default_rng(0)
    x = RingElem.random(P, rng)
    y = RingElem.random(P, rng)
    assert ring.ring_mul(x, y).to_ints() == negacyclic_mul(x.to_ints(), y.to_ints(), 19)


def test_serialization_bit_exact(rng):
    p1, p2 = ring.ntt_primes(64, 25, 2)
    P = RingParams(64, p1 * p2, primes=(p1, p2))
    a = RingElem.random(P, rng)
    blob = ring.ring_to_bytes(a)
    assert blob[:4] == (64).to_bytes(4, "little")
    assert blob[4] == P.limb_count == 1
    assert ring.ring_from_bytes(blob, P) == a
    # multi-limb path
    big = ring.ntt_primes(8, 40, 2)
    Pb = RingParams(8, big[0] * big[1])
    b = RingElem.random(Pb, rng)
    blob2 = ring.ring_to_bytes(b)
    assert blob2[4] == Pb.limb_count == 2
    assert ring.ring_from_bytes(blob2, Pb) == b
    # byte-identical across repeated serialization
    assert ring.ring_to_bytes(a) == blob


def test_int_negacyclic_mul_signed(rng):
    n = 32
    a = rng.integers(-(2**30), 2**30, size=n).tolist()
    b = rng.integers(-(2**30), 2**30, size=n).tolist()
    bound = n * (2**60)
    got = ring.int_negacyclic_mul(a, b, bound, n)
    big = 1 << 127
    exp = negacyclic_mul(a, b, big)
    exp = [v - big if v > big // 2 else v for v in exp]
    assert [int(v) for v in got] == exp


def test_scalar_mul(rng):
    P = RingParams(8, 12289)
    a = RingElem.random(P, rng)
    assert ring.ring_scalar_mul(a, 3) == ring.ring_add(ring.ring_add(a, a), a)
