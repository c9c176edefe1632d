import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from privtrain import he, ring


@pytest.fixture(scope="session")
def ring64():
    p = ring.ntt_primes(64, 21, 1)[0]
    return ring.RingParams(64, p)


@pytest.fixture(scope="session")
def ring512():
    p = ring.ntt_primes(512, 21, 1)[0]
    return ring.RingParams(512, p)


@pytest.fixture(scope="session")
def he_small():
    """Compact HE parameter set shared by protocol tests (n=512)."""
    plain = he.default_plain_params(512, prime_bits=17, primes=2)
    return he.HeParams(he.default_cipher_params(512, plain.modulus), plain)


@pytest.fixture(scope="session")
def he_default_n4096():
    return he.default_he_params(4096)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
